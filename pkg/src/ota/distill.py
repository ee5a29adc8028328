"""Feature-level knowledge distillation and the two end-to-end orderings.

The student mimics the teacher's pooled backbone features under L2 loss on a
generated corpus; a linear adapter bridges unequal feature widths and is kept
only as a sidecar artifact. After distillation the student is fine-tuned on the
original few-data split, never on pseudo data.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (Checkpoint, ConfigError, DatasetManifest, PipelineError, Provenance,
                   ProvenanceError, SeededRng, StageConfig, TrainingDivergedError,
                   config_digest, save_checkpoint, save_dataset)
from .digg import MaskSpec, build_distill_set
from .irf import (BackboneConfig, FreezePolicy, IrfConfig, TaskModel, build_task_model,
                  evaluate_top1, grid_search, run_irf, task_model_arch,
                  task_model_from_checkpoint, warm_start_from)
from .lt import SamplingParams, lt_model_from_checkpoint
from .torch_utils import batch_indices, checkpoint_from_module, stack_pixels
from .vq import vq_model_from_checkpoint

OTA_ORDERS = ("irf_then_digg", "digg_then_irf")


@dataclass(frozen=True)
class DistillConfig:
    """SGD recipe for feature mimicking.

    The full-size recipe uses lr 1.0; small models diverge there, so the
    desk-scale default is 0.1. Set lr=1.0 to reproduce the original setting.
    """

    epochs: int = 70
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


class FeatureAdapter(nn.Module):
    """Trainable linear map from student feature width into teacher feature width."""

    def __init__(self, student_dim: int, teacher_dim: int, rng: Optional[SeededRng] = None):
        super().__init__()
        self.linear = nn.Linear(student_dim, teacher_dim, bias=False)
        with torch.no_grad():
            if student_dim == teacher_dim:
                self.linear.weight.copy_(torch.eye(student_dim))
            elif rng is not None:
                bound = 1.0 / math.sqrt(student_dim)
                self.linear.weight.uniform_(-bound, bound, generator=rng.torch_generator())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x)


def distill_batch_loss(teacher: TaskModel, student: TaskModel, adapter: FeatureAdapter,
                       x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        target = teacher.features(x)
    return F.mse_loss(adapter(student.features(x)), target)


def distill(teacher_ckpt: Checkpoint, student: TaskModel, corpus: DatasetManifest,
            cfg: DistillConfig, rng: SeededRng,
            adapter_sidecar: Optional[Path] = None) -> Checkpoint:
    """Train the student backbone (plus adapter) to match frozen teacher features.

    Returns a checkpoint of the student task model only; the adapter goes to
    `adapter_sidecar` when a path is given.
    """
    if corpus.provenance not in (Provenance.PSEUDO, Provenance.ORIGINAL):
        raise ProvenanceError(
            f"distillation corpus must be pseudo or original, got {corpus.provenance.value}"
        )
    if not corpus.records:
        raise PipelineError("distill: empty corpus")
    teacher = task_model_from_checkpoint(teacher_ckpt)
    for p in teacher.parameters():
        p.requires_grad_(False)
    t_dim = teacher.backbone_cfg.feature_dim
    s_dim = student.backbone_cfg.feature_dim
    adapter = FeatureAdapter(s_dim, t_dim, rng.derive("adapter"))

    opt = torch.optim.SGD(list(student.backbone.parameters()) + list(adapter.parameters()),
                          lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n = len(corpus.records)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    data_rng = rng.derive("batches")
    epoch_losses: list[float] = []
    student.train()
    for epoch in range(cfg.epochs):
        batch_losses = []
        for idx in batch_indices(n, cfg.batch_size, steps_per_epoch, data_rng):
            x = stack_pixels(corpus.records, idx)
            loss = distill_batch_loss(teacher, student, adapter, x)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"distill: non-finite loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(batch_losses)))
    student.eval()

    digest = config_digest(cfg)
    if adapter_sidecar is not None:
        save_checkpoint(checkpoint_from_module(adapter, "distill_adapter", rng.seed, digest),
                        adapter_sidecar)
    extra = {"arch": task_model_arch(student), "epoch_losses": epoch_losses,
             "teacher_checksum": teacher_ckpt.checksum(),
             "metrics": {"loss_first_epoch": epoch_losses[0] if epoch_losses else None,
                         "loss_last_epoch": epoch_losses[-1] if epoch_losses else None}}
    return checkpoint_from_module(student, "distill", rng.seed, digest, extra)


def final_finetune(student_ckpt: Checkpoint, few_data: DatasetManifest, cfg: StageConfig,
                   rng: SeededRng, lp_then_ft: bool = False,
                   val_fraction: float = 0.2) -> Checkpoint:
    """Stage-4-style grid-searched fine-tune of the distilled student on original data.

    `lp_then_ft` first trains the head alone, then everything; the default is a
    plain fine-tune, which performs essentially the same.
    """
    if few_data.provenance is not Provenance.ORIGINAL:
        raise ProvenanceError(
            f"final fine-tune requires original data, got {few_data.provenance.value}"
        )
    model = task_model_from_checkpoint(student_ckpt)
    if lp_then_ft:
        model.freeze_policy = FreezePolicy.BACKBONE_FROZEN
        from .irf import train_classifier

        train_classifier(model, few_data, cfg, rng.derive("lp"), lr=cfg.lr_schedule.initial)
        model.freeze_policy = FreezePolicy.ALL_TRAINABLE
    _, result, trace = grid_search(model, few_data, cfg, rng.derive("ft"),
                                   val_fraction=val_fraction)
    extra = {"arch": task_model_arch(model), "lr_trace": trace, "grid": result.as_dict(),
             "metrics": {"val_top1": result.winner_metric(),
                         "winner_lr": result.winner[0], "winner_wd": result.winner[1]},
             "lp_then_ft": lp_then_ft}
    return checkpoint_from_module(model, "final_finetune", rng.seed, config_digest(cfg), extra)


# ---------------------------------------------------------------------------
# End-to-end orchestration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OtaConfig:
    irf: IrfConfig = IrfConfig()
    distill: DistillConfig = DistillConfig()
    finetune: StageConfig = StageConfig(steps=500, batch_size=64,
                                        lr_grid=(1e-2, 1e-3), wd_grid=(1e-4,))
    student_backbone: BackboneConfig = BackboneConfig(width=16, depth=2, feature_dim=32)
    digg_target: int = 256
    mask: MaskSpec = MaskSpec()
    temperature: float = 1.0
    top_k: int = 100
    student_init: str = "random"  # random | upstream (needs a student-shaped checkpoint)
    lp_then_ft: bool = False

    def __post_init__(self) -> None:
        if self.student_init not in ("random", "upstream"):
            raise ConfigError(f"student_init must be random|upstream, got {self.student_init}")


def run_ota(order: str, backbone_ckpt: Checkpoint, vq_ckpt: Checkpoint, lt_ckpt: Checkpoint,
            few_data: DatasetManifest, eval_data: DatasetManifest, cfg: OtaConfig,
            rng: SeededRng, out_dir: Optional[Path] = None, dataset_name: str = "synthetic",
            student_init_ckpt: Optional[Checkpoint] = None,
            jobs: int = 1) -> tuple[Checkpoint, dict]:
    """Run one full ordering and emit a comparison-ready report.

    irf_then_digg: adapt the teacher, generate, distill from it, fine-tune.
    digg_then_irf: generate, distill from the raw teacher, then adapt the student.
    """
    if order not in OTA_ORDERS:
        raise ConfigError(f"order must be one of {OTA_ORDERS}, got {order!r}")
    out_dir = Path(out_dir) if out_dir is not None else None
    vq_model = vq_model_from_checkpoint(vq_ckpt)
    lt_model = lt_model_from_checkpoint(lt_ckpt)
    sampling = SamplingParams(rng=rng.derive("sampling-template"),
                              temperature=cfg.temperature,
                              top_k=min(cfg.top_k, lt_model.cfg.vocab))

    def make_student() -> TaskModel:
        if cfg.student_init == "upstream":
            if student_init_ckpt is None:
                raise ConfigError("student_init=upstream needs a student-shaped checkpoint")
            return warm_start_from(student_init_ckpt, few_data.num_classes,
                                   rng.derive("student"))
        return build_task_model(cfg.student_backbone, few_data.num_classes,
                                rng.derive("student"))

    stage = "setup"
    try:
        stage = "digg"
        corpus = build_distill_set(few_data, cfg.digg_target, vq_model, lt_model,
                                   cfg.mask, sampling, rng.derive("digg"), jobs=jobs)
        if out_dir is not None:
            save_dataset(corpus, out_dir / "distill_corpus")

        if order == "irf_then_digg":
            stage = "irf(teacher)"
            teacher_final = run_irf(backbone_ckpt, few_data, vq_ckpt, cfg.irf,
                                    rng.derive("irf"),
                                    out_dir / "irf" if out_dir else None, jobs=jobs)
            stage = "distill"
            sidecar = out_dir / "adapter.ckpt" if out_dir else None
            distilled = distill(teacher_final, make_student(), corpus, cfg.distill,
                                rng.derive("distill"), adapter_sidecar=sidecar)
            stage = "final_finetune"
            final = final_finetune(distilled, few_data, cfg.finetune, rng.derive("ft"),
                                   lp_then_ft=cfg.lp_then_ft)
        else:
            stage = "distill"
            sidecar = out_dir / "adapter.ckpt" if out_dir else None
            distilled = distill(backbone_ckpt, make_student(), corpus, cfg.distill,
                                rng.derive("distill"), adapter_sidecar=sidecar)
            stage = "irf(student)"
            final = run_irf(distilled, few_data, vq_ckpt, cfg.irf, rng.derive("irf"),
                            out_dir / "irf" if out_dir else None, jobs=jobs)
    except PipelineError as exc:
        raise PipelineError(f"OTA ({order}) failed in {stage}: {exc}") from exc

    top1 = evaluate_top1(task_model_from_checkpoint(final), eval_data)
    report = {
        "order": order,
        "teacher": {"stage": backbone_ckpt.meta.stage_name, "checksum": backbone_ckpt.checksum()},
        "student": {"backbone": dataclasses.asdict(cfg.student_backbone),
                    "init": cfg.student_init},
        "datasets": [{"name": dataset_name, "top1": top1}],
        "average_top1": top1,
        "seed": rng.seed,
        "config_digest": config_digest(cfg),
    }
    final.meta.extra["ota_report"] = report
    if out_dir is not None:
        save_checkpoint(final, out_dir / "final.ckpt")
        (out_dir / "ota_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return final, report


def comparison_table(reports: list[dict]) -> str:
    """TSV with one row per ordering: per-dataset top-1 plus the average."""
    names: list[str] = []
    for rep in reports:
        for entry in rep["datasets"]:
            if entry["name"] not in names:
                names.append(entry["name"])
    lines = ["order\t" + "\t".join(names) + "\taverage"]
    for rep in reports:
        by_name = {e["name"]: e["top1"] for e in rep["datasets"]}
        cells = [f"{by_name.get(n, float('nan')):.4f}" for n in names]
        lines.append(f"{rep['order']}\t" + "\t".join(cells) + f"\t{rep['average_top1']:.4f}")
    return "\n".join(lines) + "\n"
