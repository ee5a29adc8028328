"""Re-representation fine-tuning pipeline: delivering, calibration, and baselines.

Stage 2 passes downstream images through the upstream-trained tokenizer, Stage 3
trains only the task head on that data with the backbone frozen, and Stage 4
fine-tunes everything on the original images under an lr × weight-decay grid
search. Linear-probe and plain fine-tuning baselines share the same machinery.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (Checkpoint, ConfigError, DatasetManifest, PipelineError, Provenance,
                   ProvenanceError, SeededRng, StageConfig, TrainingDivergedError,
                   config_digest)
from .torch_utils import (batch_indices, build_optimizer, checkpoint_from_module,
                          init_module_params, load_params_into, set_lr, stack_pixels)
from .vq import rerepresent, vq_model_from_checkpoint


class FreezePolicy(str, Enum):
    ALL_TRAINABLE = "all_trainable"
    BACKBONE_FROZEN = "backbone_frozen"


@dataclass(frozen=True)
class BackboneConfig:
    image_hw: int = 32
    channels: int = 3
    width: int = 32
    depth: int = 3           # stride-2 stages
    feature_dim: int = 64


class SmallCnn(nn.Module):
    """Configurable conv stack ending in global average pooling."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(cfg.channels, cfg.width, 3, padding=1), nn.ReLU()]
        w = cfg.width
        for _ in range(cfg.depth):
            layers += [nn.Conv2d(w, w * 2, 3, stride=2, padding=1), nn.ReLU()]
            w *= 2
        layers += [nn.Conv2d(w, cfg.feature_dim, 1)]
        self.net = nn.Sequential(*layers)
        self.feature_dim = cfg.feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).mean(dim=(2, 3))


class TaskModel(nn.Module):
    """Backbone (the foundation-model stand-in) plus a linear classification head."""

    def __init__(self, backbone_cfg: BackboneConfig, num_classes: int):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.num_classes = num_classes
        self.backbone = SmallCnn(backbone_cfg)
        self.head = nn.Linear(backbone_cfg.feature_dim, num_classes)
        self.freeze_policy = FreezePolicy.ALL_TRAINABLE

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def trainable_parameters(self):
        if self.freeze_policy is FreezePolicy.BACKBONE_FROZEN:
            return list(self.head.parameters())
        return list(self.parameters())

    def apply_freeze(self) -> None:
        frozen = self.freeze_policy is FreezePolicy.BACKBONE_FROZEN
        for p in self.backbone.parameters():
            p.requires_grad_(not frozen)
        for p in self.head.parameters():
            p.requires_grad_(True)


def build_task_model(backbone_cfg: BackboneConfig, num_classes: int,
                     rng: Optional[SeededRng] = None) -> TaskModel:
    model = TaskModel(backbone_cfg, num_classes)
    if rng is not None:
        init_module_params(model, rng)
    return model


def task_model_from_checkpoint(ckpt: Checkpoint) -> TaskModel:
    arch = ckpt.meta.extra.get("arch")
    if arch is None:
        raise PipelineError("checkpoint has no task-model architecture metadata")
    model = build_task_model(BackboneConfig(**arch["backbone"]), arch["num_classes"])
    load_params_into(model, ckpt.params)
    model.eval()
    return model


def task_model_arch(model: TaskModel) -> dict:
    return {"backbone": dataclasses.asdict(model.backbone_cfg), "num_classes": model.num_classes}


def warm_start_from(ckpt: Checkpoint, num_classes: int, rng: SeededRng) -> TaskModel:
    """Backbone weights from a checkpoint, fresh seeded head for the new task."""
    arch = ckpt.meta.extra.get("arch")
    if arch is None:
        raise PipelineError("checkpoint has no task-model architecture metadata")
    model = build_task_model(BackboneConfig(**arch["backbone"]), num_classes, rng.derive("head"))
    backbone_params = {k[len("backbone."):]: torch.from_numpy(np.ascontiguousarray(v))
                       for k, v in ckpt.params.items() if k.startswith("backbone.")}
    model.backbone.load_state_dict(backbone_params, strict=True)
    return model


# ---------------------------------------------------------------------------
# Grid construction
# ---------------------------------------------------------------------------

def make_lr_grid(lo: float, hi: float, n: int) -> list[float]:
    """n log-spaced values from hi down to lo, endpoints exact."""
    if n < 2:
        raise ConfigError(f"grid needs at least 2 points, got {n}")
    if not (0.0 < lo < hi):
        raise ConfigError(f"need 0 < lo < hi, got lo={lo}, hi={hi}")
    exps = np.linspace(math.log10(hi), math.log10(lo), n)
    return [hi] + [float(10.0 ** e) for e in exps[1:-1]] + [lo]


@dataclass
class Trial:
    lr: float
    wd: float
    val_metric: float
    diverged: bool = False


@dataclass
class GridSearchResult:
    trials: list[Trial]
    winner: tuple[float, float]
    selection_rule: str = "max_val_metric"

    def winner_metric(self) -> float:
        return next(t.val_metric for t in self.trials
                    if (t.lr, t.wd) == self.winner and not t.diverged)

    def as_dict(self) -> dict:
        return {"trials": [{"lr": t.lr, "wd": t.wd, "diverged": t.diverged,
                            "val_metric": None if t.diverged else t.val_metric}
                           for t in self.trials],
                "winner": {"lr": self.winner[0], "wd": self.winner[1]},
                "selection_rule": self.selection_rule}


# ---------------------------------------------------------------------------
# Input pipeline and training loop
# ---------------------------------------------------------------------------

def prepare_batch(x: torch.Tensor, resize: int, out_hw: int,
                  rng: Optional[SeededRng] = None) -> torch.Tensor:
    """Resize to resize×resize then take a square out_hw crop (random when rng given)."""
    if resize < out_hw:
        raise ConfigError(f"resize {resize} smaller than model input {out_hw}")
    if x.shape[-1] != resize:
        x = F.interpolate(x, size=(resize, resize), mode="bilinear", align_corners=False)
    if resize == out_hw:
        return x
    if rng is None:
        off = (resize - out_hw) // 2
        return x[:, :, off : off + out_hw, off : off + out_hw]
    offs = rng.integers(0, resize - out_hw + 1, size=(x.shape[0], 2))
    crops = [x[i : i + 1, :, oy : oy + out_hw, ox : ox + out_hw] for i, (oy, ox) in enumerate(offs)]
    return torch.cat(crops, dim=0)


def train_classifier(model: TaskModel, data: DatasetManifest, cfg: StageConfig,
                     rng: SeededRng, lr: float, wd: Optional[float] = None) -> list[float]:
    """Cross-entropy training honoring the model's freeze policy; returns the lr trace."""
    if not data.labeled:
        raise ProvenanceError("classifier training requires labeled data")
    model.apply_freeze()
    params = model.trainable_parameters()
    opt = build_optimizer(params, cfg.optimizer, lr, weight_decay=wd)
    labels_all = torch.tensor([r.label for r in data.records], dtype=torch.long)
    hw = model.backbone_cfg.image_hw
    crop_rng = rng.derive("crops")
    schedule = dataclasses.replace(cfg.lr_schedule, initial=lr)
    trace: list[float] = []
    model.train()
    for step, idx in enumerate(batch_indices(len(data.records), cfg.batch_size, cfg.steps,
                                             rng.derive("batches"))):
        step_lr = schedule.lr_at(step, cfg.steps)
        set_lr(opt, step_lr)
        trace.append(step_lr)
        x = prepare_batch(stack_pixels(data.records, idx), cfg.input_pipeline.resize, hw, crop_rng)
        logits = model(x)
        loss = F.cross_entropy(logits, labels_all[torch.from_numpy(np.ascontiguousarray(idx))])
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"classifier training: non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return trace


def evaluate_top1(model: TaskModel, data: DatasetManifest, batch_size: int = 64) -> float:
    """Fraction of records whose argmax head output matches the label (ties → lowest class)."""
    if not data.labeled:
        raise ProvenanceError("top-1 accuracy requires a labeled dataset")
    if not data.records:
        raise PipelineError("cannot evaluate on an empty dataset")
    hw = model.backbone_cfg.image_hw
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(data.records), batch_size):
            recs = data.records[start : start + batch_size]
            x = prepare_batch(stack_pixels(recs), hw, hw)
            logits = model(x).numpy()
            preds = np.argmax(logits, axis=1)
            correct += int(sum(p == r.label for p, r in zip(preds, recs)))
    return correct / len(data.records)


def split_train_val(data: DatasetManifest, val_fraction: float,
                    rng: SeededRng) -> tuple[DatasetManifest, DatasetManifest]:
    n = len(data.records)
    n_val = max(1, int(round(val_fraction * n)))
    if n_val >= n:
        raise PipelineError(f"validation split of {n_val} leaves no training data (n={n})")
    perm = rng.permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [r for i, r in enumerate(data.records) if i not in val_idx]
    val = [r for i, r in enumerate(data.records) if i in val_idx]
    return data.replace(records=train), data.replace(records=val)


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def stage3_deliver(model: TaskModel, rerep: DatasetManifest, cfg: StageConfig,
                   rng: SeededRng, enforce_provenance: bool = True,
                   val_fraction: float = 0.2) -> Checkpoint:
    """Train only the task head on re-represented data; backbone stays bit-identical.

    When cfg.lr_grid is set, the initial learning rate is grid-searched
    (head-only trials) and the winner's weights are kept.
    """
    if rerep.provenance is not Provenance.RE_REPRESENTED:
        if enforce_provenance:
            raise ProvenanceError(
                f"stage 3 expects re_represented data, got {rerep.provenance.value} "
                "(pass enforce_provenance=False for the ablation path)"
            )
        warnings.warn(f"stage 3 running on {rerep.provenance.value} data (ablation path)")
    model.freeze_policy = FreezePolicy.BACKBONE_FROZEN
    extra: dict = {"delivering_provenance": rerep.provenance.value}
    if cfg.lr_grid:
        wd_cfg = cfg if cfg.wd_grid else cfg.with_(wd_grid=(cfg.optimizer.weight_decay,))
        _, result, trace = grid_search(model, rerep, wd_cfg, rng.derive("stage3"),
                                       val_fraction=val_fraction,
                                       freeze=FreezePolicy.BACKBONE_FROZEN)
        extra["grid"] = result.as_dict()
        metrics = {"val_top1": result.winner_metric(),
                   "winner_lr": result.winner[0], "winner_wd": result.winner[1]}
    else:
        trace = train_classifier(model, rerep, cfg, rng.derive("stage3"),
                                 lr=cfg.lr_schedule.initial)
        metrics = {"train_top1": evaluate_top1(model, rerep)}
    extra.update({"arch": task_model_arch(model), "lr_trace": trace, "metrics": metrics})
    return checkpoint_from_module(model, "stage3_deliver", rng.seed, config_digest(cfg), extra)


def grid_search(model: TaskModel, data: DatasetManifest, cfg: StageConfig, rng: SeededRng,
                val_fraction: float = 0.2, freeze: FreezePolicy = FreezePolicy.ALL_TRAINABLE,
                jobs: int = 1) -> tuple[dict[str, torch.Tensor], GridSearchResult, list[float]]:
    """Train one copy of `model` per (lr, wd) pair; returns winner weights and trials.

    Trials own independent rng streams and models, so `jobs > 1` changes wall
    time only, never results; ties go to the first trial in lr-major order.
    """
    if not cfg.lr_grid or not cfg.wd_grid:
        raise ConfigError("grid search requires non-empty lr_grid and wd_grid")
    train, val = split_train_val(data, val_fraction, rng.derive("valsplit"))
    if not val.records:
        raise PipelineError("empty validation split")

    base_state = copy.deepcopy(model.state_dict())
    pairs = [(lr, wd) for lr in cfg.lr_grid for wd in cfg.wd_grid]

    def run_trial(args: tuple[int, tuple[float, float]]):
        i, (lr, wd) = args
        candidate = build_task_model(model.backbone_cfg, model.num_classes)
        candidate.load_state_dict(copy.deepcopy(base_state))
        candidate.freeze_policy = freeze
        try:
            trace = train_classifier(candidate, train, cfg, rng.derive(f"trial{i}"),
                                     lr=lr, wd=wd)
        except TrainingDivergedError:
            # a too-hot lr is a failed candidate, not a failed search
            return None, None, []
        return evaluate_top1(candidate, val), candidate.state_dict(), trace

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_trial, enumerate(pairs)))
    else:
        outcomes = [run_trial(arg) for arg in enumerate(pairs)]

    trials = [Trial(lr=lr, wd=wd, val_metric=float("nan") if m is None else m,
                    diverged=m is None)
              for (lr, wd), (m, _, _) in zip(pairs, outcomes)]
    scores = [-np.inf if t.diverged else t.val_metric for t in trials]
    if not np.isfinite(max(scores)):
        raise TrainingDivergedError("every grid trial diverged; lower the lr grid")
    best_idx = int(np.argmax(scores))
    _, state, trace = outcomes[best_idx]
    model.load_state_dict(state)
    result = GridSearchResult(trials=trials, winner=(trials[best_idx].lr, trials[best_idx].wd))
    return state, result, trace


def stage4_calibrate(model: TaskModel, original: DatasetManifest, cfg: StageConfig,
                     rng: SeededRng, val_fraction: float = 0.2,
                     enforce_provenance: bool = True,
                     jobs: int = 1) -> tuple[Checkpoint, GridSearchResult]:
    """Full fine-tune on original data with an lr × wd grid search over a held-out split."""
    if enforce_provenance and original.provenance is not Provenance.ORIGINAL:
        raise ProvenanceError(
            f"stage 4 expects original data, got {original.provenance.value} "
            "(pass enforce_provenance=False for the ablation path)"
        )
    _, result, trace = grid_search(model, original, cfg, rng.derive("stage4"),
                                   val_fraction=val_fraction, jobs=jobs)
    winner = result.winner
    extra = {"arch": task_model_arch(model), "lr_trace": trace,
             "grid": result.as_dict(),
             "metrics": {"val_top1": result.winner_metric(),
                         "winner_lr": winner[0], "winner_wd": winner[1]},
             "calibration_provenance": original.provenance.value}
    ckpt = checkpoint_from_module(model, "stage4_calibrate", rng.seed, config_digest(cfg), extra)
    return ckpt, result


@dataclass(frozen=True)
class IrfConfig:
    stage3: StageConfig = StageConfig(steps=500, batch_size=64)
    stage4: StageConfig = StageConfig(steps=500, batch_size=64)
    delivering_data: str = "rerep"       # rerep | original (ablation a)
    calibration_data: str = "original"   # original | rerep (ablation c)
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.delivering_data not in ("rerep", "original"):
            raise ConfigError(f"delivering_data must be rerep|original, got {self.delivering_data}")
        if self.calibration_data not in ("original", "rerep"):
            raise ConfigError(f"calibration_data must be original|rerep, got {self.calibration_data}")


def default_irf_config(desk_scale: bool = True) -> IrfConfig:
    """Desk-scale defaults; the full-size recipe uses 5000-step stages."""
    steps = 500 if desk_scale else 5000
    stage3 = StageConfig(steps=steps, batch_size=64,
                         lr_schedule=dataclasses.replace(StageConfig().lr_schedule, initial=1e-1),
                         lr_grid=tuple(make_lr_grid(1e-3, 1.0, 4)),
                         wd_grid=(1e-5,))
    stage4 = StageConfig(steps=steps, batch_size=64,
                         lr_grid=tuple(make_lr_grid(1e-5, 1e-2, 4)),
                         wd_grid=tuple(make_lr_grid(1e-5, 1e-3, 3)))
    return IrfConfig(stage3=stage3, stage4=stage4)


def run_irf(backbone_ckpt: Checkpoint, downstream: DatasetManifest, vq_ckpt: Checkpoint,
            cfg: IrfConfig, rng: SeededRng, out_dir: Optional[Path] = None,
            jobs: int = 1) -> Checkpoint:
    """Stages 2–4: re-represent, deliver, calibrate. Emits per-stage checkpoints and reports."""
    from .core import save_checkpoint

    stage = "stage2_assemble"
    try:
        if cfg.delivering_data == "rerep" or cfg.calibration_data == "rerep":
            vq_model = vq_model_from_checkpoint(vq_ckpt)
            rerep = rerepresent(downstream, vq_model)
        else:
            rerep = None

        stage = "stage3_deliver"
        delivering = rerep if cfg.delivering_data == "rerep" else downstream
        model = warm_start_from(backbone_ckpt, downstream.num_classes, rng.derive("warmstart"))
        s3_ckpt = stage3_deliver(model, delivering, cfg.stage3, rng,
                                 enforce_provenance=(cfg.delivering_data == "rerep"))

        stage = "stage4_calibrate"
        calibration = downstream if cfg.calibration_data == "original" else rerep
        s4_ckpt, grid = stage4_calibrate(model, calibration, cfg.stage4, rng,
                                         val_fraction=cfg.val_fraction,
                                         enforce_provenance=(cfg.calibration_data == "original"),
                                         jobs=jobs)
    except PipelineError as exc:
        raise PipelineError(f"IRF failed in {stage}: {exc}") from exc

    s4_ckpt.meta.extra["delivering_data"] = cfg.delivering_data
    s4_ckpt.meta.extra["calibration_data"] = cfg.calibration_data
    if out_dir is not None:
        out_dir = Path(out_dir)
        if rerep is not None:
            from .core import save_dataset

            save_dataset(rerep, out_dir / "rerepresented")
        save_checkpoint(s3_ckpt, out_dir / "stage3_deliver.ckpt")
        save_checkpoint(s4_ckpt, out_dir / "stage4_calibrate.ckpt")
        for name, ckpt in (("stage3_deliver", s3_ckpt), ("stage4_calibrate", s4_ckpt)):
            write_stage_report(out_dir, name, ckpt, rng.seed)
    return s4_ckpt


def write_stage_report(out_dir: Path, stage: str, ckpt: Checkpoint, seed: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace = ckpt.meta.extra.get("lr_trace", [])
    trace_path = out_dir / f"{stage}_lr_trace.json"
    trace_path.write_text(json.dumps(trace) + "\n")
    report = {"stage": stage, "config": ckpt.meta.config_digest, "seed": seed,
              "metrics": ckpt.meta.extra.get("metrics", {}),
              "lr_trace_path": trace_path.name}
    path = out_dir / f"{stage}_report.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def _baseline(backbone_ckpt: Checkpoint, d: DatasetManifest, cfg: StageConfig, rng: SeededRng,
              freeze: FreezePolicy, method: str, dataset_name: str,
              val_fraction: float = 0.2) -> Checkpoint:
    model = warm_start_from(backbone_ckpt, d.num_classes, rng.derive("warmstart"))
    model.freeze_policy = freeze
    _, result, trace = grid_search(model, d, cfg, rng.derive(method),
                                   val_fraction=val_fraction, freeze=freeze)
    top1 = result.winner_metric()
    report = {"method": method, "dataset": dataset_name, "top1": top1,
              "winner_lr": result.winner[0], "winner_wd": result.winner[1]}
    extra = {"arch": task_model_arch(model), "lr_trace": trace, "grid": result.as_dict(),
             "metrics": {"val_top1": top1}, "report": report}
    return checkpoint_from_module(model, method, rng.seed, config_digest(cfg), extra)


def linear_probe(backbone_ckpt: Checkpoint, d: DatasetManifest, cfg: StageConfig,
                 rng: SeededRng, dataset_name: str = "dataset") -> Checkpoint:
    """Head-only training on original data with the stage-4 grid."""
    return _baseline(backbone_ckpt, d, cfg, rng, FreezePolicy.BACKBONE_FROZEN,
                     "linear_probe", dataset_name)


def finetune(backbone_ckpt: Checkpoint, d: DatasetManifest, cfg: StageConfig,
             rng: SeededRng, dataset_name: str = "dataset") -> Checkpoint:
    """Everything trainable on original data with the stage-4 grid."""
    return _baseline(backbone_ckpt, d, cfg, rng, FreezePolicy.ALL_TRAINABLE,
                     "finetune", dataset_name)


# ---------------------------------------------------------------------------
# Upstream pretraining (foundation-model stand-in)
# ---------------------------------------------------------------------------

def pretrain_backbone(upstream: DatasetManifest, backbone_cfg: BackboneConfig,
                      cfg: StageConfig, rng: SeededRng) -> Checkpoint:
    """Supervised pretraining of the teacher backbone on upstream data."""
    model = build_task_model(backbone_cfg, upstream.num_classes, rng.derive("init"))
    trace = train_classifier(model, upstream, cfg, rng.derive("pretrain"),
                             lr=cfg.lr_schedule.initial)
    top1 = evaluate_top1(model, upstream)
    extra = {"arch": task_model_arch(model), "lr_trace": trace,
             "metrics": {"train_top1": top1}}
    return checkpoint_from_module(model, "backbone_pretrain", rng.seed, config_digest(cfg), extra)
