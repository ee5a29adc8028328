"""Run configuration: TOML/JSON file, dotted-key overrides, strict schema.

Precedence is flags > file > defaults. Every section and field below has a
working default, so an empty config is a valid run. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

from .core import ConfigError, StageConfig, OptimizerConfig, LrSchedule, InputPipeline, config_digest
from .digg import MaskSpec
from .distill import DistillConfig, OtaConfig
from .irf import BackboneConfig, IrfConfig, make_lr_grid
from .lt import LtConfig
from .vq import VqConfig


@dataclass(frozen=True)
class DataSection:
    upstream: str = "data/upstream"
    downstream: str = "data/downstream"
    eval: str = ""                  # defaults to the downstream directory
    few_fraction: float = 0.1
    stratified: bool = False


@dataclass(frozen=True)
class SynthSection:
    n_upstream: int = 512
    n_downstream: int = 256
    image_hw: int = 32
    num_classes: int = 4


@dataclass(frozen=True)
class VqSection:
    image_hw: int = 32
    channels: int = 3
    stride: int = 4
    hidden: int = 64
    n_codes: int = 256
    code_dim: int = 16
    beta_commit: float = 0.25
    lambda_rec: float = 1.0
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3


@dataclass(frozen=True)
class LtSection:
    n_layers: int = 4
    n_heads: int = 4
    dim: int = 128
    mlp_ratio: float = 4.0
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    max_train_grids: int = 512      # cap on tokenized upstream grids


@dataclass(frozen=True)
class BackboneSection:
    width: int = 32
    depth: int = 3
    feature_dim: int = 64
    steps: int = 800
    batch_size: int = 32
    lr: float = 0.05


@dataclass(frozen=True)
class IrfSection:
    stage3_steps: int = 500
    stage4_steps: int = 500
    batch_size: int = 64
    resize: int = 32
    stage3_lr_hi: float = 1.0       # stage-3 initial-lr grid: 4 points in [1, 1e-3]
    stage3_lr_lo: float = 1e-3
    stage3_lr_points: int = 4
    stage3_wd: float = 1e-5
    stage4_lr_hi: float = 1e-2      # stage-4 grids: 4 lrs in [1e-2, 1e-5], 3 wds in [1e-3, 1e-5]
    stage4_lr_lo: float = 1e-5
    stage4_lr_points: int = 4
    stage4_wd_hi: float = 1e-3
    stage4_wd_lo: float = 1e-5
    stage4_wd_points: int = 3
    delivering_data: str = "rerep"
    calibration_data: str = "original"
    val_fraction: float = 0.2
    baseline_steps: int = 1000      # linear probe / fine-tune (full-size recipe: 10000)


@dataclass(frozen=True)
class DiggSection:
    scheme: str = "bottom_half"
    ratio: float = 0.5
    target_count: int = 5000
    temperature: float = 1.0
    top_k: int = 100


@dataclass(frozen=True)
class DistillSection:
    epochs: int = 70
    lr: float = 0.1                 # full-size recipe uses 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    student_width: int = 16
    student_depth: int = 2
    student_feature_dim: int = 32
    student_init: str = "random"
    lp_then_ft: bool = False
    finetune_steps: int = 500


@dataclass(frozen=True)
class MetricsSection:
    eps: float = 1e-6


@dataclass(frozen=True)
class SeedsSection:
    master: int = 7


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = DataSection()
    synth: SynthSection = SynthSection()
    vq: VqSection = VqSection()
    lt: LtSection = LtSection()
    backbone: BackboneSection = BackboneSection()
    irf: IrfSection = IrfSection()
    digg: DiggSection = DiggSection()
    distill: DistillSection = DistillSection()
    metrics: MetricsSection = MetricsSection()
    seeds: SeedsSection = SeedsSection()
    output_dir: str = "runs/out"

    def digest(self) -> str:
        return config_digest(self)


def _build_section(cls, values: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{path}]")
    return cls(**values)


def build_run_config(raw: dict) -> RunConfig:
    section_classes = {f.name: f.default.__class__ for f in fields(RunConfig)
                       if f.name != "output_dir"}
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key == "output_dir":
            kwargs[key] = str(value)
        elif key in section_classes:
            if not isinstance(value, dict):
                raise ConfigError(f"section [{key}] must be a table, got {type(value).__name__}")
            kwargs[key] = _build_section(section_classes[key], value, key)
        else:
            raise ConfigError(f"unknown config section {key!r}")
    return RunConfig(**kwargs)


def _read_config_file(path: Path) -> dict:
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    try:
        import tomllib  # py311+
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(text)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply `section.key=value` strings; values parse as JSON, falling back to str."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, _, value_str = item.partition("=")
        try:
            value = json.loads(value_str)
        except json.JSONDecodeError:
            value = value_str
        parts = dotted.split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a non-table value")
        node[parts[-1]] = value
    return raw


def load_run_config(path: Optional[Path | str], overrides: Optional[list[str]] = None,
                    ) -> tuple[RunConfig, dict]:
    """Returns (config, provenance record of file + overrides)."""
    raw = _read_config_file(Path(path)) if path else {}
    overrides = overrides or []
    raw = apply_overrides(raw, list(overrides))
    cfg = build_run_config(raw)
    record = {"config_file": str(path) if path else None, "overrides": overrides,
              "digest": cfg.digest()}
    return cfg, record


# ---------------------------------------------------------------------------
# Mapping sections onto module configs
# ---------------------------------------------------------------------------

def _adam_stage(steps: int, batch_size: int, lr: float) -> StageConfig:
    return StageConfig(steps=steps, batch_size=batch_size,
                       optimizer=OptimizerConfig(kind="adam", weight_decay=0.0),
                       lr_schedule=LrSchedule(initial=lr, milestones=(), decay=1.0))


def vq_configs(rc: RunConfig) -> tuple[VqConfig, StageConfig]:
    s = rc.vq
    vq_cfg = VqConfig(image_hw=s.image_hw, channels=s.channels, stride=s.stride,
                      hidden=s.hidden, n_codes=s.n_codes, code_dim=s.code_dim,
                      beta_commit=s.beta_commit, lambda_rec=s.lambda_rec)
    return vq_cfg, _adam_stage(s.steps, s.batch_size, s.lr)


def lt_configs(rc: RunConfig) -> tuple[LtConfig, StageConfig]:
    s = rc.lt
    grid_hw = rc.vq.image_hw // rc.vq.stride
    lt_cfg = LtConfig(n_layers=s.n_layers, n_heads=s.n_heads, dim=s.dim,
                      context=grid_hw * grid_hw, vocab=rc.vq.n_codes, mlp_ratio=s.mlp_ratio)
    return lt_cfg, _adam_stage(s.steps, s.batch_size, s.lr)


def backbone_configs(rc: RunConfig) -> tuple[BackboneConfig, StageConfig]:
    s = rc.backbone
    cfg = BackboneConfig(image_hw=rc.vq.image_hw, channels=rc.vq.channels,
                         width=s.width, depth=s.depth, feature_dim=s.feature_dim)
    stage = StageConfig(steps=s.steps, batch_size=s.batch_size,
                        lr_schedule=LrSchedule(initial=s.lr),
                        input_pipeline=InputPipeline(resize=rc.irf.resize))
    return cfg, stage


def irf_config(rc: RunConfig) -> IrfConfig:
    s = rc.irf
    stage3 = StageConfig(
        steps=s.stage3_steps, batch_size=s.batch_size,
        optimizer=OptimizerConfig(weight_decay=s.stage3_wd),
        lr_schedule=LrSchedule(initial=s.stage3_lr_hi),
        lr_grid=tuple(make_lr_grid(s.stage3_lr_lo, s.stage3_lr_hi, s.stage3_lr_points)),
        wd_grid=(s.stage3_wd,),
        input_pipeline=InputPipeline(resize=s.resize),
    )
    stage4 = StageConfig(
        steps=s.stage4_steps, batch_size=s.batch_size,
        lr_grid=tuple(make_lr_grid(s.stage4_lr_lo, s.stage4_lr_hi, s.stage4_lr_points)),
        wd_grid=tuple(make_lr_grid(s.stage4_wd_lo, s.stage4_wd_hi, s.stage4_wd_points)),
        input_pipeline=InputPipeline(resize=s.resize),
    )
    return IrfConfig(stage3=stage3, stage4=stage4, delivering_data=s.delivering_data,
                     calibration_data=s.calibration_data, val_fraction=s.val_fraction)


def baseline_config(rc: RunConfig) -> StageConfig:
    return dataclasses.replace(irf_config(rc).stage4, steps=rc.irf.baseline_steps)


def mask_spec(rc: RunConfig) -> MaskSpec:
    return MaskSpec(scheme=rc.digg.scheme, ratio=rc.digg.ratio)


def distill_config(rc: RunConfig) -> DistillConfig:
    s = rc.distill
    return DistillConfig(epochs=s.epochs, lr=s.lr, momentum=s.momentum,
                         weight_decay=s.weight_decay, batch_size=s.batch_size)


def student_backbone_config(rc: RunConfig) -> BackboneConfig:
    s = rc.distill
    return BackboneConfig(image_hw=rc.vq.image_hw, channels=rc.vq.channels,
                          width=s.student_width, depth=s.student_depth,
                          feature_dim=s.student_feature_dim)


def finetune_stage_config(rc: RunConfig) -> StageConfig:
    return dataclasses.replace(irf_config(rc).stage4, steps=rc.distill.finetune_steps)


def ota_config(rc: RunConfig) -> OtaConfig:
    return OtaConfig(irf=irf_config(rc), distill=distill_config(rc),
                     finetune=finetune_stage_config(rc),
                     student_backbone=student_backbone_config(rc),
                     digg_target=rc.digg.target_count, mask=mask_spec(rc),
                     temperature=rc.digg.temperature,
                     top_k=min(rc.digg.top_k, rc.vq.n_codes),
                     student_init=rc.distill.student_init,
                     lp_then_ft=rc.distill.lp_then_ft)
