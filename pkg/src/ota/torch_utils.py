"""Torch helpers: seeded parameter init, state-dict bridging, optimizers, batching."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np
import torch
from torch import nn

from .core import Checkpoint, CheckpointMeta, ConfigError, OptimizerConfig, SeededRng


def init_module_params(module: nn.Module, rng: SeededRng) -> None:
    """Re-initialize every parameter from an explicit generator, in registration order.

    Conv/linear weights get Kaiming-uniform bounds (ReLU gain), biases zero,
    embeddings normal(0, 0.02), norm layers identity. Deterministic given rng.
    """
    gen = rng.torch_generator()
    with torch.no_grad():
        for mod in module.modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                fan_in = mod.weight.shape[1] * (
                    mod.weight.shape[2] * mod.weight.shape[3] if mod.weight.dim() == 4 else 1
                )
                if isinstance(mod, nn.ConvTranspose2d):
                    fan_in = mod.weight.shape[0] * mod.weight.shape[2] * mod.weight.shape[3]
                bound = math.sqrt(6.0 / max(fan_in, 1))
                mod.weight.uniform_(-bound, bound, generator=gen)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.Embedding):
                mod.weight.normal_(0.0, 0.02, generator=gen)
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        for name, param in module.named_parameters():
            if "pos_emb" in name or "start_emb" in name:
                param.normal_(0.0, 0.02, generator=gen)


def state_dict_to_params(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_params_into(module: nn.Module, params: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in params.items()}
    module.load_state_dict(state, strict=True)


def checkpoint_from_module(module: nn.Module, stage_name: str, seed: int,
                           digest: str, extra: Optional[dict] = None) -> Checkpoint:
    meta = CheckpointMeta(stage_name=stage_name, seed=seed, config_digest=digest,
                          extra=extra or {})
    return Checkpoint(params=state_dict_to_params(module), meta=meta)


def build_optimizer(params, cfg: OptimizerConfig, lr: float,
                    weight_decay: Optional[float] = None) -> torch.optim.Optimizer:
    wd = cfg.weight_decay if weight_decay is None else weight_decay
    if cfg.kind == "sgd_nesterov":
        return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum,
                               weight_decay=wd, nesterov=cfg.momentum > 0)
    if cfg.kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=wd)
    raise ConfigError(f"unknown optimizer kind {cfg.kind!r}")


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def batch_indices(n: int, batch_size: int, steps: int, rng: SeededRng) -> Iterator[np.ndarray]:
    """Yield `steps` batches of indices, reshuffling each pass over the data."""
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        size = min(batch_size, n)
        yield order[pos : pos + size]
        pos += size


def stack_pixels(records, indices=None) -> torch.Tensor:
    """Stack records' H×W×C pixels into a float32 B×C×H×W tensor."""
    recs = records if indices is None else [records[i] for i in indices]
    arr = np.stack([r.pixels for r in recs]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))
