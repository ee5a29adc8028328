"""Causal next-index model over token grids, plus masked auto-regressive completion.

Grids are flattened in raster (row-major) order. Position t is predicted from a
learned start state plus all tokens before t, so completing a masked region fills
it token by token, conditioned on every preceding real or generated token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (Checkpoint, ConfigError, PipelineError, SeededRng, StageConfig,
                   TrainingDivergedError, config_digest)
from .torch_utils import (batch_indices, build_optimizer, checkpoint_from_module,
                          init_module_params, load_params_into, set_lr)


@dataclass(frozen=True)
class LtConfig:
    n_layers: int = 4
    n_heads: int = 4
    dim: int = 128
    context: int = 64
    vocab: int = 256
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")


@dataclass
class SamplingParams:
    rng: SeededRng
    temperature: float = 1.0
    top_k: int = 100

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")


class _Block(nn.Module):
    def __init__(self, cfg: LtConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.dim // cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.qkv = nn.Linear(cfg.dim, cfg.dim * 3)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        self.ln2 = nn.LayerNorm(cfg.dim)
        hidden = int(cfg.dim * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(cfg.dim, hidden), nn.GELU(), nn.Linear(hidden, cfg.dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        att = att.masked_fill(causal, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(y)
        return x + self.mlp(self.ln2(x))


class LatentTransformer(nn.Module):
    def __init__(self, cfg: LtConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab, cfg.dim)
        self.start_emb = nn.Parameter(torch.zeros(cfg.dim))
        self.pos_emb = nn.Parameter(torch.zeros(cfg.context, cfg.dim))
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab, bias=False)

    def forward(self, prefix: torch.Tensor) -> torch.Tensor:
        """Logits (B, L+1, vocab): position i is predicted from prefix[:, :i]."""
        b, length = prefix.shape
        if length + 1 > self.cfg.context:
            raise PipelineError(f"prefix length {length} exceeds context {self.cfg.context}")
        start = self.start_emb.expand(b, 1, -1)
        x = torch.cat([start, self.tok_emb(prefix)], dim=1) if length else start
        x = x + self.pos_emb[: length + 1]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


def build_lt_model(cfg: LtConfig, rng: Optional[SeededRng] = None) -> LatentTransformer:
    model = LatentTransformer(cfg)
    if rng is not None:
        init_module_params(model, rng)
    return model


def lt_model_from_checkpoint(ckpt: Checkpoint) -> LatentTransformer:
    arch = ckpt.meta.extra.get("arch")
    if arch is None:
        raise PipelineError("checkpoint has no transformer architecture metadata")
    model = build_lt_model(LtConfig(**arch))
    load_params_into(model, ckpt.params)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def flatten_grid(grid: np.ndarray) -> np.ndarray:
    """Raster-scan (row-major) flattening."""
    return np.asarray(grid, dtype=np.int64).reshape(-1)


def next_logits(prefix: Sequence[int] | np.ndarray, model: LatentTransformer) -> np.ndarray:
    """Logits over the vocabulary for the token following `prefix`."""
    cfg = model.cfg
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    if prefix.size >= cfg.context:
        raise PipelineError(f"prefix length {prefix.size} must be < context {cfg.context}")
    if prefix.size and (prefix.min() < 0 or prefix.max() >= cfg.vocab):
        raise PipelineError("prefix token out of range")
    with torch.no_grad():
        logits = model(torch.from_numpy(prefix).unsqueeze(0))[0, -1]
    return logits.numpy()


def sample_from_logits(logits: np.ndarray, s: SamplingParams) -> int:
    """Top-k truncated, temperature-scaled draw; ties order by lowest index."""
    v = logits.shape[0]
    if s.top_k > v:
        raise ConfigError(f"top_k {s.top_k} exceeds vocabulary {v}")
    order = np.lexsort((np.arange(v), -logits.astype(np.float64)))
    sel = order[: s.top_k]
    scaled = logits[sel].astype(np.float64) / s.temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    cdf = np.cumsum(probs)
    u = s.rng.uniform()
    return int(sel[min(int(np.searchsorted(cdf, u, side="right")), s.top_k - 1)])


def complete_tokens(partial: np.ndarray, mask: np.ndarray, model: LatentTransformer,
                    s: SamplingParams) -> np.ndarray:
    """Fill masked grid positions in raster order; unmasked positions pass through bit-exact."""
    partial = np.asarray(partial, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != partial.shape:
        raise PipelineError(f"mask shape {mask.shape} != grid shape {partial.shape}")
    cfg = model.cfg
    if partial.size != cfg.context:
        raise PipelineError(f"grid area {partial.size} != model context {cfg.context}")
    flat = partial.reshape(-1).copy()
    flat_mask = mask.reshape(-1)
    unmasked = flat[~flat_mask]
    if unmasked.size and (unmasked.min() < 0 or unmasked.max() >= cfg.vocab):
        raise PipelineError("unmasked position carries an out-of-range token")
    model.eval()
    for pos in np.flatnonzero(flat_mask):
        logits = next_logits(flat[:pos], model)
        flat[pos] = sample_from_logits(logits, s)
    return flat.reshape(partial.shape)


def train_lt(upstream_tokens: Sequence[np.ndarray], cfg: StageConfig, rng: SeededRng,
             lt_cfg: Optional[LtConfig] = None) -> Checkpoint:
    """Cross-entropy next-index training on raster-flattened upstream grids."""
    if not len(upstream_tokens):
        raise PipelineError("train_lt: no token grids")
    shapes = {np.asarray(g).shape for g in upstream_tokens}
    if len(shapes) != 1:
        raise PipelineError(f"train_lt: grids must share one shape, got {sorted(shapes)}")
    seqs = np.stack([flatten_grid(g) for g in upstream_tokens])
    lt_cfg = lt_cfg or LtConfig(context=seqs.shape[1])
    if seqs.shape[1] != lt_cfg.context:
        raise PipelineError(f"grid area {seqs.shape[1]} != configured context {lt_cfg.context}")
    if seqs.max() >= lt_cfg.vocab or seqs.min() < 0:
        raise PipelineError("train_lt: token outside vocabulary")

    model = build_lt_model(lt_cfg, rng.derive("init"))
    digest = config_digest({"stage": cfg, "lt": lt_cfg})
    opt = build_optimizer(model.parameters(), cfg.optimizer, cfg.lr_schedule.initial)
    data = torch.from_numpy(seqs)
    losses: list[float] = []
    model.train()
    for step, idx in enumerate(batch_indices(len(seqs), cfg.batch_size, cfg.steps,
                                             rng.derive("batches"))):
        set_lr(opt, cfg.lr_schedule.lr_at(step, cfg.steps))
        batch = data[torch.from_numpy(np.ascontiguousarray(idx))]
        logits = model(batch[:, :-1])
        loss = F.cross_entropy(logits.reshape(-1, lt_cfg.vocab), batch.reshape(-1))
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"train_lt: non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    model.eval()
    arch = {k: getattr(lt_cfg, k) for k in ("n_layers", "n_heads", "dim", "context",
                                            "vocab", "mlp_ratio")}
    extra = {"arch": arch, "loss_first": losses[0] if losses else None,
             "loss_last": losses[-1] if losses else None}
    return checkpoint_from_module(model, "lt", rng.seed, digest, extra)
