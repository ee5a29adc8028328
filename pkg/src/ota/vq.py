"""Vector-quantized autoencoder: encoder, decoder, codebook, and re-representation.

Images are mapped to h×w grids of codebook indices ("token grids", int64 arrays with
values in [0, n_codes)), and back. Training uses the plain VQ objective

    lambda_rec·||x − D(q)||² + ||sg[E(x)] − z_q||² + beta_commit·||E(x) − sg[z_q]||²

with the straight-through estimator carrying decoder gradients to the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (Checkpoint, DatasetManifest, ImageRecord, PipelineError, Provenance,
                   SeededRng, StageConfig, TrainingDivergedError, config_digest)
from .torch_utils import (batch_indices, build_optimizer, checkpoint_from_module,
                          init_module_params, load_params_into, set_lr, stack_pixels)


@dataclass(frozen=True)
class VqConfig:
    image_hw: int = 32
    channels: int = 3
    stride: int = 4          # total spatial downsampling, power of two
    hidden: int = 64
    n_codes: int = 256
    code_dim: int = 16
    beta_commit: float = 0.25
    lambda_rec: float = 1.0

    def __post_init__(self) -> None:
        if self.stride < 1 or (self.stride & (self.stride - 1)) != 0:
            raise PipelineError(f"stride must be a power of two, got {self.stride}")
        if self.image_hw % self.stride != 0:
            raise PipelineError(f"image_hw {self.image_hw} not divisible by stride {self.stride}")

    @property
    def grid_hw(self) -> int:
        return self.image_hw // self.stride


@dataclass
class Codebook:
    """|Z| learnable codewords of width code_dim."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        self.entries = np.asarray(self.entries)
        if self.entries.ndim != 2:
            raise PipelineError(f"codebook must be 2-D, got shape {self.entries.shape}")
        if not np.isfinite(self.entries).all():
            raise PipelineError("codebook contains non-finite entries")

    @property
    def n_codes(self) -> int:
        return self.entries.shape[0]

    @property
    def code_dim(self) -> int:
        return self.entries.shape[1]


class _Encoder(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(cfg.channels, cfg.hidden, 3, padding=1), nn.ReLU()]
        for _ in range(int(math.log2(cfg.stride))):
            layers += [nn.Conv2d(cfg.hidden, cfg.hidden, 4, stride=2, padding=1), nn.ReLU()]
        layers += [nn.Conv2d(cfg.hidden, cfg.hidden, 3, padding=1), nn.ReLU(),
                   nn.Conv2d(cfg.hidden, cfg.code_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(cfg.code_dim, cfg.hidden, 3, padding=1), nn.ReLU()]
        for _ in range(int(math.log2(cfg.stride))):
            layers += [nn.ConvTranspose2d(cfg.hidden, cfg.hidden, 4, stride=2, padding=1), nn.ReLU()]
        layers += [nn.Conv2d(cfg.hidden, cfg.channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(z))


class VqModel(nn.Module):
    """Encoder + decoder + codebook; the trainable parameter bundle."""

    def __init__(self, cfg: VqConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = _Encoder(cfg)
        self.decoder = _Decoder(cfg)
        self.codebook = nn.Embedding(cfg.n_codes, cfg.code_dim)

    def codebook_view(self) -> Codebook:
        return Codebook(self.codebook.weight.detach().cpu().numpy().copy())


def build_vq_model(cfg: VqConfig, rng: Optional[SeededRng] = None) -> VqModel:
    model = VqModel(cfg)
    if rng is not None:
        init_module_params(model, rng)
        with torch.no_grad():
            # distinct entries are required for deterministic nearest-neighbor ties
            w = model.codebook.weight
            while torch.unique(w, dim=0).shape[0] != w.shape[0]:  # pragma: no cover
                w.add_(torch.randn(w.shape, generator=rng.torch_generator()) * 1e-6)
    return model


def vq_model_from_checkpoint(ckpt: Checkpoint) -> VqModel:
    arch = ckpt.meta.extra.get("arch")
    if arch is None:
        raise PipelineError("checkpoint has no vq architecture metadata")
    model = build_vq_model(VqConfig(**arch))
    load_params_into(model, ckpt.params)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Functional ops
# ---------------------------------------------------------------------------

def encode(pixels: np.ndarray, model: VqModel) -> np.ndarray:
    """Map an H×W×C image to its h×w×code_dim latent grid."""
    cfg = model.cfg
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.shape != (cfg.image_hw, cfg.image_hw, cfg.channels):
        raise PipelineError(
            f"encode: expected shape {(cfg.image_hw, cfg.image_hw, cfg.channels)}, got {pixels.shape}"
        )
    with torch.no_grad():
        x = torch.from_numpy(pixels.transpose(2, 0, 1)).unsqueeze(0)
        z = model.encoder(x)[0]  # (D, h, w)
    return z.permute(1, 2, 0).numpy()


def quantize(latents: np.ndarray, codebook: Union[Codebook, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-codeword assignment per cell; ties resolve to the lowest index.

    Returns (tokens h×w int64, quantized latents h×w×code_dim float32).
    """
    entries = codebook.entries if isinstance(codebook, Codebook) else np.asarray(codebook)
    latents = np.asarray(latents)
    if latents.ndim != 3 or latents.shape[-1] != entries.shape[1]:
        raise PipelineError(
            f"quantize: latent width {latents.shape} does not match codebook width {entries.shape[1]}"
        )
    if not np.isfinite(latents).all():
        raise PipelineError("quantize: non-finite latents")
    lat64 = latents.astype(np.float64)
    diff = lat64[:, :, None, :] - entries.astype(np.float64)[None, None, :, :]
    dist = np.einsum("hwkd,hwkd->hwk", diff, diff)
    tokens = np.argmin(dist, axis=-1).astype(np.int64)
    quantized = entries[tokens].astype(np.float32)
    return tokens, quantized


def decode(tokens: np.ndarray, model: VqModel) -> np.ndarray:
    """Map an h×w token grid back to an H×W×C image in [0, 1]."""
    cfg = model.cfg
    tokens = np.asarray(tokens)
    hw = cfg.grid_hw
    if tokens.shape != (hw, hw):
        raise PipelineError(f"decode: expected token grid {(hw, hw)}, got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= cfg.n_codes:
        raise PipelineError(
            f"decode: token out of range [0, {cfg.n_codes}): {int(tokens.min())}..{int(tokens.max())}"
        )
    with torch.no_grad():
        idx = torch.from_numpy(tokens.astype(np.int64))
        z_q = model.codebook(idx).permute(2, 0, 1).unsqueeze(0)  # (1, D, h, w)
        img = model.decoder(z_q)[0]
    return img.permute(1, 2, 0).numpy()


def reconstruct(pixels: np.ndarray, model: VqModel) -> np.ndarray:
    """decode(quantize(encode(x))) with this model's codebook."""
    latents = encode(pixels, model)
    tokens, _ = quantize(latents, model.codebook_view())
    return decode(tokens, model)


def tokenize(pixels: np.ndarray, model: VqModel) -> np.ndarray:
    tokens, _ = quantize(encode(pixels, model), model.codebook_view())
    return tokens


def rerepresent(d: DatasetManifest, model: VqModel) -> DatasetManifest:
    """Pass every record through encode→quantize→decode; labels, ids, order preserved."""
    records = []
    for rec in d.records:
        pixels = reconstruct(rec.pixels, model)
        records.append(ImageRecord(pixels=pixels, label=rec.label, id=rec.id,
                                   source_id=rec.source_id))
    return DatasetManifest(records=records, num_classes=d.num_classes,
                           provenance=Provenance.RE_REPRESENTED, source_seed=d.source_seed)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _quantize_torch(z: torch.Tensor, codebook: nn.Embedding) -> tuple[torch.Tensor, torch.Tensor]:
    """In-graph nearest-neighbor lookup. z: (B, D, h, w) → (indices B·h·w, z_q like z)."""
    b, d, h, w = z.shape
    flat = z.permute(0, 2, 3, 1).reshape(-1, d)
    diff = flat.double().unsqueeze(1) - codebook.weight.double().unsqueeze(0)
    dist = (diff * diff).sum(-1)
    indices = torch.argmin(dist, dim=1)  # first minimum on ties
    z_q = codebook(indices).view(b, h, w, d).permute(0, 3, 1, 2)
    return indices, z_q


def vq_training_losses(model: VqModel, x: torch.Tensor) -> dict[str, torch.Tensor]:
    """Per-batch loss terms plus intermediate tensors for gradient diagnostics."""
    cfg = model.cfg
    z = model.encoder(x)
    indices, z_q = _quantize_torch(z, model.codebook)
    z_st = z + (z_q - z).detach()  # straight-through estimator
    x_hat = model.decoder(z_st)
    rec = F.mse_loss(x_hat, x)
    codebook_loss = F.mse_loss(z_q, z.detach())
    commit = F.mse_loss(z, z_q.detach())
    total = cfg.lambda_rec * rec + codebook_loss + cfg.beta_commit * commit
    return {"total": total, "rec": rec, "codebook": codebook_loss, "commit": commit,
            "z": z, "z_st": z_st, "indices": indices}


def train_vq(upstream: DatasetManifest, cfg: StageConfig, rng: SeededRng,
             vq_cfg: Optional[VqConfig] = None) -> Checkpoint:
    """Train the tokenizer on upstream data; returns a checkpoint of all parameters.

    Codebook entries unused for one full pass over the data are re-seeded to
    random encoder outputs to avoid collapse at small scale.
    """
    if not upstream.records:
        raise PipelineError("train_vq: empty upstream dataset")
    vq_cfg = vq_cfg or VqConfig()
    model = build_vq_model(vq_cfg, rng.derive("init"))
    digest = config_digest({"stage": cfg, "vq": vq_cfg})

    n = len(upstream.records)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    opt = build_optimizer(model.parameters(), cfg.optimizer, cfg.lr_schedule.initial)
    data_rng = rng.derive("batches")
    reseed_rng = rng.derive("reseed")

    usage = np.zeros(vq_cfg.n_codes, dtype=np.int64)
    last_latents: Optional[torch.Tensor] = None
    losses: list[float] = []
    model.train()
    for step, idx in enumerate(batch_indices(n, cfg.batch_size, cfg.steps, data_rng)):
        set_lr(opt, cfg.lr_schedule.lr_at(step, cfg.steps))
        x = stack_pixels(upstream.records, idx)
        out = vq_training_losses(model, x)
        loss = out["total"]
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"train_vq: non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        losses.append(float(loss.detach()))
        np.add.at(usage, out["indices"].numpy(), 1)
        last_latents = out["z"].detach()
        if (step + 1) % steps_per_epoch == 0:
            _reseed_dead_codes(model, usage, last_latents, reseed_rng)
            usage[:] = 0

    model.eval()
    arch = {k: getattr(vq_cfg, k) for k in ("image_hw", "channels", "stride", "hidden",
                                            "n_codes", "code_dim", "beta_commit", "lambda_rec")}
    extra = {"arch": arch, "loss_first": losses[0] if losses else None,
             "loss_last": losses[-1] if losses else None}
    return checkpoint_from_module(model, "vq", rng.seed, digest, extra)


def _reseed_dead_codes(model: VqModel, usage: np.ndarray, latents: Optional[torch.Tensor],
                       rng: SeededRng) -> None:
    dead = np.flatnonzero(usage == 0)
    if dead.size == 0 or latents is None:
        return
    flat = latents.permute(0, 2, 3, 1).reshape(-1, latents.shape[1])
    picks = rng.choice(flat.shape[0], size=min(dead.size, flat.shape[0]), replace=False)
    with torch.no_grad():
        for code, src in zip(dead[: picks.size], picks):
            model.codebook.weight[int(code)] = flat[int(src)]
