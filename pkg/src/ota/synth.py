"""Procedural two-domain shapes data for desk-scale experiments.

Both domains share shape classes (square, disk, triangle, cross) but use
different color palettes, giving a controllable domain gap between an
"upstream" corpus and a "downstream" task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DatasetManifest, ImageRecord, Provenance, SeededRng

SHAPE_NAMES = ("square", "disk", "triangle", "cross")


@dataclass(frozen=True)
class Palette:
    bg: tuple[float, float, float]
    fg: tuple[float, float, float]
    jitter: float = 0.06


# Upstream: amber shapes on deep blue, wide per-image jitter. Downstream sits
# halfway toward a green/magenta palette with narrow jitter: a clear low-level
# shift that a tokenizer trained on upstream can still reconstruct sensibly.
PALETTE_UPSTREAM = Palette(bg=(0.10, 0.15, 0.50), fg=(0.95, 0.75, 0.20), jitter=0.10)
PALETTE_DOWNSTREAM = Palette(bg=(0.09, 0.30, 0.31), fg=(0.90, 0.45, 0.45), jitter=0.05)


def _shape_mask(kind: int, hw: int, cx: float, cy: float, r: float) -> np.ndarray:
    ys, xs = np.mgrid[0:hw, 0:hw].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if kind == 0:  # square
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == 1:  # disk
        return dx * dx + dy * dy <= r * r
    if kind == 2:  # triangle (upward)
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == 3:  # cross
        bar = r / 2.5
        return ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | ((np.abs(dy) <= bar) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape kind {kind}")


def render_shape(kind: int, hw: int, palette: Palette, rng: SeededRng) -> np.ndarray:
    cx = rng.uniform(hw * 0.3, hw * 0.7)
    cy = rng.uniform(hw * 0.3, hw * 0.7)
    r = rng.uniform(hw * 0.18, hw * 0.32)
    mask = _shape_mask(kind, hw, cx, cy, r)

    img = np.empty((hw, hw, 3), dtype=np.float64)
    bg = np.array(palette.bg) + rng.uniform(-palette.jitter, palette.jitter, size=3)
    fg = np.array(palette.fg) + rng.uniform(-palette.jitter, palette.jitter, size=3)
    img[:] = bg
    img[mask] = fg
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_shapes_dataset(n: int, hw: int, palette: Palette, rng: SeededRng,
                        num_classes: int = 4, id_prefix: str = "img") -> DatasetManifest:
    """n labeled shape images with the given palette; classes are shape kinds."""
    records = []
    for i in range(n):
        kind = i % num_classes
        rec_rng = rng.derive(f"{id_prefix}_{i}")
        pixels = render_shape(kind, hw, palette, rec_rng)
        records.append(ImageRecord(pixels=pixels, label=kind, id=f"{id_prefix}_{i:05d}"))
    return DatasetManifest(records=records, num_classes=num_classes,
                           provenance=Provenance.ORIGINAL, source_seed=rng.seed)


def make_two_domain_task(seed: int, n_upstream: int, n_downstream: int, hw: int = 32,
                         num_classes: int = 4) -> tuple[DatasetManifest, DatasetManifest]:
    """Upstream/downstream pair sharing classes but differing in palette."""
    rng = SeededRng(seed, "synth")
    upstream = make_shapes_dataset(n_upstream, hw, PALETTE_UPSTREAM,
                                   rng.derive("up"), num_classes, id_prefix="up")
    downstream = make_shapes_dataset(n_downstream, hw, PALETTE_DOWNSTREAM,
                                     rng.derive("down"), num_classes, id_prefix="down")
    return upstream, downstream
