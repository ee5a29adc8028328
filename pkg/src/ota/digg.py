"""Downstream-image-guided generation: mask token grids, complete them, decode.

Masks are token-aligned. Each (source image, variant) pair owns a derived rng
stream, so corpora are bit-identical whether variants are generated serially or
in parallel, and across reruns with the same master seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .core import (ConfigError, DatasetManifest, ImageRecord, PipelineError, Provenance,
                   SeededRng)
from .lt import LatentTransformer, SamplingParams, complete_tokens
from .vq import VqModel, decode, tokenize

MASK_SCHEMES = ("bottom_half", "top_half", "random_rows", "random_block", "none")


@dataclass(frozen=True)
class MaskSpec:
    """Token-mask pattern. `ratio` applies to the randomized schemes only.

    Cell-level scattered masks are not supported: the next-index model fills
    positions in raster order, so masked regions are whole rows or contiguous
    raster runs.
    """

    scheme: str = "bottom_half"
    ratio: float = 0.5

    def __post_init__(self) -> None:
        if self.scheme not in MASK_SCHEMES:
            raise ConfigError(
                f"unknown mask scheme {self.scheme!r}; arbitrary scattered masks are "
                f"unsupported, choose one of {MASK_SCHEMES}"
            )
        if self.scheme in ("random_rows", "random_block") and not (0.0 < self.ratio < 1.0):
            raise ConfigError(f"ratio must be in (0, 1) for {self.scheme}, got {self.ratio}")


@dataclass
class PseudoImage:
    pixels: np.ndarray
    source_id: str
    mask_used: MaskSpec
    variant_index: int
    tokens: Optional[np.ndarray] = None   # completed grid, for lineage audits
    mask: Optional[np.ndarray] = None


def make_mask(shape: tuple[int, int], spec: MaskSpec, rng: SeededRng) -> np.ndarray:
    """Boolean h×w grid, True = masked; deterministic given rng."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    if spec.scheme == "none":
        return mask
    if spec.scheme == "bottom_half":
        mask[h // 2 :, :] = True
        return mask
    if spec.scheme == "top_half":
        mask[: h // 2, :] = True
        return mask
    cells = int(math.floor(spec.ratio * h * w))
    if spec.scheme == "random_rows":
        rows = cells // w
        if rows < 1:
            raise ConfigError(f"ratio {spec.ratio} too small to mask a whole row of {w}")
        chosen = rng.choice(h, size=rows, replace=False)
        mask[np.sort(chosen), :] = True
        return mask
    # random_block: one contiguous raster run of `cells` positions
    if cells < 1:
        raise ConfigError(f"ratio {spec.ratio} too small to mask any cell")
    start = int(rng.integers(0, h * w - cells + 1))
    flat = mask.reshape(-1)
    flat[start : start + cells] = True
    return mask


def _one_variant(source_id: str, tokens: np.ndarray, variant: int, vq_model: VqModel,
                 lt_model: LatentTransformer, spec: MaskSpec, sampling: SamplingParams,
                 rng: SeededRng) -> PseudoImage:
    stream = rng.derive(f"{source_id}/{variant}")
    mask = make_mask(tokens.shape, spec, stream.derive("mask"))
    params = SamplingParams(rng=stream.derive("sample"),
                            temperature=sampling.temperature, top_k=sampling.top_k)
    completed = complete_tokens(tokens, mask, lt_model, params)
    return PseudoImage(pixels=decode(completed, vq_model), source_id=source_id,
                       mask_used=spec, variant_index=variant, tokens=completed, mask=mask)


def generate_pseudo(x: ImageRecord, n_variants: int, vq_model: VqModel,
                    lt_model: LatentTransformer, spec: MaskSpec, sampling: SamplingParams,
                    rng: SeededRng) -> list[PseudoImage]:
    """n_variants completions of x's token grid under the mask spec.

    The unmasked token region of every variant equals the source grid exactly;
    only masked positions are re-drawn.
    """
    if n_variants == 0:
        return []
    tokens = tokenize(x.pixels, vq_model)
    return [_one_variant(x.id, tokens, v, vq_model, lt_model, spec, sampling, rng)
            for v in range(n_variants)]


def build_distill_set(d: DatasetManifest, target_count: int, vq_model: VqModel,
                      lt_model: LatentTransformer, spec: MaskSpec, sampling: SamplingParams,
                      rng: SeededRng, jobs: int = 1) -> DatasetManifest:
    """Exactly target_count pseudo-images cycling variant-major over the sources.

    Each (source, variant) pair draws from its own derived stream, so the corpus
    is identical for any `jobs` and across reruns with the same master seed.
    """
    if not d.records:
        raise PipelineError("build_distill_set: empty source dataset")
    if target_count < len(d.records):
        raise ConfigError(
            f"target_count {target_count} < |sources| {len(d.records)}; every source "
            "contributes at least one variant"
        )
    n_variants = math.ceil(target_count / len(d.records))
    token_cache = {rec.id: tokenize(rec.pixels, vq_model) for rec in d.records}
    tasks = [(rec, v) for v in range(n_variants) for rec in d.records][:target_count]

    def make(task: tuple[ImageRecord, int]) -> ImageRecord:
        rec, v = task
        pseudo = _one_variant(rec.id, token_cache[rec.id], v, vq_model, lt_model,
                              spec, sampling, rng)
        return ImageRecord(pixels=pseudo.pixels, label=None,
                           id=f"pseudo_{rec.id}_v{v}", source_id=rec.id)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(make, tasks))
    else:
        records = [make(task) for task in tasks]
    return DatasetManifest(records=records, num_classes=d.num_classes,
                           provenance=Provenance.PSEUDO, source_seed=rng.seed)


def contact_sheet(sources: list[ImageRecord], corpus: DatasetManifest, path,
                  max_rows: int = 8, max_variants: int = 6) -> None:
    """Grid preview: original image in the left column, its variants to the right."""
    by_source: dict[str, list[ImageRecord]] = {}
    for rec in corpus.records:
        if rec.source_id is not None:
            by_source.setdefault(rec.source_id, []).append(rec)
    rows = [s for s in sources if s.id in by_source][:max_rows]
    if not rows:
        raise PipelineError("no corpus records match the given sources")
    hw = rows[0].pixels.shape[0]
    n_cols = 1 + min(max_variants, max(len(by_source[s.id]) for s in rows))
    sheet = Image.new("RGB", (n_cols * hw, len(rows) * hw), (255, 255, 255))

    def paste(pixels: np.ndarray, col: int, row: int) -> None:
        arr = (np.clip(pixels, 0, 1) * 255).astype(np.uint8)
        sheet.paste(Image.fromarray(arr), (col * hw, row * hw))

    for r, src in enumerate(rows):
        paste(src.pixels, 0, r)
        for c, var in enumerate(by_source[src.id][: n_cols - 1], start=1):
            paste(var.pixels, c, r)
    sheet.save(path)
