"""Feature extraction, Fréchet dataset distance, and top-1 accuracy.

The FD score fits a Gaussian to each feature bag and reports

    ||mu_a − mu_b||² + Tr(Sigma_a + Sigma_b − 2·(Sigma_a Sigma_b)^{1/2})

with covariances regularized by eps·I before the matrix square root. Lower
means the two datasets look more alike to the extractor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import Checkpoint, DatasetManifest, PipelineError, ProvenanceError
from .irf import TaskModel, prepare_batch, task_model_from_checkpoint
from .torch_utils import stack_pixels


@dataclass
class FeatureBag:
    features: np.ndarray  # (N, d) float64
    extractor_id: str

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise PipelineError(f"features must be N×d, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise PipelineError("non-finite feature values")

    @property
    def degenerate(self) -> bool:
        """Too few rows for a full-rank covariance estimate."""
        n, d = self.features.shape
        return n < d + 1


@dataclass
class FdResult:
    value: float
    mu_a: np.ndarray
    mu_b: np.ndarray
    trace_term: float


def extract_features(model_ckpt: Checkpoint, d: DatasetManifest,
                     batch_size: int = 64) -> FeatureBag:
    """Pooled backbone features for every record, in manifest order."""
    if not d.records:
        raise PipelineError("cannot extract features from an empty dataset")
    model = task_model_from_checkpoint(model_ckpt)
    return features_of(model, d, extractor_id=model_ckpt.meta.stage_name,
                       batch_size=batch_size)


def features_of(model: TaskModel, d: DatasetManifest, extractor_id: str = "backbone",
                batch_size: int = 64) -> FeatureBag:
    hw = model.backbone_cfg.image_hw
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(d.records), batch_size):
            recs = d.records[start : start + batch_size]
            x = prepare_batch(stack_pixels(recs), hw, hw)
            rows.append(model.features(x).numpy())
    return FeatureBag(features=np.concatenate(rows, axis=0), extractor_id=extractor_id)


def _gaussian_fit(bag: FeatureBag, eps: float) -> tuple[np.ndarray, np.ndarray]:
    x = bag.features
    mu = x.mean(axis=0)
    sigma = np.atleast_2d(np.cov(x, rowvar=False))
    return mu, sigma + eps * np.eye(sigma.shape[0])


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fd_score(a: FeatureBag, b: FeatureBag, eps: float = 1e-6) -> FdResult:
    """Fréchet distance between Gaussians fit to the two bags; symmetric, ≥ −tolerance."""
    if a.features.shape[1] != b.features.shape[1]:
        raise PipelineError(
            f"feature dimension mismatch: {a.features.shape[1]} vs {b.features.shape[1]}"
        )
    mu_a, sig_a = _gaussian_fit(a, eps)
    mu_b, sig_b = _gaussian_fit(b, eps)
    sqrt_a = _sym_sqrt(sig_a)
    inner = _sym_sqrt(sqrt_a @ sig_b @ sqrt_a)
    trace_term = float(np.trace(sig_a) + np.trace(sig_b) - 2.0 * np.trace(inner))
    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    return FdResult(value=mean_term + trace_term, mu_a=mu_a, mu_b=mu_b, trace_term=trace_term)


def top1_accuracy(model_ckpt: Checkpoint, d: DatasetManifest) -> float:
    """Fraction of records classified correctly; argmax ties break to the lowest class."""
    if not d.labeled:
        raise ProvenanceError("top-1 accuracy needs labels; pseudo data is unlabeled")
    from .irf import evaluate_top1

    return evaluate_top1(task_model_from_checkpoint(model_ckpt), d)


def save_feature_bag(bag: FeatureBag, path) -> None:
    np.savez(path, features=bag.features, extractor_id=np.asarray(bag.extractor_id))


def load_feature_bag(path) -> FeatureBag:
    data = np.load(path, allow_pickle=False)
    return FeatureBag(features=data["features"], extractor_id=str(data["extractor_id"]))


def fd_bar_chart(values: dict[str, float], path, title: str = "FD score") -> None:
    """Bar chart comparing FD values across dataset pairings."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = list(values)
    ax.bar(names, [values[n] for n in names], color=["#3b6ea5", "#d08a2e"][: len(names)] or None)
    ax.set_ylabel("FD score")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
