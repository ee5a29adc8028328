import numpy as np
import pytest

from ota.core import (LrSchedule, OptimizerConfig, Provenance, SeededRng, StageConfig,
                      DatasetManifest, ImageRecord)
from ota.synth import make_two_domain_task


def adam_stage(steps: int, batch_size: int = 16, lr: float = 2e-3) -> StageConfig:
    return StageConfig(steps=steps, batch_size=batch_size,
                       optimizer=OptimizerConfig(kind="adam", weight_decay=0.0),
                       lr_schedule=LrSchedule(initial=lr, milestones=(), decay=1.0))


def sgd_stage(steps: int, batch_size: int = 16, lr: float = 0.02, **kwargs) -> StageConfig:
    return StageConfig(steps=steps, batch_size=batch_size,
                       lr_schedule=LrSchedule(initial=lr), **kwargs)


@pytest.fixture
def rng():
    return SeededRng(123)


@pytest.fixture(scope="session")
def tiny_domains():
    return make_two_domain_task(seed=123, n_upstream=48, n_downstream=32, hw=32)


@pytest.fixture(scope="session")
def upstream(tiny_domains):
    return tiny_domains[0]


@pytest.fixture(scope="session")
def downstream(tiny_domains):
    return tiny_domains[1]


def constant_dataset(n: int, label: int, num_classes: int, hw: int = 32,
                     seed: int = 5, provenance=Provenance.ORIGINAL) -> DatasetManifest:
    """n noisy single-class images, useful for degenerate training checks."""
    gen = SeededRng(seed, f"const{label}")
    records = [
        ImageRecord(pixels=np.clip(gen.normal(0.5, 0.1, size=(hw, hw, 3)), 0, 1),
                    label=label, id=f"c{label}_{i}")
        for i in range(n)
    ]
    return DatasetManifest(records=records, num_classes=num_classes, provenance=provenance)
