"""Shared data model: image records, dataset manifests, seeded RNG, checkpoints, stage configs.

Dataset layout on disk:
    <root>/images/*.png
    <root>/manifest.tsv     header: id<TAB>path<TAB>label[<TAB>source_id]
    <root>/dataset.json     {"num_classes": int, "provenance": str, "source_seed": int|null}

Checkpoint container (single file): a ZIP archive holding one ``params/<name>.npy``
entry per array, a ``meta.json`` record, and a ``digest`` entry with the SHA-256 of
all payload bytes. Loading recomputes the digest and fails on any mismatch.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from PIL import Image


class PipelineError(Exception):
    """Base class for errors raised by this package."""


class DatasetError(PipelineError):
    """Missing files, malformed manifests, or invalid records."""


class CheckpointIntegrityError(PipelineError):
    """Checkpoint archive is corrupt or its digest does not match."""


class ProvenanceError(PipelineError):
    """A stage received data with a provenance it must not consume."""


class ConfigError(PipelineError):
    """Invalid or inconsistent configuration."""


class TrainingDivergedError(PipelineError):
    """A training loss became non-finite."""


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

class SeededRng:
    """Deterministic random stream identified by (seed, stream_id).

    Identical (seed, stream_id) pairs produce identical draw sequences across
    runs; child streams derived via :meth:`derive` are independent of the
    parent's draw position, so parallel and serial schedules agree.
    """

    def __init__(self, seed: int, stream_id: str = "root"):
        self.seed = int(seed)
        self.stream_id = stream_id
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF]
        digest = hashlib.sha256(stream_id.encode("utf-8")).digest()
        entropy.extend(int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id!r})"

    def derive(self, child_id: str) -> "SeededRng":
        """New independent stream; does not consume draws from this one."""
        return SeededRng(self.seed, f"{self.stream_id}/{child_id}")

    def integers(self, low: int, high: Optional[int] = None, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def torch_seed(self) -> int:
        """63-bit seed for a torch.Generator; a pure function of (seed, stream_id)."""
        digest = hashlib.sha256(f"{self.seed}|{self.stream_id}|torch".encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF

    def torch_generator(self):
        import torch

        gen = torch.Generator()
        gen.manual_seed(self.torch_seed())
        return gen


# ---------------------------------------------------------------------------
# Records and manifests
# ---------------------------------------------------------------------------

class Provenance(str, Enum):
    ORIGINAL = "original"
    RE_REPRESENTED = "re_represented"
    PSEUDO = "pseudo"


@dataclass(eq=False)
class ImageRecord:
    """One image with pixels in [0, 1], shape (H, W, C) float32."""

    pixels: np.ndarray
    label: Optional[int]
    id: str
    source_id: Optional[str] = None

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise DatasetError(f"record {self.id!r}: pixels must be H×W×C, got shape {self.pixels.shape}")
        if self.label is not None:
            self.label = int(self.label)
            if self.label < 0:
                raise DatasetError(f"record {self.id!r}: negative label {self.label}")


@dataclass(eq=False)
class DatasetManifest:
    """Ordered set of records plus provenance; immutable by convention after construction."""

    records: list[ImageRecord]
    num_classes: int
    provenance: Provenance = Provenance.ORIGINAL
    source_seed: Optional[int] = None

    def __post_init__(self) -> None:
        self.provenance = Provenance(self.provenance)
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate record ids: {dupes[:5]}")
        for r in self.records:
            if r.label is None:
                if self.provenance is not Provenance.PSEUDO:
                    raise DatasetError(f"record {r.id!r}: missing label in {self.provenance.value} dataset")
            elif r.label >= self.num_classes:
                raise DatasetError(
                    f"record {r.id!r}: label {r.label} >= num_classes {self.num_classes}"
                )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labeled(self) -> bool:
        return all(r.label is not None for r in self.records)

    def image_shape(self) -> tuple[int, int, int]:
        if not self.records:
            raise DatasetError("empty dataset has no image shape")
        return tuple(self.records[0].pixels.shape)  # type: ignore[return-value]

    def replace(self, **kwargs) -> "DatasetManifest":
        args = dict(records=self.records, num_classes=self.num_classes,
                    provenance=self.provenance, source_seed=self.source_seed)
        args.update(kwargs)
        return DatasetManifest(**args)


def load_image(path: Path) -> np.ndarray:
    """Read an image file into a float32 H×W×C array in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(pixels: np.ndarray, path: Path) -> None:
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_dataset(root: Path | str, manifest_file: Optional[Path | str] = None) -> DatasetManifest:
    """Load the on-disk layout into a DatasetManifest, records in manifest-file order."""
    root = Path(root)
    manifest_path = Path(manifest_file) if manifest_file is not None else root / "manifest.tsv"
    if not manifest_path.exists():
        raise DatasetError(f"manifest file not found: {manifest_path}")

    lines = manifest_path.read_text().splitlines()
    if not lines:
        raise DatasetError(f"empty manifest: {manifest_path}")
    header = lines[0].split("\t")
    if header[:3] != ["id", "path", "label"]:
        raise DatasetError(f"bad manifest header {header!r}, expected id/path/label")
    has_source = len(header) > 3 and header[3] == "source_id"

    meta = {}
    meta_path = root / "dataset.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())

    records: list[ImageRecord] = []
    max_label = -1
    for line in lines[1:]:
        if not line.strip():
            continue
        cols = line.split("\t")
        rec_id, rel_path, label_str = cols[0], cols[1], cols[2]
        source_id = cols[3] if has_source and len(cols) > 3 and cols[3] else None
        img_path = root / rel_path
        if not img_path.exists():
            raise DatasetError(f"record {rec_id!r}: image file missing: {rel_path}")
        label = int(label_str) if label_str != "" else None
        if label is not None:
            max_label = max(max_label, label)
        records.append(ImageRecord(pixels=load_image(img_path), label=label, id=rec_id, source_id=source_id))

    num_classes = int(meta.get("num_classes", max_label + 1))
    provenance = Provenance(meta.get("provenance", "original"))
    source_seed = meta.get("source_seed")
    return DatasetManifest(records=records, num_classes=num_classes,
                           provenance=provenance, source_seed=source_seed)


def save_dataset(manifest: DatasetManifest, root: Path | str) -> Path:
    """Write a DatasetManifest to the documented on-disk layout; returns the root."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    has_source = any(r.source_id is not None for r in manifest.records)
    header = "id\tpath\tlabel" + ("\tsource_id" if has_source else "")
    rows = [header]
    for rec in manifest.records:
        rel = f"images/{rec.id}.png"
        save_image(rec.pixels, root / rel)
        label = "" if rec.label is None else str(rec.label)
        row = f"{rec.id}\t{rel}\t{label}"
        if has_source:
            row += "\t" + (rec.source_id or "")
        rows.append(row)
    (root / "manifest.tsv").write_text("\n".join(rows) + "\n")
    (root / "dataset.json").write_text(json.dumps({
        "num_classes": manifest.num_classes,
        "provenance": manifest.provenance.value,
        "source_seed": manifest.source_seed,
    }, indent=2) + "\n")
    return root


def sample_few_data(d: DatasetManifest, fraction: float, rng: SeededRng,
                    stratified: bool = False) -> DatasetManifest:
    """Uniformly sample ceil(fraction·N) records without replacement, preserving order.

    With ``stratified=True`` the draw is per-class proportional instead of uniform
    over records.
    """
    if not d.records:
        raise DatasetError("cannot sample from an empty dataset")
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = len(d.records)
    k = math.ceil(fraction * n)
    if fraction == 1.0:
        return d.replace(records=list(d.records), source_seed=rng.seed)

    if stratified:
        by_class: dict[Optional[int], list[int]] = {}
        for i, rec in enumerate(d.records):
            by_class.setdefault(rec.label, []).append(i)
        chosen: list[int] = []
        for label in sorted(by_class, key=lambda x: (x is None, x)):
            idxs = by_class[label]
            kc = max(1, round(fraction * len(idxs)))
            picked = rng.choice(len(idxs), size=min(kc, len(idxs)), replace=False)
            chosen.extend(idxs[j] for j in picked)
        chosen = sorted(chosen)[:k] if len(chosen) > k else sorted(chosen)
    else:
        chosen = sorted(rng.choice(n, size=k, replace=False).tolist())

    records = [d.records[i] for i in chosen]
    return d.replace(records=records, source_seed=rng.seed)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class CheckpointMeta:
    stage_name: str
    seed: int
    config_digest: str
    created_at: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.created_at:
            self.created_at = datetime.now(timezone.utc).isoformat()


@dataclass
class Checkpoint:
    """Named-parameter archive plus metadata for one model artifact."""

    params: dict[str, np.ndarray]
    meta: CheckpointMeta

    def checksum(self) -> str:
        """SHA-256 over parameter names and raw bytes; detects any single-ULP change."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name])
            h.update(name.encode("utf-8"))
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def _payload_digest(entries: Sequence[tuple[str, bytes]]) -> str:
    h = hashlib.sha256()
    for name, data in sorted(entries):
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(data)
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries: list[tuple[str, bytes]] = []
    for name, arr in ckpt.params.items():
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
        entries.append((f"params/{name}.npy", buf.getvalue()))
    meta_bytes = json.dumps(dataclasses.asdict(ckpt.meta), sort_keys=True).encode("utf-8")
    entries.append(("meta.json", meta_bytes))
    digest = _payload_digest(entries)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in entries:
            zf.writestr(name, data)
        zf.writestr("digest", digest)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path, "r") as zf:
            names = zf.namelist()
            entries = [(n, zf.read(n)) for n in names if n != "digest"]
            stored = zf.read("digest").decode("ascii")
    except (zipfile.BadZipFile, KeyError, OSError, EOFError) as exc:
        raise CheckpointIntegrityError(f"unreadable checkpoint archive {path}: {exc}") from exc
    if _payload_digest(entries) != stored:
        raise CheckpointIntegrityError(f"digest mismatch in {path}")
    params: dict[str, np.ndarray] = {}
    meta: Optional[CheckpointMeta] = None
    for name, data in entries:
        if name == "meta.json":
            meta = CheckpointMeta(**json.loads(data.decode("utf-8")))
        elif name.startswith("params/") and name.endswith(".npy"):
            params[name[len("params/"):-len(".npy")]] = np.load(io.BytesIO(data), allow_pickle=False)
    if meta is None:
        raise CheckpointIntegrityError(f"missing meta.json in {path}")
    return Checkpoint(params=params, meta=meta)


def config_digest(config: Any) -> str:
    """Hex digest that changes whenever any config field changes."""
    def canon(obj: Any) -> Any:
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {"__type__": type(obj).__name__,
                    **{f.name: canon(getattr(obj, f.name)) for f in dataclasses.fields(obj)}}
        if isinstance(obj, Enum):
            return obj.value
        if isinstance(obj, Mapping):
            return {str(k): canon(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [canon(v) for v in obj]
        if isinstance(obj, (np.integer, np.floating)):
            return obj.item()
        return obj

    payload = json.dumps(canon(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Stage configuration
# ---------------------------------------------------------------------------

OPTIMIZER_KINDS = ("sgd_nesterov", "adam")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd_nesterov"
    momentum: float = 0.9
    weight_decay: float = 1e-5

    def __post_init__(self) -> None:
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")


@dataclass(frozen=True)
class LrSchedule:
    """Multi-step decay: lr(t) = initial · decay^(#milestones with t ≥ fraction·steps)."""

    initial: float = 1e-2
    milestones: tuple[float, ...] = (0.6, 0.9)
    decay: float = 0.1

    def lr_at(self, step: int, total_steps: int) -> float:
        passed = sum(1 for m in self.milestones if step >= m * total_steps)
        return self.initial * self.decay ** passed


@dataclass(frozen=True)
class InputPipeline:
    """Resize to resize×resize, then a random square crop of the model's input size."""

    resize: int = 32
    crop: str = "random_square"


@dataclass(frozen=True)
class StageConfig:
    steps: int = 500
    batch_size: int = 64
    optimizer: OptimizerConfig = OptimizerConfig()
    lr_schedule: LrSchedule = LrSchedule()
    lr_grid: tuple[float, ...] = ()
    wd_grid: tuple[float, ...] = ()
    input_pipeline: InputPipeline = InputPipeline()

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_grid and list(self.lr_grid) != sorted(self.lr_grid, reverse=True):
            raise ConfigError("lr_grid must be sorted descending")

    def with_(self, **kwargs) -> "StageConfig":
        return dataclasses.replace(self, **kwargs)
