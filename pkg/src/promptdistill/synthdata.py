"""Synthetic multi-contrast volumes with a planted privileged signal.

Each subject has an ellipsoidal lesion core inside a larger edema region. A
smooth per-subject anatomy field is shared by every contrast (with its own
gain per channel) and each voxel gets independent noise. A latent grade
attribute ``a`` in [0, 1] (higher for class 1) controls the core's contrast:

* the single contrast-enhanced (CE) channel shows ``ce_signal_strength * a``
  directly in the core;
* the three non-enhanced (NE) channels show a weaker, nonlinearly distorted
  copy ``ne_signal_strength * tanh(3 (a - 0.5))`` in the first channel only,
  mixed with a label-independent nuisance term that also appears in the second
  channel. The grade is therefore recoverable from NE data (by contrasting
  channels) but never as plainly as from CE data.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .container import Reader, Writer
from .errors import ConfigError, CorruptFileError, StratificationError

NE_CHANNELS = 3
CE_CHANNELS = 1
MIN_EXTENT = 8

DATASET_MAGIC = b"PDDATA\x00\x01"
DATASET_VERSION = 1


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 200
    volume_extent: int = 16
    class_balance: float = 0.5
    ce_signal_strength: float = 2.0
    ne_signal_strength: float = 0.5
    noise_sigma: float = 0.3
    seed: int = 0
    privileged: bool = True
    grade_spread: float = 0.12
    grade_gap: float = 0.5
    nuisance_strength: float = 0.1

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be positive, got {self.n_samples}")
        if self.volume_extent < MIN_EXTENT:
            raise ConfigError(f"volume_extent must be >= {MIN_EXTENT}, got {self.volume_extent}")
        if not 0.0 < self.class_balance < 1.0:
            raise ConfigError(f"class_balance must lie in (0, 1), got {self.class_balance}")
        for name in ("ce_signal_strength", "ne_signal_strength", "noise_sigma", "grade_spread", "grade_gap", "nuisance_strength"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.privileged and not self.ce_signal_strength > self.ne_signal_strength:
            raise ConfigError(
                "a privileged dataset needs ce_signal_strength > ne_signal_strength "
                f"(got {self.ce_signal_strength} <= {self.ne_signal_strength})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    subject_id: str
    ne_volume: np.ndarray  # [3, D, H, W]
    ce_volume: np.ndarray  # [1, D, H, W]
    label: int
    lesion_mask: np.ndarray  # [D, H, W], 1.0 inside the lesion core

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ConfigError(f"label must be 0 or 1, got {self.label}")
        extents = {self.ne_volume.shape[1:], self.ce_volume.shape[1:], self.lesion_mask.shape}
        if len(extents) != 1:
            raise ConfigError(f"subject {self.subject_id}: channels disagree on spatial extents {extents}")

    def volume(self, channels: str) -> np.ndarray:
        """``"ne"``, ``"ce"`` or ``"all"`` (CE followed by NE, the full-sequence input)."""
        if channels == "ne":
            return self.ne_volume
        if channels == "ce":
            return self.ce_volume
        if channels == "all":
            return np.concatenate([self.ce_volume, self.ne_volume], axis=0)
        raise ConfigError(f"unknown channel set {channels!r}")


CHANNEL_COUNTS = {"ne": NE_CHANNELS, "ce": CE_CHANNELS, "all": NE_CHANNELS + CE_CHANNELS}


def _ellipsoid(grid, center, radii) -> np.ndarray:
    zz, yy, xx = grid
    r = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    return r


def _smooth_field(rng, grid, extent: int, n_blobs: int = 3) -> np.ndarray:
    field = np.zeros(grid[0].shape)
    for _ in range(n_blobs):
        c = rng.uniform(0, extent - 1, size=3)
        width = rng.uniform(0.25, 0.5) * extent
        amp = rng.uniform(-0.3, 0.3)
        field += amp * np.exp(-0.5 * _ellipsoid(grid, c, (width,) * 3))
    return field


def _render_subject(rng: np.random.Generator, spec: DatasetSpec, label: int, idx: int) -> Sample:
    e = spec.volume_extent
    grid = np.meshgrid(*(np.arange(e, dtype=np.float64),) * 3, indexing="ij")

    # lesion geometry is label-independent
    center = rng.uniform(0.35 * e, 0.65 * e, size=3)
    radii = rng.uniform(0.12 * e, 0.22 * e, size=3)
    r = _ellipsoid(grid, center, radii)
    core = (r <= 1.0).astype(np.float64)
    edema = ((r > 1.0) & (r <= 2.6)).astype(np.float64)

    # latent grade attribute; the two classes overlap slightly
    mean = 0.5 + (0.5 if label == 1 else -0.5) * spec.grade_gap
    grade = float(np.clip(rng.normal(mean, spec.grade_spread), 0.0, 1.0))
    nuisance = rng.normal(0.0, 1.0)
    edema_level = rng.uniform(0.3, 1.0)

    # one anatomy field per subject, seen by every contrast with its own gain
    anatomy = _smooth_field(rng, grid, e)
    ce = anatomy + spec.ce_signal_strength * grade * core + 0.3 * edema_level * edema
    ce += rng.normal(0.0, spec.noise_sigma, size=core.shape)

    distorted = math.tanh(3.0 * (grade - 0.5))
    nu = spec.nuisance_strength * nuisance
    ne = np.empty((NE_CHANNELS,) + core.shape)
    ne[0] = 0.8 * anatomy + (spec.ne_signal_strength * distorted + nu) * core - 0.2 * edema_level * edema
    ne[1] = -0.6 * anatomy + nu * core + 0.6 * edema_level * edema
    ne[2] = 0.5 * anatomy + 0.8 * edema_level * (edema + core)
    ne += rng.normal(0.0, spec.noise_sigma, size=ne.shape)

    return Sample(f"subj{idx:04d}", ne, ce[None], label, core)


def generate_dataset(spec: DatasetSpec) -> list[Sample]:
    """Pure function of ``spec``; every subject draws from its own child seed."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    label_rng, *subject_seeds = (np.random.default_rng(s) for s in root.spawn(spec.n_samples + 1))
    labels = (label_rng.random(spec.n_samples) < spec.class_balance).astype(int)
    return [_render_subject(rng, spec, int(y), i) for i, (rng, y) in enumerate(zip(subject_seeds, labels))]


def stack(samples: list[Sample], channels: str) -> tuple[np.ndarray, np.ndarray]:
    """Batch array [N, C, D, H, W] and integer labels."""
    x = np.stack([s.volume(channels) for s in samples])
    y = np.array([s.label for s in samples], dtype=int)
    return x, y


# -- split ----------------------------------------------------------------------


def split_sizes(counts: dict[int, int], train_fraction: float) -> dict[int, int]:
    """Per-stratum train sizes: floor of the proportional share, with the overall
    rounding remainder (up to ``floor(N * f)``) handed to the strata with the
    largest fractional parts."""
    shares = {c: n * train_fraction for c, n in counts.items()}
    sizes = {c: math.floor(v) for c, v in shares.items()}
    total = math.floor(sum(counts.values()) * train_fraction + 1e-9)
    leftover = total - sum(sizes.values())
    for c in sorted(shares, key=lambda c: (-(shares[c] - sizes[c]), c))[:max(leftover, 0)]:
        sizes[c] += 1
    return sizes


def split(dataset: list[Sample], train_fraction: float = 0.8, seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Stratified shuffle split; both sides keep every class present."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    labels = np.array([s.label for s in dataset])
    classes = sorted(set(labels.tolist()))
    sizes = split_sizes({c: int((labels == c).sum()) for c in classes}, train_fraction)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = sizes[c]
        if k == 0 or k == len(idx):
            raise StratificationError(
                f"class {c} ({len(idx)} samples) would leave the {'train' if k == 0 else 'test'} side empty"
            )
        train_idx.extend(idx[:k].tolist())
        test_idx.extend(idx[k:].tolist())
    order = rng.permutation(len(train_idx))
    train = [dataset[train_idx[i]] for i in order]
    test = [dataset[i] for i in sorted(test_idx)]
    return train, test


# -- file format ----------------------------------------------------------------


def write_dataset(dataset: list[Sample], path, spec: DatasetSpec | None = None) -> None:
    """Container layout after the common framing: uint32 sample count, then per
    subject its id (uint32 length + UTF-8), uint8 label and three arrays
    (NE volume, CE volume, lesion mask) as uint8 ndim, uint32 extents and
    float64 little-endian data."""
    extents = list(dataset[0].ce_volume.shape[1:]) if dataset else []
    header = {
        "spec": spec.to_dict() if spec else None,
        "n_samples": len(dataset),
        "extents": extents,
        "channels": {"ne": NE_CHANNELS, "ce": CE_CHANNELS},
    }
    w = Writer(DATASET_MAGIC, DATASET_VERSION, header)
    w.u32(len(dataset))
    for s in dataset:
        w.text(s.subject_id)
        w.u8(s.label)
        w.array(s.ne_volume)
        w.array(s.ce_volume)
        w.array(s.lesion_mask)
    w.save(path)


def read_dataset(path) -> tuple[list[Sample], DatasetSpec | None]:
    r = Reader.open(path, DATASET_MAGIC, DATASET_VERSION, "dataset")
    count = r.u32()
    declared = r.header.get("n_samples")
    if declared != count:
        raise CorruptFileError(f"dataset header declares {declared} samples but the body holds {count}")
    samples = []
    for _ in range(count):
        sid = r.text()
        label = r.u8()
        ne, ce, mask = r.array(), r.array(), r.array()
        if ne.ndim != 4 or ce.ndim != 4 or mask.ndim != 3:
            raise CorruptFileError(f"subject {sid} has malformed volumes {ne.shape}, {ce.shape}, {mask.shape}")
        samples.append(Sample(sid, ne, ce, label, mask))
    r.finish()
    spec = DatasetSpec.from_dict(r.header["spec"]) if r.header.get("spec") else None
    return samples, spec


def dataset_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- oracle ---------------------------------------------------------------------


def lesion_intensity_scores(dataset: list[Sample], channels: str) -> np.ndarray:
    """Mean intensity inside the lesion core, averaged over the chosen channels;
    the score fed to the threshold-classifier oracle."""
    return np.array([s.volume(channels)[:, s.lesion_mask > 0].mean() for s in dataset])
