"""CSI fingerprints: 3-channel features, labeled datasets, splits, disk format.

A raw complex channel matrix becomes a real (N_A, N_C, 3) tensor holding the
magnitude and the sine/cosine of each antenna row's phase difference against
reference row 0. Datasets keep the raw feature tensors plus min-max
normalization statistics fitted on the training split only; normalization is
applied when batches are drawn, so retagging or refitting never compounds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path as FsPath

import numpy as np

from .channel import (
    Environment,
    RadioConfig,
    Rect,
    apply_noise,
    environment_from_json,
    environment_to_json,
    synth_channel,
)
from .errors import ConfigError, ShapeError

_STREAM_POSITIONS = 2
_STREAM_SAMPLE_NOISE = 3
_STREAM_SPLIT = 4

SOURCE_TRAIN_FRACTION = 0.8
TARGET_TEST_FRACTION = 0.3

_FORMAT_VERSION = 1
_MANIFEST = "manifest.json"
_FINGERPRINT_FILE = "fingerprints.f32"
_LABEL_FILE = "labels.f32"


@dataclass(frozen=True)
class Fingerprint:
    """One raw (unnormalized) feature tensor with its position label."""

    tensor: np.ndarray  # (N_A, N_C, 3) float32
    position: np.ndarray  # (2,) float32, meters
    env_id: str


@dataclass(frozen=True)
class NormStats:
    """Per-channel min/max of the training split."""

    low: np.ndarray  # (3,)
    high: np.ndarray  # (3,)


def stack_fingerprint(per_tx_channels) -> np.ndarray:
    """Stack per-TX (N_C, N_R) matrices into the (N_A, N_C) fingerprint layout.

    Row k * N_T + m holds receive antenna k, transmit antenna m, i.e.
    entry (k*N_T + m, c) = per_tx_channels[m][c, k].
    """
    mats = [np.asarray(m) for m in per_tx_channels]
    n_tx = len(mats)
    if n_tx == 0:
        raise ShapeError("need at least one per-TX channel matrix")
    shape = mats[0].shape
    if len(shape) != 2 or any(m.shape != shape for m in mats):
        raise ShapeError(f"ragged per-TX matrices: {[m.shape for m in mats]}")
    n_c, n_r = shape
    out = np.empty((n_r * n_tx, n_c), dtype=np.complex128)
    for m, mat in enumerate(mats):
        out[m::n_tx, :] = mat.T
    return out


def phase_diff_features(h: np.ndarray) -> np.ndarray:
    """Magnitude plus sin/cos of phase difference against antenna row 0.

    Row 0 gets phase difference 0 by definition; zero-magnitude cells map to
    (sin, cos) = (0, 1).
    """
    h = np.asarray(h)
    mag = np.abs(h)
    diff = np.angle(h) - np.angle(h[0:1, :])
    feat = np.stack([mag, np.sin(diff), np.cos(diff)], axis=-1)
    zero = mag == 0.0
    feat[zero, 1] = 0.0
    feat[zero, 2] = 1.0
    return feat


def fit_normalizer(tensors: np.ndarray) -> NormStats:
    """Per-channel min/max over every cell of the given training tensors."""
    tensors = np.asarray(tensors)
    if tensors.size == 0:
        raise ConfigError("cannot fit a normalizer on an empty training set")
    flat = tensors.reshape(-1, tensors.shape[-1]).astype(np.float64)
    return NormStats(low=flat.min(axis=0), high=flat.max(axis=0))


def normalize(tensor: np.ndarray, stats: NormStats) -> np.ndarray:
    """Affine map into [0,1] with clamping; a constant channel maps to 0."""
    span = stats.high - stats.low
    safe = np.where(span > 0, span, 1.0)
    out = (np.asarray(tensor, dtype=np.float64) - stats.low) / safe
    out = np.where(span > 0, out, 0.0)
    return np.clip(out, 0.0, 1.0)


def split_indices(n: int, role: str, rng_seed: int):
    """Seeded shuffle split; source 80/20, target 70/30 train/test.

    The returned train indices keep their shuffled order: nested training
    subsets of size k are the first k entries.
    """
    if n < 1:
        raise ConfigError("cannot split an empty dataset")
    if role == "source":
        n_train = int(round(n * SOURCE_TRAIN_FRACTION))
    elif role == "target":
        n_train = n - int(round(n * TARGET_TEST_FRACTION))
    else:
        raise ConfigError(f"role must be 'source' or 'target', got {role!r}")
    order = np.random.default_rng([int(rng_seed), _STREAM_SPLIT]).permutation(n)
    return order[:n_train].copy(), order[n_train:].copy()


@dataclass
class Dataset:
    """Labeled fingerprints of one environment with split tags and stats."""

    env_id: str
    radio: RadioConfig
    raw: np.ndarray  # (N, N_A, N_C, 3) float32, unnormalized features
    labels: np.ndarray  # (N, 2) float32, meters
    train_indices: np.ndarray  # shuffled order; prefixes give nested subsets
    test_indices: np.ndarray
    norm: NormStats
    role: str
    env_json: str | None = None

    def __len__(self) -> int:
        return self.raw.shape[0]

    @property
    def fingerprint_shape(self):
        return self.raw.shape[1:]

    def sample(self, i: int) -> Fingerprint:
        return Fingerprint(self.raw[i], self.labels[i], self.env_id)

    def normalized(self, indices=None) -> np.ndarray:
        """Float64 normalized feature tensors for the given sample indices."""
        picked = self.raw if indices is None else self.raw[indices]
        return normalize(picked, self.norm)

    def labels64(self, indices=None) -> np.ndarray:
        picked = self.labels if indices is None else self.labels[indices]
        return picked.astype(np.float64)

    def limit_train_pool(self, k: int) -> "Dataset":
        """Keep only the first k samples of the shuffled training pool."""
        if k < 1 or k > len(self.train_indices):
            raise ConfigError(
                f"requested {k} training samples, pool has {len(self.train_indices)}"
            )
        return replace(self, train_indices=self.train_indices[:k].copy())


def build_dataset(
    env: Environment,
    radio: RadioConfig,
    count: int,
    rng_seed: int,
    role: str = "source",
    region: Rect | None = None,
) -> Dataset:
    """Sample UE positions uniformly and run the full fingerprint pipeline.

    Each sample: synth_channel -> apply_noise -> phase features; the split is
    tagged and the normalizer fitted on the training split before returning.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    area = region or env.area
    if region is not None and not (
        env.area.contains((region.x_min, region.y_min))
        and env.area.contains((region.x_min + region.width, region.y_min + region.height))
    ):
        raise ConfigError("sampling region extends outside the environment area")
    rng = np.random.default_rng([int(rng_seed), _STREAM_POSITIONS])
    xs = rng.uniform(area.x_min, area.x_min + area.width, size=count)
    ys = rng.uniform(area.y_min, area.y_min + area.height, size=count)

    feats = np.empty((count,) + (radio.n_antenna_pairs, radio.num_pilot_subcarriers, 3), dtype=np.float32)
    labels = np.empty((count, 2), dtype=np.float32)
    for i in range(count):
        p = (xs[i], ys[i])
        csi = synth_channel(env, p, radio)
        csi = apply_noise(csi, radio, rng_seed=_sample_noise_seed(rng_seed, i))
        feats[i] = phase_diff_features(csi.entries)
        labels[i] = p

    train_idx, test_idx = split_indices(count, role, rng_seed)
    stats = fit_normalizer(feats[train_idx])
    return Dataset(
        env_id=env.env_id,
        radio=radio,
        raw=feats,
        labels=labels,
        train_indices=train_idx,
        test_indices=test_idx,
        norm=stats,
        role=role,
        env_json=environment_to_json(env),
    )


def _sample_noise_seed(rng_seed: int, sample_index: int) -> int:
    # distinct per-sample streams derived from the dataset seed
    return (int(rng_seed) * 1_000_003 + sample_index) & 0x7FFFFFFFFFFFFFFF


def split_dataset(ds: Dataset, role: str, rng_seed: int) -> Dataset:
    """Retag an existing dataset with a fresh seeded split and refitted stats."""
    train_idx, test_idx = split_indices(len(ds), role, rng_seed)
    stats = fit_normalizer(ds.raw[train_idx])
    return replace(
        ds, train_indices=train_idx, test_indices=test_idx, norm=stats, role=role
    )


def save_dataset(ds: Dataset, directory) -> None:
    """Write manifest.json plus little-endian float32 payload files."""
    directory = FsPath(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": _FORMAT_VERSION,
        "env_id": ds.env_id,
        "role": ds.role,
        "count": len(ds),
        "fingerprint_shape": list(ds.fingerprint_shape),
        "radio": asdict(ds.radio),
        "normalization": {"low": ds.norm.low.tolist(), "high": ds.norm.high.tolist()},
        "train_indices": ds.train_indices.tolist(),
        "test_indices": ds.test_indices.tolist(),
        "environment": json.loads(ds.env_json) if ds.env_json else None,
    }
    (directory / _MANIFEST).write_text(json.dumps(manifest, indent=2))
    (directory / _FINGERPRINT_FILE).write_bytes(
        np.ascontiguousarray(ds.raw, dtype="<f4").tobytes()
    )
    (directory / _LABEL_FILE).write_bytes(
        np.ascontiguousarray(ds.labels, dtype="<f4").tobytes()
    )


def load_dataset(directory) -> Dataset:
    directory = FsPath(directory)
    manifest = json.loads((directory / _MANIFEST).read_text())
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format {manifest.get('format_version')}")
    count = manifest["count"]
    shape = tuple(manifest["fingerprint_shape"])
    raw = np.frombuffer((directory / _FINGERPRINT_FILE).read_bytes(), dtype="<f4")
    raw = raw.reshape((count,) + shape).copy()
    labels = np.frombuffer((directory / _LABEL_FILE).read_bytes(), dtype="<f4")
    labels = labels.reshape(count, 2).copy()
    env_doc = manifest.get("environment")
    return Dataset(
        env_id=manifest["env_id"],
        radio=RadioConfig(**manifest["radio"]),
        raw=raw,
        labels=labels,
        train_indices=np.asarray(manifest["train_indices"], dtype=np.int64),
        test_indices=np.asarray(manifest["test_indices"], dtype=np.int64),
        norm=NormStats(
            low=np.asarray(manifest["normalization"]["low"]),
            high=np.asarray(manifest["normalization"]["high"]),
        ),
        role=manifest["role"],
        env_json=json.dumps(env_doc) if env_doc else None,
    )
