"""Session streams: synthetic class clusters, feature-file ingestion, splits.

A stream is a base session with plentiful data followed by M incremental
sessions of exactly N classes x K shots. Class id spaces are disjoint across
sessions. Synthetic classes are Gaussian clusters around unit-sphere means;
real features arrive through the SVFF byte format documented at the loader.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    LabelError,
    LayoutError,
    RankRangeError,
)
from .linalg import SvdFactorization

SVFF_MAGIC = b"SVFF"
SVFF_VERSION = 1
SVFF_HEADER = struct.Struct("<4sIIII")  # magic, version, n_samples, dim, n_classes

CLUSTER_NOISE_STD = 0.15
BASE_TRAIN_PER_CLASS = 100
DISTORTION_SCALE_RANGE = (0.8, 1.2)


def _ro(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StreamConfig:
    """Layout of one class-incremental stream."""

    base_classes: int = 60
    sessions: int = 8
    n_way: int = 5
    k_shot: int = 5
    dim: int = 64
    val_per_class: int = 20
    seed: int = 0
    source: str = "synthetic"
    distort_incremental: bool = False

    def __post_init__(self):
        if self.base_classes < 1:
            raise ConfigError(f"base_classes must be >= 1, got {self.base_classes}")
        if self.sessions < 0:
            raise ConfigError(f"sessions must be >= 0, got {self.sessions}")
        if self.n_way < 1 or self.k_shot < 1:
            raise ConfigError(
                f"n_way and k_shot must be >= 1, got {self.n_way}, {self.k_shot}"
            )
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.val_per_class < 1:
            raise ConfigError(f"val_per_class must be >= 1, got {self.val_per_class}")
        if self.distort_incremental and self.source != "synthetic":
            raise ConfigError("distort_incremental applies to synthetic streams only")

    @property
    def total_classes(self):
        return self.base_classes + self.sessions * self.n_way


@dataclass(frozen=True)
class SessionDataset:
    """One session's classes and samples; arrays are read-only."""

    session_index: int
    class_ids: tuple
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        for name in ("train_x", "train_y", "val_x", "val_y"):
            object.__setattr__(self, name, _ro(getattr(self, name)))


@dataclass(frozen=True)
class FeatureSet:
    """Decoded contents of one SVFF file."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int

    @property
    def dim(self):
        return self.x.shape[1]


def _class_mean(rng, dim):
    v = rng.normal(size=dim)
    n = float(np.linalg.norm(v))
    while n < 1e-12:  # astronomically unlikely, but stay total
        v = rng.normal(size=dim)
        n = float(np.linalg.norm(v))
    return v / n


def _distortion(seed, dim):
    """Fixed orthogonal rotation and mild per-axis scaling, derived from seed."""
    rng = np.random.default_rng([seed, 0x5C41E])
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))  # canonical sign, independent of LAPACK details
    scales = rng.uniform(*DISTORTION_SCALE_RANGE, size=dim)
    return q, scales


def generate_stream(config: StreamConfig) -> list:
    """Synthetic stream: one Gaussian cluster per class, seeded end to end."""
    if config.source != "synthetic":
        raise ConfigError(f"generate_stream needs a synthetic source, got {config.source!r}")
    distort = None
    if config.distort_incremental:
        distort = _distortion(config.seed, config.dim)

    def draw_class(class_id, n_train, incremental):
        rng = np.random.default_rng([config.seed, class_id])
        mean = _class_mean(rng, config.dim)
        train = mean + rng.normal(0.0, CLUSTER_NOISE_STD, size=(n_train, config.dim))
        val = mean + rng.normal(
            0.0, CLUSTER_NOISE_STD, size=(config.val_per_class, config.dim)
        )
        if incremental and distort is not None:
            q, scales = distort
            train = (train @ q) * scales
            val = (val @ q) * scales
        return train, val

    sessions = []
    next_id = 0
    for t in range(config.sessions + 1):
        if t == 0:
            ids = list(range(next_id, next_id + config.base_classes))
            per_class = BASE_TRAIN_PER_CLASS
        else:
            ids = list(range(next_id, next_id + config.n_way))
            per_class = config.k_shot
        next_id = ids[-1] + 1
        tx, ty, vx, vy = [], [], [], []
        for c in ids:
            train, val = draw_class(c, per_class, incremental=t > 0)
            tx.append(train)
            ty.append(np.full(per_class, c, dtype=np.int64))
            vx.append(val)
            vy.append(np.full(config.val_per_class, c, dtype=np.int64))
        sessions.append(
            SessionDataset(
                session_index=t,
                class_ids=tuple(ids),
                train_x=np.concatenate(tx),
                train_y=np.concatenate(ty),
                val_x=np.concatenate(vx),
                val_y=np.concatenate(vy),
            )
        )
    return sessions


# ---------------------------------------------------------------- SVFF files


def write_feature_file(path, x, y, n_classes):
    """Serialize features to the SVFF byte format.

    Layout, all little-endian: magic "SVFF"; u32 version (=1); u32 n_samples;
    u32 dim; u32 n_classes; then per sample [u32 label][dim x f32]. No padding,
    no checksum.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[1] < 1:
        raise FormatError(f"features must be (n, dim>=1), got {x.shape}")
    if y.shape != (x.shape[0],):
        raise FormatError(f"{x.shape[0]} samples but labels shaped {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LabelError(
            f"labels must lie in [0, {n_classes}), got [{y.min()}, {y.max()}]"
        )
    n, dim = x.shape
    rec = np.dtype([("label", "<u4"), ("feat", "<f4", (dim,))])
    body = np.empty(n, dtype=rec)
    body["label"] = y.astype(np.uint32)
    body["feat"] = x
    with open(path, "wb") as fh:
        fh.write(SVFF_HEADER.pack(SVFF_MAGIC, SVFF_VERSION, n, dim, int(n_classes)))
        fh.write(body.tobytes())


def load_feature_file(path) -> FeatureSet:
    """Read and validate one SVFF file; see write_feature_file for the layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < SVFF_HEADER.size:
        raise CorruptionError(
            f"file ends inside the {SVFF_HEADER.size}-byte header", offset=len(blob)
        )
    magic, version, n, dim, n_classes = SVFF_HEADER.unpack_from(blob, 0)
    if magic != SVFF_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != SVFF_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dim < 1:
        raise FormatError(f"dim must be >= 1, got {dim}", offset=12)
    rec_size = 4 + 4 * dim
    expected = SVFF_HEADER.size + n * rec_size
    if len(blob) < expected:
        raise CorruptionError(
            f"payload truncated: header declares {n} samples "
            f"({expected} bytes total), file has {len(blob)}",
            offset=len(blob),
        )
    if len(blob) > expected:
        raise CorruptionError(
            f"{len(blob) - expected} trailing bytes after the declared payload",
            offset=expected,
        )
    rec = np.dtype([("label", "<u4"), ("feat", "<f4", (dim,))])
    body = np.frombuffer(blob, dtype=rec, count=n, offset=SVFF_HEADER.size)
    labels = body["label"].astype(np.int64)
    feats = body["feat"].astype(np.float64)
    if n:
        bad = np.nonzero(labels >= n_classes)[0]
        if bad.size:
            i = int(bad[0])
            raise LabelError(
                f"sample {i} has label {labels[i]} but header declares "
                f"{n_classes} classes",
                offset=SVFF_HEADER.size + i * rec_size,
            )
        nonfinite = np.nonzero(~np.isfinite(feats).all(axis=1))[0]
        if nonfinite.size:
            i = int(nonfinite[0])
            raise CorruptionError(
                f"sample {i} contains non-finite feature values",
                offset=SVFF_HEADER.size + i * rec_size + 4,
            )
    feats = feats.reshape(n, dim)  # keeps shape honest when n == 0
    return FeatureSet(x=_ro(feats), y=_ro(labels), n_classes=int(n_classes))


def split_sessions(features: FeatureSet, config: StreamConfig) -> list:
    """Partition loaded features into a base plus N-way K-shot sessions.

    Class ids are taken in ascending order: the first base_classes ids form
    session 0, then n_way ids per incremental session. Every class reserves
    its last val_per_class samples (file order) for validation; base classes
    train on everything else, incremental classes train on K seeded shots and
    the unchosen remainder joins validation.
    """
    present = [int(c) for c in np.unique(features.y)]
    if len(present) != config.total_classes:
        raise LayoutError(
            f"layout needs exactly {config.total_classes} classes "
            f"({config.base_classes} base + {config.sessions} x {config.n_way}), "
            f"file has {len(present)}"
        )
    if features.dim != config.dim:
        raise LayoutError(f"feature dim {features.dim} != configured {config.dim}")
    by_class = {c: np.nonzero(features.y == c)[0] for c in present}

    sessions = []
    cursor = 0
    for t in range(config.sessions + 1):
        width = config.base_classes if t == 0 else config.n_way
        ids = present[cursor : cursor + width]
        cursor += width
        tx, ty, vx, vy = [], [], [], []
        for c in ids:
            idx = by_class[c]
            if len(idx) < config.val_per_class + (1 if t == 0 else config.k_shot):
                needed = config.val_per_class + (1 if t == 0 else config.k_shot)
                raise LayoutError(
                    f"class {c} has {len(idx)} samples, needs at least {needed}"
                )
            pool = idx[: len(idx) - config.val_per_class]
            held = idx[len(idx) - config.val_per_class :]
            if t == 0:
                chosen = pool
                spare = idx[:0]
            else:
                rng = np.random.default_rng([config.seed, c])
                pick = np.sort(rng.choice(len(pool), size=config.k_shot, replace=False))
                chosen = pool[pick]
                spare = np.delete(pool, pick)
            val_idx = np.concatenate([spare, held])
            tx.append(features.x[chosen])
            ty.append(np.full(len(chosen), c, dtype=np.int64))
            vx.append(features.x[val_idx])
            vy.append(np.full(len(val_idx), c, dtype=np.int64))
        sessions.append(
            SessionDataset(
                session_index=t,
                class_ids=tuple(ids),
                train_x=np.concatenate(tx),
                train_y=np.concatenate(ty),
                val_x=np.concatenate(vx),
                val_y=np.concatenate(vy),
            )
        )
    return sessions


def build_stream(config: StreamConfig) -> list:
    """Config-driven stream construction for both sources."""
    if config.source == "synthetic":
        return generate_stream(config)
    return split_sessions(load_feature_file(config.source), config)


def make_in_span_target(base: SvdFactorization, coeffs) -> np.ndarray:
    """Update matrix lying exactly in the base's singular-direction span."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 1:
        raise RankRangeError(f"coeffs must be 1-D, got shape {coeffs.shape}")
    if len(coeffs) > len(base.sigma):
        raise RankRangeError(
            f"{len(coeffs)} coeffs exceed the {len(base.sigma)} singular directions"
        )
    k = len(coeffs)
    if k == 0:
        return np.zeros(base.source_shape)
    return (base.u[:, :k] * coeffs) @ base.v_t[:k, :]
