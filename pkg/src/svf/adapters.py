"""Per-task adapter stacks over frozen base weights.

Three parameterizations of the same update problem: singular-value shifts on a
fixed factorization (svf), low-rank factor pairs (lora), and dense weights
(full). "frozen" is the no-adaptation control. Frozen state is kept read-only
so accidental mutation raises instead of silently corrupting a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RankRangeError, ShapeError
from .linalg import SvdFactorization, as_matrix, frobenius_norm, svd

ADAPTER_KINDS = ("svf", "lora", "full", "frozen")

# LoRA descent oracle used by stability_compare.
LORA_DESCENT_STEPS = 500
LORA_DESCENT_LR = 1e-2
LORA_ORACLE_INIT_STD = 0.3
# LoRA training baseline: a is Gaussian, b starts at zero so the initial delta is zero.
LORA_TRAIN_INIT_STD = 0.02


def _frozen_copy(arr):
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass
class SvfAdapterStack:
    """Frozen factorization plus one trainable shift vector per task."""

    base: SvdFactorization
    base_w: np.ndarray
    active_rank: int
    frozen_shifts: list[np.ndarray] = field(default_factory=list)
    current_shift: np.ndarray = None

    @classmethod
    def from_weight(cls, w, active_rank=None):
        w = as_matrix(w, "base weight")
        base = svd(w)
        rank_cap = base.numeric_rank if base.numeric_rank > 0 else len(base.sigma)
        if active_rank is None:
            active_rank = rank_cap
        if not 1 <= active_rank <= rank_cap:
            raise RankRangeError(
                f"active_rank must be in [1, {rank_cap}], got {active_rank}"
            )
        return cls(
            base=base,
            base_w=_frozen_copy(w),
            active_rank=int(active_rank),
            frozen_shifts=[],
            current_shift=np.zeros(active_rank),
        )

    @property
    def shape(self):
        return self.base.source_shape


@dataclass
class LoraAdapterStack:
    """Frozen base weight plus one trainable (a, b) factor pair per task."""

    base_w: np.ndarray
    rank: int
    seed: int
    frozen_pairs: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    current_pair: tuple[np.ndarray, np.ndarray] = None

    @classmethod
    def from_weight(cls, w, rank, seed=0):
        w = as_matrix(w, "base weight")
        if rank < 1:
            raise RankRangeError(f"lora rank must be >= 1, got {rank}")
        stack = cls(base_w=_frozen_copy(w), rank=int(rank), seed=int(seed))
        stack.current_pair = stack._fresh_pair(task_index=0)
        return stack

    def _fresh_pair(self, task_index):
        m, n = self.base_w.shape
        # leading constant keeps this stream disjoint from other seeded draws
        rng = np.random.default_rng([0x10AA, self.seed, task_index])
        a = rng.normal(0.0, LORA_TRAIN_INIT_STD, size=(m, self.rank))
        b = np.zeros((self.rank, n))
        return (a, b)

    @property
    def shape(self):
        return self.base_w.shape


@dataclass
class FullFtWeights:
    """Dense trainable weights; no per-task structure."""

    w: np.ndarray

    @classmethod
    def from_weight(cls, w):
        return cls(w=np.array(as_matrix(w, "weight"), copy=True))

    @property
    def shape(self):
        return self.w.shape


@dataclass
class FrozenWeights:
    """No trainable parameters at all."""

    w: np.ndarray

    @classmethod
    def from_weight(cls, w):
        return cls(w=_frozen_copy(as_matrix(w, "weight")))

    @property
    def shape(self):
        return self.w.shape


def merge_shifts(frozen_shifts, current_shift):
    """Combine shift vectors from all tasks by elementwise summation."""
    current = np.asarray(current_shift, dtype=np.float64)
    if current.ndim != 1:
        raise ShapeError(f"shift must be 1-D, got shape {current.shape}")
    merged = current.copy()
    for s in frozen_shifts:
        s = np.asarray(s, dtype=np.float64)
        if s.shape != current.shape:
            raise ShapeError(
                f"shift length mismatch: {s.shape} vs {current.shape}"
            )
        merged += s
    return merged


def materialize_svf(stack: SvfAdapterStack) -> np.ndarray:
    """Effective weight: base plus the merged shifts on the active directions."""
    merged = merge_shifts(stack.frozen_shifts, stack.current_shift)
    if not merged.any():
        # adding an explicit zero matrix would rewrite -0.0 entries; stay bit-exact
        return np.array(stack.base_w, copy=True)
    r = stack.active_rank
    u = stack.base.u[:, :r]
    v_t = stack.base.v_t[:r, :]
    return stack.base_w + (u * merged) @ v_t


def materialize_lora(stack: LoraAdapterStack) -> np.ndarray:
    out = np.array(stack.base_w, copy=True)
    for a, b in stack.frozen_pairs:
        out += a @ b
    a, b = stack.current_pair
    out += a @ b
    return out


def materialize(layer) -> np.ndarray:
    """Kind-dispatching effective weight of any adapter stack."""
    if isinstance(layer, SvfAdapterStack):
        return materialize_svf(layer)
    if isinstance(layer, LoraAdapterStack):
        return materialize_lora(layer)
    if isinstance(layer, (FullFtWeights, FrozenWeights)):
        return layer.w
    raise TypeError(f"not an adapter layer: {type(layer).__name__}")


def trainable_arrays(layer) -> dict:
    """Name -> live parameter array; empty when nothing is trainable."""
    if isinstance(layer, SvfAdapterStack):
        return {"shift": layer.current_shift}
    if isinstance(layer, LoraAdapterStack):
        return {"a": layer.current_pair[0], "b": layer.current_pair[1]}
    if isinstance(layer, FullFtWeights):
        return {"w": layer.w}
    if isinstance(layer, FrozenWeights):
        return {}
    raise TypeError(f"not an adapter layer: {type(layer).__name__}")


def freeze_task(layer):
    """Retire the current task's parameters into the frozen set; start a new task.

    Frozen entries are read-only copies. Dense and frozen layers have no
    per-task structure and pass through unchanged.
    """
    if isinstance(layer, SvfAdapterStack):
        layer.frozen_shifts.append(_frozen_copy(layer.current_shift))
        layer.current_shift = np.zeros(layer.active_rank)
    elif isinstance(layer, LoraAdapterStack):
        a, b = layer.current_pair
        layer.frozen_pairs.append((_frozen_copy(a), _frozen_copy(b)))
        layer.current_pair = layer._fresh_pair(task_index=len(layer.frozen_pairs))
    elif not isinstance(layer, (FullFtWeights, FrozenWeights)):
        raise TypeError(f"not an adapter layer: {type(layer).__name__}")
    return layer


def param_count(kind, shape, rank=None, num_tasks=1):
    """Trainable parameters per weight matrix under each adapter kind."""
    if kind not in ADAPTER_KINDS:
        raise ConfigError(f"unknown adapter kind {kind!r}")
    m, n = shape
    if m < 1 or n < 1:
        raise ShapeError(f"bad shape {shape}")
    if num_tasks < 1:
        raise ConfigError(f"num_tasks must be >= 1, got {num_tasks}")
    if kind == "svf":
        if rank is None or not 1 <= rank <= min(m, n):
            raise RankRangeError(f"svf rank must be in [1, {min(m, n)}], got {rank}")
        return num_tasks * rank
    if kind == "lora":
        if rank is None or rank < 1:
            raise RankRangeError(f"lora rank must be >= 1, got {rank}")
        return num_tasks * rank * (m + n)
    if kind == "full":
        return m * n
    return 0  # frozen


def span_offdiag_max(base: SvdFactorization, delta) -> float:
    """Largest off-diagonal entry of u.T @ delta @ v; zero iff delta stays in span."""
    delta = np.asarray(delta, dtype=np.float64)
    c = base.u.T @ delta @ base.v_t.T
    mask = ~np.eye(c.shape[0], c.shape[1], dtype=bool)
    if not mask.any():
        return 0.0
    return float(np.abs(c[mask]).max())


@dataclass(frozen=True)
class StabilityRecord:
    svf_norm: float
    best_lora_norm: float
    svf_recon_error: float
    best_lora_recon_error: float


def stability_compare(base, target_delta, rank, trials, seed=0) -> StabilityRecord:
    """Fit target_delta with rank `rank` under both parameterizations.

    The svf side is the closed-form diagonal least-squares fit in the base's
    singular directions. The lora side is the best of `trials` random-init
    gradient descents on ||a @ b - target||_F^2 with fixed step count and size.
    """
    base = as_matrix(base, "base")
    target = as_matrix(target_delta, "target_delta")
    if base.shape != target.shape:
        raise ShapeError(f"shape mismatch: {base.shape} vs {target.shape}")
    if not 1 <= rank <= min(base.shape):
        raise RankRangeError(f"rank must be in [1, {min(base.shape)}], got {rank}")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")

    f = svd(base)
    u = f.u[:, :rank]
    v_t = f.v_t[:rank, :]
    coeffs = np.sum((u.T @ target) * v_t, axis=1)
    svf_delta = (u * coeffs) @ v_t
    svf_norm = frobenius_norm(svf_delta)
    svf_err = frobenius_norm(target - svf_delta)

    m, n = base.shape
    best_err = None
    best_norm = None
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        a = rng.normal(0.0, LORA_ORACLE_INIT_STD, size=(m, rank))
        b = rng.normal(0.0, LORA_ORACLE_INIT_STD, size=(rank, n))
        for _ in range(LORA_DESCENT_STEPS):
            r = a @ b - target
            ga = 2.0 * (r @ b.T)
            gb = 2.0 * (a.T @ r)
            a = a - LORA_DESCENT_LR * ga
            b = b - LORA_DESCENT_LR * gb
        delta = a @ b
        err = frobenius_norm(target - delta)
        if best_err is None or err < best_err:
            best_err = err
            best_norm = frobenius_norm(delta)
    return StabilityRecord(
        svf_norm=svf_norm,
        best_lora_norm=best_norm,
        svf_recon_error=svf_err,
        best_lora_recon_error=best_err,
    )


def adapter_to_json(layer) -> dict:
    """Checkpoint document; floats survive the round trip bit-exactly via repr."""
    if isinstance(layer, SvfAdapterStack):
        return {
            "kind": "svf",
            "shape": list(layer.shape),
            "rank": layer.active_rank,
            "frozen_shifts": [s.tolist() for s in layer.frozen_shifts],
            "current_shift": layer.current_shift.tolist(),
        }
    if isinstance(layer, LoraAdapterStack):
        return {
            "kind": "lora",
            "shape": list(layer.shape),
            "rank": layer.rank,
            "seed": layer.seed,
            "frozen_pairs": [
                {"a": a.tolist(), "b": b.tolist()} for a, b in layer.frozen_pairs
            ],
            "current_pair": {
                "a": layer.current_pair[0].tolist(),
                "b": layer.current_pair[1].tolist(),
            },
        }
    if isinstance(layer, FullFtWeights):
        return {"kind": "full", "shape": list(layer.shape), "w": layer.w.tolist()}
    if isinstance(layer, FrozenWeights):
        return {"kind": "frozen", "shape": list(layer.shape)}
    raise TypeError(f"not an adapter layer: {type(layer).__name__}")


def adapter_from_json(doc: dict, base_w) -> object:
    """Rebuild an adapter layer from its checkpoint document and base weight."""
    base_w = as_matrix(base_w, "base weight")
    kind = doc.get("kind")
    if kind not in ADAPTER_KINDS:
        raise ConfigError(f"unknown adapter kind {kind!r}")
    if tuple(doc["shape"]) != base_w.shape:
        raise ShapeError(
            f"checkpoint shape {doc['shape']} does not match weight {base_w.shape}"
        )
    if kind == "svf":
        stack = SvfAdapterStack.from_weight(base_w, active_rank=doc["rank"])
        stack.frozen_shifts = [
            _frozen_copy(np.asarray(s, dtype=np.float64)) for s in doc["frozen_shifts"]
        ]
        stack.current_shift = np.asarray(doc["current_shift"], dtype=np.float64)
        if stack.current_shift.shape != (stack.active_rank,):
            raise ShapeError("current_shift length does not match rank")
        return stack
    if kind == "lora":
        stack = LoraAdapterStack.from_weight(base_w, rank=doc["rank"], seed=doc.get("seed", 0))
        stack.frozen_pairs = [
            (
                _frozen_copy(np.asarray(p["a"], dtype=np.float64)),
                _frozen_copy(np.asarray(p["b"], dtype=np.float64)),
            )
            for p in doc["frozen_pairs"]
        ]
        stack.current_pair = (
            np.asarray(doc["current_pair"]["a"], dtype=np.float64),
            np.asarray(doc["current_pair"]["b"], dtype=np.float64),
        )
        return stack
    if kind == "full":
        return FullFtWeights(w=np.asarray(doc["w"], dtype=np.float64))
    return FrozenWeights.from_weight(base_w)
