"""Sequential session training: run one stream end to end, measure forgetting.

Protocol per session: attach a fresh zero adapter, train it plus the session's
head rows with Adam on cross-entropy over that session's classes only (no
replay), freeze the adapter, install class-mean prototypes, then score
nearest-class-mean Top-1 accuracy over the validation sets of every class
seen so far. Frozen state is hashed before and after each session's training;
a mismatch aborts the run.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import (
    ADAPTER_KINDS,
    LoraAdapterStack,
    SvfAdapterStack,
    FrozenWeights,
    FullFtWeights,
    freeze_task,
    materialize,
    param_count,
    span_offdiag_max,
)
from .data import StreamConfig, build_stream
from .errors import ConfigError, InvalidInputError, ShapeError, SvfError
from .model import (
    AdamState,
    BackboneConfig,
    ModelState,
    adam_step,
    add_head_rows,
    build_model,
    compute_prototypes,
    embed,
    flatten_layer_grads,
    install_prototypes,
    loss_and_gradients,
    ncm_classify,
    random_base_weights,
    session_head_matrix,
    trainable_params,
)


@dataclass(frozen=True)
class ExperimentConfig:
    """One stream, one backbone policy, one training recipe."""

    stream: StreamConfig = field(default_factory=StreamConfig)
    layer_shapes: tuple = ((64, 48), (48, 32))
    adapt_mask: tuple | None = None
    adapter_kind: str = "svf"
    rank: int | None = None
    epochs_base: int = 5
    epochs_incremental: int = 2
    lr: float = 5e-4
    batch_size: int = 16
    seeds: tuple = (0,)
    eval_cadence: int = 1

    def __post_init__(self):
        shapes = tuple((int(m), int(n)) for m, n in self.layer_shapes)
        object.__setattr__(self, "layer_shapes", shapes)
        mask = self.adapt_mask
        mask = (True,) * len(shapes) if mask is None else tuple(bool(b) for b in mask)
        object.__setattr__(self, "adapt_mask", mask)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {self.adapter_kind!r}")
        if shapes[0][0] != self.stream.dim:
            raise ConfigError(
                f"first layer takes {shapes[0][0]} inputs but stream dim is "
                f"{self.stream.dim}"
            )
        if self.epochs_base < 1 or self.epochs_incremental < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.eval_cadence < 1:
            raise ConfigError(f"eval_cadence must be >= 1, got {self.eval_cadence}")

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            layer_shapes=self.layer_shapes,
            adapt_mask=self.adapt_mask,
            adapter_kind=self.adapter_kind,
            rank=self.rank,
        )


@dataclass(frozen=True)
class SessionRecord:
    session_index: int
    class_ids: tuple
    n_seen: int
    accuracy: float
    base_acc_fixed: float
    train_traj: tuple
    val_traj: tuple
    frozen_digest: str
    span_offdiag: float | None


@dataclass(frozen=True)
class ExperimentReport:
    adapter_kind: str
    seed: int
    rank: int | None
    accuracies: tuple
    a_avg: float
    pd: float
    params_per_session: int
    stream_hash: str
    sessions: tuple
    wall_time_s: float  # measured, never serialized


def compute_metrics(accuracies) -> tuple:
    """Average accuracy across sessions and the first-to-last drop."""
    accs = [float(a) for a in accuracies]
    if not accs:
        raise InvalidInputError("no accuracies to summarize")
    return sum(accs) / len(accs), accs[0] - accs[-1]


def overfit_gap(train_acc, val_acc) -> tuple:
    """Per-checkpoint train minus val accuracy, plus the final gap."""
    train = [float(a) for a in train_acc]
    val = [float(a) for a in val_acc]
    if len(train) != len(val):
        raise ShapeError(f"{len(train)} train points vs {len(val)} val points")
    if not train:
        raise InvalidInputError("empty trajectory")
    gaps = [t - v for t, v in zip(train, val)]
    return gaps, gaps[-1]


def _accuracy_pct(pred, truth):
    return 100.0 * float(np.mean(np.asarray(pred) == np.asarray(truth)))


def _session_ncm_accuracy(state, session):
    """Train/val accuracy through transient class-mean prototypes.

    The trajectory metric matches the evaluation pipeline (prototypes, not the
    training head): overfitting then shows up as the adapted feature space
    tightening around the few training samples while validation scatters.
    """
    protos = compute_prototypes(
        state, session.train_x, session.train_y, class_ids=session.class_ids
    )
    clf = type(state.classifier)(prototypes=protos)
    train_pred = ncm_classify(clf, embed(state, session.train_x))
    val_pred = ncm_classify(clf, embed(state, session.val_x))
    return (
        _accuracy_pct(train_pred, session.train_y),
        _accuracy_pct(val_pred, session.val_y),
    )


def _stream_hash(sessions) -> str:
    h = hashlib.sha256()
    for s in sessions:
        for arr in (s.train_x, s.train_y, s.val_x, s.val_y):
            h.update(arr.tobytes())
    return h.hexdigest()


def frozen_state_digest(state: ModelState) -> str:
    """Hash of everything training must not touch: factorizations, bases,
    retired per-task parameters, and unadapted weights."""
    h = hashlib.sha256()
    for layer in state.layers:
        if isinstance(layer, SvfAdapterStack):
            h.update(b"svf")
            for arr in (layer.base.u, layer.base.sigma, layer.base.v_t, layer.base_w):
                h.update(arr.tobytes())
            for s in layer.frozen_shifts:
                h.update(s.tobytes())
        elif isinstance(layer, LoraAdapterStack):
            h.update(b"lora")
            h.update(layer.base_w.tobytes())
            for a, b in layer.frozen_pairs:
                h.update(a.tobytes())
                h.update(b.tobytes())
        elif isinstance(layer, FrozenWeights):
            h.update(b"frozen")
            h.update(layer.w.tobytes())
        elif isinstance(layer, FullFtWeights):
            h.update(b"full")  # dense weights are all trainable; nothing frozen
    return h.hexdigest()


def _adapter_params_per_session(config: ExperimentConfig) -> int:
    total = 0
    for shape, adapted in zip(config.layer_shapes, config.adapt_mask):
        if not adapted:
            continue
        rank = config.rank
        if config.adapter_kind == "svf" and rank is None:
            rank = min(shape)
        total += param_count(config.adapter_kind, shape, rank=rank, num_tasks=1)
    return total


def _train_session(state, session, config, seed, record_traj):
    """Adam on cross-entropy over this session's classes; returns trajectories."""
    class_ids = list(session.class_ids)
    head_mat = session_head_matrix(state, class_ids)
    params = dict(trainable_params(state))
    params["head"] = head_mat
    opt = AdamState.for_params(params)
    epochs = config.epochs_base if session.session_index == 0 else config.epochs_incremental
    n = session.train_x.shape[0]
    train_traj, val_traj = [], []
    for epoch in range(epochs):
        order = np.random.default_rng(
            [0x5F0F, seed, session.session_index, epoch]
        ).permutation(n)
        for start in range(0, n, config.batch_size):
            take = order[start : start + config.batch_size]
            _, head_grad, layer_grads = loss_and_gradients(
                state, session.train_x[take], session.train_y[take], class_ids
            )
            grads = flatten_layer_grads(layer_grads)
            grads["head"] = head_grad
            adam_step(opt, params, grads, lr=config.lr)
        if record_traj and ((epoch + 1) % config.eval_cadence == 0 or epoch == epochs - 1):
            train_acc, val_acc = _session_ncm_accuracy(state, session)
            train_traj.append(train_acc)
            val_traj.append(val_acc)
    return train_traj, val_traj


def run_experiment(config: ExperimentConfig, seed=None) -> ExperimentReport:
    """Execute the full session stream once and report every metric."""
    t0 = time.monotonic()
    seed = config.seeds[0] if seed is None else int(seed)
    stream_cfg = replace(config.stream, seed=config.stream.seed + seed)
    sessions = build_stream(stream_cfg)
    state = build_model(
        config.backbone(), random_base_weights(config.backbone(), seed=seed), seed=seed
    )

    base_val = (sessions[0].val_x, sessions[0].val_y)
    base_class_set = set(sessions[0].class_ids)
    records = []
    accuracies = []
    seen_val = []
    n_seen = 0
    for session in sessions:
        n_seen += len(session.class_ids)
        add_head_rows(state, session.class_ids)
        digest_before = frozen_state_digest(state)
        if config.adapter_kind == "frozen":
            train_traj, val_traj = [], []
        else:
            train_traj, val_traj = _train_session(state, session, config, seed, True)
        digest_after = frozen_state_digest(state)
        if digest_after != digest_before:
            raise SvfError(
                f"frozen state changed during session {session.session_index}"
            )
        for layer in state.layers:
            freeze_task(layer)
        span = None
        if config.adapter_kind == "svf":
            # the accumulated update must live entirely in the base's
            # singular directions, by construction
            span = 0.0
            for layer in state.layers:
                if isinstance(layer, SvfAdapterStack):
                    delta = materialize(layer) - layer.base_w
                    span = max(span, span_offdiag_max(layer.base, delta))
        protos = compute_prototypes(
            state, session.train_x, session.train_y, class_ids=session.class_ids
        )
        install_prototypes(state, protos)

        seen_val.append((session.val_x, session.val_y))
        vx = np.concatenate([v[0] for v in seen_val])
        vy = np.concatenate([v[1] for v in seen_val])
        pred = ncm_classify(state.classifier, embed(state, vx))
        accuracy = _accuracy_pct(pred, vy)
        accuracies.append(accuracy)

        # drift control: base-session validation against base prototypes only
        base_protos = {
            c: p for c, p in state.classifier.prototypes.items() if c in base_class_set
        }
        base_clf = type(state.classifier)(prototypes=base_protos)
        base_pred = ncm_classify(base_clf, embed(state, base_val[0]))
        base_acc_fixed = _accuracy_pct(base_pred, base_val[1])

        records.append(
            SessionRecord(
                session_index=session.session_index,
                class_ids=tuple(session.class_ids),
                n_seen=n_seen,
                accuracy=accuracy,
                base_acc_fixed=base_acc_fixed,
                train_traj=tuple(train_traj),
                val_traj=tuple(val_traj),
                frozen_digest=digest_after,
                span_offdiag=span,
            )
        )

    a_avg, pd = compute_metrics(accuracies)
    return ExperimentReport(
        adapter_kind=config.adapter_kind,
        seed=seed,
        rank=config.rank,
        accuracies=tuple(accuracies),
        a_avg=a_avg,
        pd=pd,
        params_per_session=_adapter_params_per_session(config),
        stream_hash=_stream_hash(sessions),
        sessions=tuple(records),
        wall_time_s=time.monotonic() - t0,
    )


# ---------------------------------------------------------------- reporting


def report_to_json(report: ExperimentReport) -> dict:
    """Serializable document; wall time is deliberately left out so identical
    runs produce identical bytes."""
    return {
        "adapter_kind": report.adapter_kind,
        "seed": report.seed,
        "rank": report.rank,
        "accuracies": list(report.accuracies),
        "a_avg": report.a_avg,
        "pd": report.pd,
        "params_per_session": report.params_per_session,
        "stream_hash": report.stream_hash,
        "sessions": [
            {
                "session_index": r.session_index,
                "class_ids": list(r.class_ids),
                "n_seen": r.n_seen,
                "accuracy": r.accuracy,
                "base_acc_fixed": r.base_acc_fixed,
                "train_traj": list(r.train_traj),
                "val_traj": list(r.val_traj),
                "gap_final": (
                    overfit_gap(r.train_traj, r.val_traj)[1] if r.train_traj else None
                ),
                "frozen_digest": r.frozen_digest,
                "span_offdiag": r.span_offdiag,
            }
            for r in report.sessions
        ],
    }


def report_json_bytes(report: ExperimentReport) -> bytes:
    doc = report_to_json(report)
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def report_csv_rows(report: ExperimentReport) -> list:
    rows = []
    for r in report.sessions:
        gap = overfit_gap(r.train_traj, r.val_traj)[1] if r.train_traj else ""
        rows.append(
            {
                "kind": report.adapter_kind,
                "seed": report.seed,
                "session": r.session_index,
                "n_seen": r.n_seen,
                "accuracy": r.accuracy,
                "base_acc_fixed": r.base_acc_fixed,
                "gap_final": gap,
                "params_per_session": report.params_per_session,
            }
        )
    return rows


CSV_FIELDS = [
    "kind",
    "seed",
    "session",
    "n_seen",
    "accuracy",
    "base_acc_fixed",
    "gap_final",
    "params_per_session",
]


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)


def csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS)
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- comparison


def _median(values):
    vals = sorted(float(v) for v in values)
    n = len(vals)
    mid = n // 2
    return vals[mid] if n % 2 else 0.5 * (vals[mid - 1] + vals[mid])


def compare_strategies(config: ExperimentConfig, kinds) -> dict:
    """Run every kind over every seed on identical streams; tabulate."""
    kinds = list(kinds)
    bad = [k for k in kinds if k not in ADAPTER_KINDS]
    if bad:
        raise ConfigError(f"unknown adapter kinds {bad}")
    if not kinds:
        raise ConfigError("no kinds to compare")

    table = {"kinds": {}, "stream_hashes": {}}
    for kind in kinds:
        kind_cfg = replace(config, adapter_kind=kind)
        runs = []
        for seed in config.seeds:
            report = run_experiment(kind_cfg, seed=seed)
            prior = table["stream_hashes"].setdefault(str(seed), report.stream_hash)
            if prior != report.stream_hash:
                raise SvfError(f"stream hash diverged across kinds for seed {seed}")
            runs.append(report)
        gaps = [
            overfit_gap(r.sessions[-1].train_traj, r.sessions[-1].val_traj)[1]
            for r in runs
            if r.sessions[-1].train_traj
        ]
        table["kinds"][kind] = {
            "runs": [report_to_json(r) for r in runs],
            "median_a_avg": _median(r.a_avg for r in runs),
            "median_pd": _median(r.pd for r in runs),
            "median_final_gap": _median(gaps) if gaps else None,
            "params_per_session": runs[0].params_per_session,
        }
    return table


def comparison_csv_rows(table: dict) -> list:
    rows = []
    for kind in table["kinds"]:
        for run in table["kinds"][kind]["runs"]:
            for r in run["sessions"]:
                rows.append(
                    {
                        "kind": kind,
                        "seed": run["seed"],
                        "session": r["session_index"],
                        "n_seen": r["n_seen"],
                        "accuracy": r["accuracy"],
                        "base_acc_fixed": r["base_acc_fixed"],
                        "gap_final": r["gap_final"] if r["gap_final"] is not None else "",
                        "params_per_session": run["params_per_session"],
                    }
                )
    return rows


def config_from_json(doc: dict) -> ExperimentConfig:
    """Build a full config from a JSON document; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known_stream = {
        "base_classes",
        "sessions",
        "n_way",
        "k_shot",
        "dim",
        "val_per_class",
        "seed",
        "source",
        "distort_incremental",
    }
    known_top = {
        "stream",
        "layer_shapes",
        "adapt_mask",
        "adapter_kind",
        "rank",
        "epochs_base",
        "epochs_incremental",
        "lr",
        "batch_size",
        "seeds",
        "eval_cadence",
    }
    unknown = set(doc) - known_top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    stream_doc = doc.get("stream", {})
    if not isinstance(stream_doc, dict):
        raise ConfigError("'stream' must be an object")
    unknown = set(stream_doc) - known_stream
    if unknown:
        raise ConfigError(f"unknown stream keys: {sorted(unknown)}")
    stream = StreamConfig(**stream_doc)
    kw = {k: v for k, v in doc.items() if k != "stream"}
    if "layer_shapes" in kw:
        kw["layer_shapes"] = tuple(tuple(s) for s in kw["layer_shapes"])
    if "adapt_mask" in kw and kw["adapt_mask"] is not None:
        kw["adapt_mask"] = tuple(kw["adapt_mask"])
    if "seeds" in kw:
        kw["seeds"] = tuple(kw["seeds"])
    return ExperimentConfig(stream=stream, **kw)
