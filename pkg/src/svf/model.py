"""Backbone, analytic gradients, Adam, and the nearest-class-mean classifier.

The backbone is a stack of linear layers with a ramp between consecutive
layers (none after the last). Inputs are row vectors, so a layer with weight
shape (m, n) maps batches (b, m) -> (b, n) via x @ w. Logits come from a
trainable head used only inside session training; classification always goes
through class-mean prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import (
    ADAPTER_KINDS,
    FrozenWeights,
    FullFtWeights,
    LoraAdapterStack,
    SvfAdapterStack,
    adapter_from_json,
    adapter_to_json,
    materialize,
    trainable_arrays,
)
from .errors import ConfigError, InvalidInputError, LabelError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class BackboneConfig:
    """Static layer layout plus the adapter policy applied to it."""

    layer_shapes: tuple
    adapt_mask: tuple
    adapter_kind: str = "svf"
    rank: int | None = None

    def __post_init__(self):
        shapes = tuple((int(m), int(n)) for m, n in self.layer_shapes)
        object.__setattr__(self, "layer_shapes", shapes)
        object.__setattr__(self, "adapt_mask", tuple(bool(b) for b in self.adapt_mask))
        if not shapes:
            raise ConfigError("need at least one layer")
        for (m, n) in shapes:
            if m < 1 or n < 1:
                raise ConfigError(f"bad layer shape ({m}, {n})")
        for (_, n), (m, _) in zip(shapes, shapes[1:]):
            if n != m:
                raise ConfigError(
                    f"layer shapes do not compose: output {n} feeds input {m}"
                )
        if len(self.adapt_mask) != len(shapes):
            raise ConfigError("adapt_mask length must match layer count")
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {self.adapter_kind!r}")

    @classmethod
    def default(cls, adapter_kind="svf", rank=None):
        return cls(
            layer_shapes=((64, 48), (48, 32)),
            adapt_mask=(True, True),
            adapter_kind=adapter_kind,
            rank=rank,
        )

    @property
    def in_dim(self):
        return self.layer_shapes[0][0]

    @property
    def out_dim(self):
        return self.layer_shapes[-1][1]


@dataclass
class NcmClassifier:
    """Class-mean prototype table; queries are matched by normalized distance."""

    prototypes: dict = field(default_factory=dict)


@dataclass
class ModelState:
    config: BackboneConfig
    layers: list
    head: dict = field(default_factory=dict)  # class-id -> row vector (out_dim,)
    classifier: NcmClassifier = field(default_factory=NcmClassifier)


def random_base_weights(config: BackboneConfig, seed=0) -> list:
    """Fan-in scaled Gaussian base weights, one per layer, seeded per layer."""
    out = []
    for i, (m, n) in enumerate(config.layer_shapes):
        # leading constant keeps this stream disjoint from other seeded draws
        rng = np.random.default_rng([0xB1A5, seed, i])
        out.append(rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, n)))
    return out


def build_model(config: BackboneConfig, base_weights, seed=0) -> ModelState:
    """Wrap base weights in adapter stacks according to the config's policy."""
    if len(base_weights) != len(config.layer_shapes):
        raise ConfigError(
            f"expected {len(config.layer_shapes)} weights, got {len(base_weights)}"
        )
    layers = []
    for i, w in enumerate(base_weights):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != config.layer_shapes[i]:
            raise ShapeError(
                f"layer {i} weight shape {w.shape} != {config.layer_shapes[i]}"
            )
        if not config.adapt_mask[i]:
            layers.append(FrozenWeights.from_weight(w))
        elif config.adapter_kind == "svf":
            layers.append(SvfAdapterStack.from_weight(w, active_rank=config.rank))
        elif config.adapter_kind == "lora":
            if config.rank is None:
                raise ConfigError("lora requires a rank")
            layers.append(LoraAdapterStack.from_weight(w, rank=config.rank, seed=seed + i))
        elif config.adapter_kind == "full":
            layers.append(FullFtWeights.from_weight(w))
        else:
            layers.append(FrozenWeights.from_weight(w))
    return ModelState(config=config, layers=layers)


def ramp(x):
    return np.maximum(x, 0.0)


def _as_batch(x, in_dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ShapeError(f"input shape {x.shape} does not match in_dim {in_dim}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("input contains non-finite values")
    return x, single


def _forward_cached(weights, x):
    """Activations h per layer boundary and pre-activations z per layer."""
    hs = [x]
    zs = []
    h = x
    last = len(weights) - 1
    for i, w in enumerate(weights):
        z = h @ w
        zs.append(z)
        h = ramp(z) if i < last else z
        hs.append(h)
    return hs, zs


def embed(state: ModelState, x) -> np.ndarray:
    """Backbone output without any head."""
    x2, single = _as_batch(x, state.config.in_dim)
    hs, _ = _forward_cached([materialize(l) for l in state.layers], x2)
    emb = hs[-1]
    return emb[0] if single else emb


def forward(state: ModelState, x, class_ids) -> tuple:
    """Head logits over the given classes plus the embedding."""
    class_ids = list(class_ids)
    if not class_ids:
        raise ConfigError("class_ids is empty")
    missing = [c for c in class_ids if c not in state.head]
    if missing:
        raise LabelError(f"no head rows for classes {missing}")
    x2, single = _as_batch(x, state.config.in_dim)
    hs, _ = _forward_cached([materialize(l) for l in state.layers], x2)
    emb = hs[-1]
    head = np.stack([state.head[c] for c in class_ids])
    logits = emb @ head.T
    if single:
        return logits[0], emb[0]
    return logits, emb


def add_head_rows(state: ModelState, class_ids):
    """Zero-initialized head rows for classes not seen before."""
    for c in class_ids:
        c = int(c)
        if c in state.head:
            raise LabelError(f"head row for class {c} already exists")
        state.head[c] = np.zeros(state.config.out_dim)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_gradients(state: ModelState, x, labels, class_ids) -> tuple:
    """Mean cross-entropy over the batch and exact analytic gradients.

    Returns (loss, head_grad, layer_grads) where head_grad rows align with
    class_ids and layer_grads[i] maps each trainable array name of layer i to
    its gradient (empty dict for frozen or unadapted layers).
    """
    class_ids = [int(c) for c in class_ids]
    if len(set(class_ids)) != len(class_ids):
        raise ConfigError("class_ids contains duplicates")
    pos = {c: j for j, c in enumerate(class_ids)}
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise LabelError("labels must be a non-empty 1-D sequence")
    try:
        idx = np.array([pos[int(l)] for l in labels])
    except KeyError as bad:
        raise LabelError(f"label {bad} not among class_ids {class_ids}") from None

    x2, _ = _as_batch(x, state.config.in_dim)
    if x2.shape[0] != labels.size:
        raise ShapeError(f"{x2.shape[0]} samples but {labels.size} labels")
    missing = [c for c in class_ids if c not in state.head]
    if missing:
        raise LabelError(f"no head rows for classes {missing}")

    weights = [materialize(l) for l in state.layers]
    hs, zs = _forward_cached(weights, x2)
    emb = hs[-1]
    head = np.stack([state.head[c] for c in class_ids])
    logits = emb @ head.T
    probs = softmax(logits)
    b = x2.shape[0]
    picked = np.clip(probs[np.arange(b), idx], 1e-300, None)
    loss = float(-np.mean(np.log(picked)))

    dlogits = probs.copy()
    dlogits[np.arange(b), idx] -= 1.0
    dlogits /= b
    head_grad = dlogits.T @ emb
    dh = dlogits @ head

    last = len(weights) - 1
    layer_grads = [None] * len(weights)
    for i in range(last, -1, -1):
        dz = dh if i == last else dh * (zs[i] > 0.0)
        g = hs[i].T @ dz
        layer_grads[i] = _project_weight_gradient(state.layers[i], g)
        if i > 0:
            dh = dz @ weights[i].T
    return loss, head_grad, layer_grads


def _project_weight_gradient(layer, g) -> dict:
    """Chain the dense weight gradient into the layer's trainable arrays."""
    if isinstance(layer, SvfAdapterStack):
        r = layer.active_rank
        u = layer.base.u[:, :r]
        v_t = layer.base.v_t[:r, :]
        # per-direction gradient u_k . g . v_k, all k at once
        return {"shift": np.sum((u.T @ g) * v_t, axis=1)}
    if isinstance(layer, LoraAdapterStack):
        a, b = layer.current_pair
        return {"a": g @ b.T, "b": a.T @ g}
    if isinstance(layer, FullFtWeights):
        return {"w": g}
    return {}


def shift_gradient(base, weight_gradient, rank=None) -> np.ndarray:
    """Projection of a dense weight gradient onto the singular directions."""
    g = np.asarray(weight_gradient, dtype=np.float64)
    if g.shape != base.source_shape:
        raise ShapeError(f"gradient shape {g.shape} != {base.source_shape}")
    r = len(base.sigma) if rank is None else int(rank)
    u = base.u[:, :r]
    v_t = base.v_t[:r, :]
    return np.sum((u.T @ g) * v_t, axis=1)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: dict):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(state: AdamState, params: dict, grads: dict, lr: float):
    """One bias-corrected Adam update, in place on the parameter arrays."""
    if set(params) != set(state.m):
        raise ConfigError("params do not match optimizer state")
    state.t += 1
    t = state.t
    for name in sorted(params):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / (1.0 - ADAM_BETA1**t)
        v_hat = state.v[name] / (1.0 - ADAM_BETA2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------- classifier


def compute_prototypes(state: ModelState, x, labels, class_ids=None) -> dict:
    """Mean embedding per class; only classes present in the data appear."""
    labels = np.asarray(labels)
    x2, _ = _as_batch(x, state.config.in_dim)
    if labels.ndim != 1 or labels.size != x2.shape[0]:
        raise LabelError("labels must align with samples")
    if labels.size == 0:
        raise InvalidInputError("no samples")
    emb = embed(state, x2)
    present = [int(c) for c in np.unique(labels)]
    wanted = present if class_ids is None else [int(c) for c in class_ids]
    out = {}
    for c in wanted:
        mask = labels == c
        if not mask.any():
            raise LabelError(f"class {c} has no samples")
        out[c] = emb[mask].mean(axis=0)
    return out


def install_prototypes(state: ModelState, protos: dict):
    """Write prototypes into the classifier and over the head rows."""
    for c, p in protos.items():
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (state.config.out_dim,):
            raise ShapeError(f"prototype for class {c} has shape {p.shape}")
        state.classifier.prototypes[int(c)] = p.copy()
        state.head[int(c)] = p.copy()


def _unit(v):
    n = np.linalg.norm(v)
    return v if n == 0.0 else v / n


def ncm_classify(classifier: NcmClassifier, embedding):
    """Nearest prototype by Euclidean distance after L2 normalization.

    Ties go to the smallest class id. Accepts a single embedding or a batch.
    """
    if not classifier.prototypes:
        raise ConfigError("classifier has no prototypes")
    emb = np.asarray(embedding, dtype=np.float64)
    single = emb.ndim == 1
    if single:
        emb = emb[None, :]
    cids = sorted(classifier.prototypes)
    protos = np.stack([_unit(classifier.prototypes[c]) for c in cids])
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    unit = emb / np.where(norms == 0.0, 1.0, norms)  # zero stays zero
    d2 = ((unit[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    best = np.array(cids)[np.argmin(d2, axis=1)]  # argmin takes first == smallest id
    return int(best[0]) if single else best


# ---------------------------------------------------------------- checkpoints


def model_to_json(state: ModelState) -> dict:
    return {
        "config": {
            "layer_shapes": [list(s) for s in state.config.layer_shapes],
            "adapt_mask": list(state.config.adapt_mask),
            "adapter_kind": state.config.adapter_kind,
            "rank": state.config.rank,
        },
        "layers": [adapter_to_json(l) for l in state.layers],
        "head": {str(c): v.tolist() for c, v in sorted(state.head.items())},
        "prototypes": {
            str(c): v.tolist() for c, v in sorted(state.classifier.prototypes.items())
        },
    }


def model_from_json(doc: dict, base_weights) -> ModelState:
    cfg = doc["config"]
    config = BackboneConfig(
        layer_shapes=tuple(tuple(s) for s in cfg["layer_shapes"]),
        adapt_mask=tuple(cfg["adapt_mask"]),
        adapter_kind=cfg["adapter_kind"],
        rank=cfg["rank"],
    )
    if len(base_weights) != len(doc["layers"]):
        raise ConfigError("base weight count does not match checkpoint")
    layers = [
        adapter_from_json(ld, w) for ld, w in zip(doc["layers"], base_weights)
    ]
    state = ModelState(config=config, layers=layers)
    state.head = {int(c): np.asarray(v, dtype=np.float64) for c, v in doc["head"].items()}
    state.classifier.prototypes = {
        int(c): np.asarray(v, dtype=np.float64) for c, v in doc["prototypes"].items()
    }
    return state


def trainable_params(state: ModelState) -> dict:
    """Flat name -> live array map over all adapted layers (head excluded)."""
    out = {}
    for i, layer in enumerate(state.layers):
        for key, arr in trainable_arrays(layer).items():
            out[f"layer{i}.{key}"] = arr
    return out


def flatten_layer_grads(layer_grads) -> dict:
    """Flat name -> gradient map matching trainable_params naming."""
    out = {}
    for i, grads in enumerate(layer_grads):
        for key, g in (grads or {}).items():
            out[f"layer{i}.{key}"] = g
    return out


def session_head_matrix(state: ModelState, class_ids) -> np.ndarray:
    """Stack the given head rows into one matrix and rebind the rows as views.

    In-place optimizer updates on the matrix are then visible through
    state.head immediately, which session training relies on.
    """
    class_ids = [int(c) for c in class_ids]
    missing = [c for c in class_ids if c not in state.head]
    if missing:
        raise LabelError(f"no head rows for classes {missing}")
    mat = np.stack([state.head[c] for c in class_ids]).astype(np.float64)
    for j, c in enumerate(class_ids):
        state.head[c] = mat[j]
    return mat
