"""Tests for the backbone, gradients, Adam, and the prototype classifier."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from svf.errors import ConfigError, InvalidInputError, LabelError, ShapeError
from svf.linalg import svd
from svf.model import (
    ADAM_EPS,
    AdamState,
    BackboneConfig,
    ModelState,
    NcmClassifier,
    adam_step,
    add_head_rows,
    build_model,
    compute_prototypes,
    embed,
    flatten_layer_grads,
    forward,
    install_prototypes,
    loss_and_gradients,
    model_from_json,
    model_to_json,
    ncm_classify,
    random_base_weights,
    session_head_matrix,
    shift_gradient,
    softmax,
    trainable_params,
)


def identity_model(dim=2, layers=2):
    config = BackboneConfig(
        layer_shapes=tuple((dim, dim) for _ in range(layers)),
        adapt_mask=tuple(False for _ in range(layers)),
        adapter_kind="frozen",
    )
    return build_model(config, [np.eye(dim) for _ in range(layers)])


def naive_forward(weights, x):
    """Oracle: scalar-loop forward pass, independent of the vectorized path."""
    h = [float(v) for v in x]
    for li, w in enumerate(weights):
        m, n = w.shape
        z = [sum(h[i] * w[i, j] for i in range(m)) for j in range(n)]
        if li < len(weights) - 1:
            z = [v if v > 0.0 else 0.0 for v in z]
        h = z
    return np.array(h)


# ---------------------------------------------------------------- config


def test_config_composition_checked():
    with pytest.raises(ConfigError):
        BackboneConfig(layer_shapes=((4, 3), (4, 2)), adapt_mask=(True, True))
    with pytest.raises(ConfigError):
        BackboneConfig(layer_shapes=((4, 3),), adapt_mask=(True, False))
    with pytest.raises(ConfigError):
        BackboneConfig(layer_shapes=(), adapt_mask=())
    with pytest.raises(ConfigError):
        BackboneConfig(layer_shapes=((4, 3),), adapt_mask=(True,), adapter_kind="x")


def test_default_config_composes():
    config = BackboneConfig.default()
    assert config.in_dim == 64 and config.out_dim == 32
    for (_, n), (m, _) in zip(config.layer_shapes, config.layer_shapes[1:]):
        assert n == m


# ---------------------------------------------------------------- forward


def test_identity_backbone_hand_value():
    state = identity_model()
    add_head_rows(state, [0, 1])
    state.head[0][:] = [1.0, 0.0]
    state.head[1][:] = [0.0, 1.0]
    logits, emb = forward(state, np.array([1.0, 0.0]), [0, 1])
    npt.assert_array_equal(emb, [1.0, 0.0])
    assert int(np.argmax(logits)) == 0


def test_zero_input_uniform_softmax():
    state = identity_model(dim=3)
    add_head_rows(state, [0, 1, 2])
    logits, emb = forward(state, np.zeros(3), [0, 1, 2])
    npt.assert_array_equal(emb, np.zeros(3))
    npt.assert_allclose(softmax(logits), np.full(3, 1.0 / 3.0), atol=1e-15)


def test_forward_matches_naive_oracle():
    for s in range(12):
        rng = np.random.default_rng([210, s])
        depth = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(2, 7, size=depth + 1)]
        shapes = tuple((dims[i], dims[i + 1]) for i in range(depth))
        config = BackboneConfig(
            layer_shapes=shapes, adapt_mask=(True,) * depth, adapter_kind="svf"
        )
        state = build_model(config, [rng.normal(size=sh) for sh in shapes])
        for layer in state.layers:
            layer.current_shift[:] = rng.normal(size=layer.active_rank)
        x = rng.normal(size=dims[0])
        got = embed(state, x)
        from svf.adapters import materialize

        expect = naive_forward([materialize(l) for l in state.layers], x)
        npt.assert_allclose(got, expect, atol=1e-12)


def test_forward_determinism_and_batch_consistency():
    rng = np.random.default_rng(5)
    config = BackboneConfig.default()
    state = build_model(config, random_base_weights(config, seed=1))
    add_head_rows(state, [0, 1, 2])
    x = rng.normal(size=(4, 64))
    l1, e1 = forward(state, x, [0, 1, 2])
    l2, e2 = forward(state, x, [0, 1, 2])
    assert l1.tobytes() == l2.tobytes() and e1.tobytes() == e2.tobytes()
    # row i of the batch matches the single-sample pass (different GEMM path,
    # so ULP-level agreement rather than bitwise)
    ls, es = forward(state, x[2], [0, 1, 2])
    npt.assert_allclose(ls, l1[2], atol=1e-12)
    npt.assert_allclose(es, e1[2], atol=1e-12)


def test_forward_errors():
    state = identity_model()
    add_head_rows(state, [0])
    with pytest.raises(ShapeError):
        forward(state, np.zeros(3), [0])
    with pytest.raises(LabelError):
        forward(state, np.zeros(2), [0, 5])
    with pytest.raises(ConfigError):
        forward(state, np.zeros(2), [])
    with pytest.raises(InvalidInputError):
        forward(state, np.array([np.nan, 0.0]), [0])


# ---------------------------------------------------------------- gradients


def test_shift_gradient_diagonal_extraction():
    f = svd(np.eye(2))
    npt.assert_allclose(
        shift_gradient(f, np.array([[1.0, 2.0], [3.0, 4.0]])), [1.0, 4.0], atol=1e-12
    )


def test_shift_gradient_shape_check():
    f = svd(np.eye(2))
    with pytest.raises(ShapeError):
        shift_gradient(f, np.zeros((3, 3)))


def test_saturated_batch_zero_gradient():
    state = identity_model()
    add_head_rows(state, [0, 1])
    state.head[0][:] = [1000.0, 0.0]
    state.head[1][:] = [0.0, 1000.0]
    loss, head_grad, layer_grads = loss_and_gradients(
        state, np.array([[1.0, 0.0]]), [0], [0, 1]
    )
    assert loss <= 1e-12
    assert np.abs(head_grad).max() <= 1e-12
    assert all(g == {} for g in layer_grads)


def test_label_validation():
    state = identity_model()
    add_head_rows(state, [0, 1])
    x = np.array([[1.0, 0.0]])
    with pytest.raises(LabelError):
        loss_and_gradients(state, x, [7], [0, 1])
    with pytest.raises(LabelError):
        loss_and_gradients(state, x, [], [0, 1])
    with pytest.raises(ConfigError):
        loss_and_gradients(state, x, [0], [0, 0])
    with pytest.raises(ShapeError):
        loss_and_gradients(state, x, [0, 1], [0, 1])


def fd_instance(s):
    """Random small model, batch, and class list with safe ramp margins.

    Returns None when any hidden pre-activation sits too close to the ramp
    kink for central differences to be trustworthy.
    """
    rng = np.random.default_rng([220, s])
    kind = ("svf", "lora", "full")[s % 3]
    depth = int(rng.integers(1, 3))
    dims = [int(d) for d in rng.integers(3, 9, size=depth + 1)]
    shapes = tuple((dims[i], dims[i + 1]) for i in range(depth))
    mask = tuple(bool(rng.integers(0, 2)) or depth == 1 for _ in range(depth))
    rank = 2 if kind != "full" else None
    if kind == "svf":
        rank = min([2] + [min(sh) for sh in shapes])
    config = BackboneConfig(
        layer_shapes=shapes, adapt_mask=mask, adapter_kind=kind, rank=rank
    )
    state = build_model(config, [rng.normal(size=sh) for sh in shapes], seed=s)
    for layer, adapted in zip(state.layers, mask):
        if adapted and kind == "svf":
            layer.current_shift[:] = 0.1 * rng.normal(size=layer.active_rank)
        elif adapted and kind == "lora":
            a, b = layer.current_pair
            a += 0.1 * rng.normal(size=a.shape)
            b += 0.1 * rng.normal(size=b.shape)
    n_classes = int(rng.integers(2, 5))
    class_ids = list(range(n_classes))
    add_head_rows(state, class_ids)
    head_mat = session_head_matrix(state, class_ids)
    head_mat += 0.3 * rng.normal(size=head_mat.shape)
    batch = int(rng.integers(1, 9))
    x = rng.normal(size=(batch, dims[0]))
    labels = rng.integers(0, n_classes, size=batch)
    # ramp-kink margin check on every hidden pre-activation
    from svf.adapters import materialize

    h = x
    for i, layer in enumerate(state.layers[:-1]):
        z = h @ materialize(layer)
        if np.abs(z).min() < 1e-3:
            return None
        h = np.maximum(z, 0.0)
    return state, head_mat, x, labels, class_ids


def test_gradients_match_finite_differences():
    checked = 0
    s = 0
    while checked < 10:
        inst = fd_instance(s)
        s += 1
        if inst is None:
            continue
        state, head_mat, x, labels, class_ids = inst
        loss, head_grad, layer_grads = loss_and_gradients(state, x, labels, class_ids)
        params = dict(trainable_params(state))
        params["head"] = head_mat
        grads = flatten_layer_grads(layer_grads)
        grads["head"] = head_grad
        h = 1e-5
        for name in sorted(params):
            arr = params[name]
            an = grads[name]
            for j in range(arr.size):
                keep = arr.flat[j]
                arr.flat[j] = keep + h
                up, _, _ = loss_and_gradients(state, x, labels, class_ids)
                arr.flat[j] = keep - h
                dn, _, _ = loss_and_gradients(state, x, labels, class_ids)
                arr.flat[j] = keep
                fd = (up - dn) / (2.0 * h)
                rel = abs(an.flat[j] - fd) / max(abs(an.flat[j]), abs(fd), 1e-6)
                assert rel < 1e-5, f"seed {s - 1} {name}[{j}]: {an.flat[j]} vs {fd}"
        checked += 1


def test_gradient_sparsity_frozen_state_bit_identical():
    rng = np.random.default_rng(17)
    config = BackboneConfig(
        layer_shapes=((6, 5), (5, 4)),
        adapt_mask=(True, False),
        adapter_kind="svf",
        rank=3,
    )
    state = build_model(config, [rng.normal(size=(6, 5)), rng.normal(size=(5, 4))])
    state.layers[0].frozen_shifts.append(
        np.asarray(rng.normal(size=3))
    )
    class_ids = [0, 1, 2]
    add_head_rows(state, class_ids)
    head_mat = session_head_matrix(state, class_ids)
    frozen_before = (
        state.layers[0].base.u.tobytes(),
        state.layers[0].base.sigma.tobytes(),
        state.layers[0].base.v_t.tobytes(),
        state.layers[0].base_w.tobytes(),
        state.layers[0].frozen_shifts[0].tobytes(),
        state.layers[1].w.tobytes(),
    )
    params = dict(trainable_params(state))
    params["head"] = head_mat
    opt = AdamState.for_params(params)
    for step in range(5):
        x = np.random.default_rng([18, step]).normal(size=(4, 6))
        labels = np.random.default_rng([19, step]).integers(0, 3, size=4)
        loss, head_grad, layer_grads = loss_and_gradients(state, x, labels, class_ids)
        grads = flatten_layer_grads(layer_grads)
        grads["head"] = head_grad
        adam_step(opt, params, grads, lr=5e-4)
    frozen_after = (
        state.layers[0].base.u.tobytes(),
        state.layers[0].base.sigma.tobytes(),
        state.layers[0].base.v_t.tobytes(),
        state.layers[0].base_w.tobytes(),
        state.layers[0].frozen_shifts[0].tobytes(),
        state.layers[1].w.tobytes(),
    )
    assert frozen_before == frozen_after
    assert np.any(state.layers[0].current_shift != 0.0)  # training did move


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_no_motion():
    p = np.array([1.0, -2.0, 3.0])
    params = {"p": p}
    opt = AdamState.for_params(params)
    before = p.tobytes()
    adam_step(opt, params, {"p": np.zeros(3)}, lr=0.1)
    assert p.tobytes() == before


def test_adam_first_step_hand_formula():
    g = np.array([0.5, -2.0, 1e-3])
    p = np.zeros(3)
    params = {"p": p}
    opt = AdamState.for_params(params)
    adam_step(opt, params, {"p": g}, lr=5e-4)
    expect = -5e-4 * g / (np.abs(g) + ADAM_EPS)
    npt.assert_allclose(p, expect, rtol=0, atol=1e-18)


def test_adam_constant_gradient_displacement_approaches_lr():
    g = np.array([3.0])
    p = np.array([0.0])
    params = {"p": p}
    opt = AdamState.for_params(params)
    lr = 1e-2
    for _ in range(50):
        before = p.copy()
        adam_step(opt, params, {"p": g}, lr=lr)
    disp = abs(float(p[0] - before[0]))
    assert abs(disp - lr) <= 1e-7


def test_adam_state_mismatch():
    params = {"p": np.zeros(2)}
    opt = AdamState.for_params(params)
    with pytest.raises(ConfigError):
        adam_step(opt, {"q": np.zeros(2)}, {"q": np.zeros(2)}, lr=0.1)
    with pytest.raises(ShapeError):
        adam_step(opt, params, {"p": np.zeros(3)}, lr=0.1)


# ---------------------------------------------------------------- prototypes


def test_prototype_mean_hand_value():
    state = identity_model()
    protos = compute_prototypes(
        state, np.array([[1.0, 1.0], [3.0, 3.0]]), np.array([0, 0])
    )
    npt.assert_allclose(protos[0], [2.0, 2.0], atol=1e-15)


def test_prototype_single_sample_is_embedding():
    state = identity_model()
    x = np.array([[0.7, -0.2]])
    protos = compute_prototypes(state, x, np.array([4]))
    npt.assert_array_equal(protos[4], embed(state, x[0]))


def test_prototype_five_shot_identity_mean():
    # single layer: no ramp in the way, embedding is exactly the input
    state = identity_model(dim=3, layers=1)
    rng = np.random.default_rng(23)
    x = rng.normal(size=(5, 3))
    protos = compute_prototypes(state, x, np.full(5, 2))
    npt.assert_allclose(protos[2], x.mean(axis=0), atol=1e-12)


def test_prototype_empty_class_error():
    state = identity_model()
    with pytest.raises(LabelError):
        compute_prototypes(
            state, np.array([[1.0, 0.0]]), np.array([0]), class_ids=[0, 1]
        )
    with pytest.raises(LabelError):
        compute_prototypes(state, np.zeros((1, 2)), np.array([0, 1]))


def test_install_prototypes_overwrites_head():
    state = identity_model()
    add_head_rows(state, [0])
    install_prototypes(state, {0: np.array([5.0, 6.0])})
    npt.assert_array_equal(state.head[0], [5.0, 6.0])
    npt.assert_array_equal(state.classifier.prototypes[0], [5.0, 6.0])
    with pytest.raises(ShapeError):
        install_prototypes(state, {1: np.zeros(3)})


# ---------------------------------------------------------------- ncm


def test_ncm_hand_values():
    clf = NcmClassifier({0: np.array([0.0, 1.0]), 1: np.array([1.0, 0.0])})
    assert ncm_classify(clf, np.array([0.1, 0.9])) == 0
    assert ncm_classify(clf, np.array([1.0, 0.0])) == 1


def test_ncm_tie_smallest_class_id():
    clf = NcmClassifier({7: np.array([1.0, 0.0]), 3: np.array([0.0, 1.0])})
    assert ncm_classify(clf, np.array([1.0, 1.0])) == 3


def test_ncm_scale_invariance():
    rng = np.random.default_rng(29)
    clf = NcmClassifier({c: rng.normal(size=6) for c in range(5)})
    for _ in range(20):
        q = rng.normal(size=6)
        assert ncm_classify(clf, q) == ncm_classify(clf, 3.7 * q)


def test_ncm_batch_and_empty():
    clf = NcmClassifier({0: np.array([0.0, 1.0]), 1: np.array([1.0, 0.0])})
    out = ncm_classify(clf, np.array([[0.1, 0.9], [0.9, 0.1]]))
    npt.assert_array_equal(out, [0, 1])
    with pytest.raises(ConfigError):
        ncm_classify(NcmClassifier(), np.zeros(2))


def test_ncm_zero_embedding_deterministic():
    clf = NcmClassifier({0: np.array([0.0, 1.0]), 1: np.array([1.0, 0.0])})
    assert ncm_classify(clf, np.zeros(2)) == 0  # all ties -> smallest id


# ---------------------------------------------------------------- plumbing


def test_session_head_matrix_views_are_live():
    state = identity_model()
    add_head_rows(state, [0, 1])
    mat = session_head_matrix(state, [0, 1])
    mat[0, 0] = 42.0
    assert state.head[0][0] == 42.0


def test_model_checkpoint_round_trip():
    rng = np.random.default_rng(31)
    config = BackboneConfig(
        layer_shapes=((5, 4), (4, 3)),
        adapt_mask=(True, True),
        adapter_kind="svf",
        rank=2,
    )
    base = [rng.normal(size=(5, 4)), rng.normal(size=(4, 3))]
    state = build_model(config, base)
    for layer in state.layers:
        layer.current_shift[:] = rng.normal(size=2)
    add_head_rows(state, [0, 1])
    install_prototypes(state, {0: rng.normal(size=3), 1: rng.normal(size=3)})
    doc = json.loads(json.dumps(model_to_json(state)))
    back = model_from_json(doc, base)
    x = rng.normal(size=(3, 5))
    l1, e1 = forward(state, x, [0, 1])
    l2, e2 = forward(back, x, [0, 1])
    assert l1.tobytes() == l2.tobytes() and e1.tobytes() == e2.tobytes()
    assert sorted(back.classifier.prototypes) == [0, 1]
