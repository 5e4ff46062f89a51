import itertools

import numpy as np
import pytest

from conftest import central_diff, rel_err
from crisp.errors import ConfigError, ShapeError
from crisp.mimicry import FactorBank, LayerGroup
from crisp.numerics import cross_entropy
from crisp.recombinator import ACTIVATIONS, PLACEMENTS, FactorizationConfig, GateConfig, invert_activation
from crisp.toy import SyntheticTask, ToyMLP, make_task, train_classifier, with_backend

COMBOS = list(itertools.product(PLACEMENTS, ACTIVATIONS))


def crisp_model(gate_cfg=GateConfig(), dims=(6, 8, 8, 8, 3), r=4, s=4, seed=0, dtype=np.float64):
    """Random factorised model with nonzero biases so no hidden unit sits on the ReLU kink."""
    rng = np.random.default_rng(seed)
    d = dims[1]
    fc0 = LayerGroup("first", "first", ["fc0"], (d, dims[0]), FactorizationConfig(r, s, dims[0], d))
    fc0.basis = rng.standard_normal(fc0.cfg.basis_shape) * 0.5
    fc0.mixers["fc0"] = rng.standard_normal(fc0.cfg.mixer_shape)
    fc0.biases["fc0"] = rng.uniform(0.2, 0.5, d) * rng.choice([-1, 1], d)
    mid = LayerGroup("mid", "mid", ["fc1", "fc2"], (d, d), FactorizationConfig(r, s, d, d))
    mid.basis = rng.standard_normal(mid.cfg.basis_shape) * 0.5
    for n in mid.members:
        mid.mixers[n] = rng.standard_normal(mid.cfg.mixer_shape)
        mid.biases[n] = rng.uniform(0.2, 0.5, d) * rng.choice([-1, 1], d)
    dense = {"head.weight": rng.standard_normal((dims[-1], d)), "head.bias": rng.standard_normal(dims[-1])}
    bank = FactorBank([fc0, mid], gate_cfg, dense, {"layer_order": ["fc0", "fc1", "fc2", "head"]})
    return ToyMLP.from_bank(bank).astype(dtype)


def fd_check(model, x, y, mode="full", train_head=True, train_bias=True, tol=1e-3, h=1e-6):
    def loss():
        return cross_entropy(model.forward(x)[0], y)[0]

    logits, _ = model.forward(x)
    grads = model.backward(cross_entropy(logits, y)[1], mode=mode, train_head=train_head, train_bias=train_bias)
    params = model.parameters(mode, train_head, train_bias)
    assert set(grads) == set(params)
    for k, p in params.items():
        assert rel_err(grads[k], central_diff(loss, p, h)) < tol, k


# -- forward -------------------------------------------------------------------


def test_zero_weight_model_outputs_bias():
    m = ToyMLP.dense([4, 5, 3])
    for layer in m.layers:
        layer.w[...] = 0
    m.head.bias[...] = [1, 2, 3]
    logits, feats = m.forward(np.ones((2, 4), np.float32))
    assert np.array_equal(logits, [[1, 2, 3], [1, 2, 3]]) and len(feats) == 1


def test_forward_permutation_equivariant(rng):
    m = crisp_model(dtype=np.float32)
    x = rng.standard_normal((7, 6)).astype(np.float32)
    perm = rng.permutation(7)
    assert np.array_equal(m.forward(x[perm])[0], m.forward(x)[0][perm])


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        ToyMLP.dense([4, 3]).forward(np.ones((2, 5)))


def test_exact_factorisation_matches_dense_logits(rng):
    dense = ToyMLP.dense([8, 8, 8, 3], seed=3)
    for layer in dense.layers:
        layer.bias[...] = rng.standard_normal(layer.bias.shape)
    ck = dense.to_checkpoint()
    groups = []
    # s = d_in makes the reshaped weight the weight itself; gate(A) = I gives W = B
    eye_pre, _ = invert_activation(np.eye(8), "silu_gate")
    for name in ("fc0", "fc1"):
        g = LayerGroup(name, name, [name], (8, 8), FactorizationConfig(8, 8, 8, 8))
        g.basis = ck[f"{name}.weight"].astype(np.float64)
        g.mixers[name] = eye_pre
        g.biases[name] = ck[f"{name}.bias"]
        groups.append(g)
    bank = FactorBank(groups, GateConfig(), {"head.weight": ck["head.weight"], "head.bias": ck["head.bias"]},
                      {"layer_order": ["fc0", "fc1", "head"]})
    crisp = ToyMLP.from_bank(bank)
    x = rng.standard_normal((10, 8)).astype(np.float32)
    assert np.max(np.abs(crisp.forward(x)[0] - dense.forward(x)[0])) < 1e-5


# -- backward ------------------------------------------------------------------


def test_backward_requires_forward():
    with pytest.raises(ConfigError):
        ToyMLP.dense([3, 2]).backward(np.zeros((1, 2)))


def test_zero_upstream_gives_zero_grads(rng):
    m = crisp_model()
    m.forward(rng.standard_normal((4, 6)))
    grads = m.backward(np.zeros((4, 3)))
    assert grads and all(not np.any(g) for g in grads.values())


@pytest.mark.parametrize("placement,act", COMBOS)
def test_full_model_gradients_match_fd(placement, act):
    rng = np.random.default_rng(2)
    m = crisp_model(GateConfig(placement, act))
    fd_check(m, rng.standard_normal((5, 6)), rng.integers(0, 3, 5))


@pytest.mark.parametrize("backend", ["dense", "lora", "svd", "recast"])
def test_baseline_backend_gradients_match_fd(backend):
    rng = np.random.default_rng(4)
    base = ToyMLP.dense([6, 8, 8, 3], seed=1)
    for layer in base.layers:
        layer.bias[...] = rng.uniform(0.2, 0.5, layer.bias.shape)
    m = with_backend(base, backend, rank=3, k=2).astype(np.float64)
    if backend == "lora":
        for layer in m.layers[:-1]:
            layer.b[...] = rng.standard_normal(layer.b.shape) * 0.1
    if backend == "recast":
        for layer in m.layers[:-1]:
            layer.coeffs[...] = rng.standard_normal(layer.coeffs.shape)
    x, y = rng.standard_normal((5, 6)), rng.integers(0, 3, 5)
    fd_check(m, x, y, mode="full")
    fd_check(m, x, y, mode="adapt")


def test_adapt_mode_omits_bases(rng):
    m = crisp_model()
    m.forward(rng.standard_normal((3, 6)))
    full = m.backward(np.ones((3, 3)), mode="full")
    adapt = m.backward(np.ones((3, 3)), mode="adapt", train_head=False)
    assert any(k.endswith(".basis") for k in full)
    assert not any(k.endswith(".basis") for k in adapt)
    assert sorted(adapt) == ["layers.fc0.mixer", "layers.fc1.mixer", "layers.fc2.mixer"]


def test_feature_and_weight_gradient_hooks(rng):
    m = crisp_model()
    x = rng.standard_normal((4, 6))
    target = [rng.standard_normal((4, 8)) for _ in range(3)]
    w_target = {n: rng.standard_normal((8, 8)) for n in ("fc1", "fc2")}

    def loss():
        _, feats = m.forward(x)
        val = sum(float(((f - t) ** 2).sum()) for f, t in zip(feats, target))
        ws = m.bank.weights()
        return val + sum(float(((ws[n] - w_target[n]) ** 2).sum()) for n in w_target)

    _, feats = m.forward(x)
    ws = m.bank.weights()
    grads = m.backward(np.zeros((4, 3)), feature_grads=[2 * (f - t) for f, t in zip(feats, target)],
                       weight_grads={n: 2 * (ws[n] - w_target[n]) for n in w_target}, train_head=False)
    for k, p in m.parameters("full", train_head=False).items():
        assert rel_err(grads[k], central_diff(loss, p)) < 1e-4, k


# -- model plumbing --------------------------------------------------------------


def test_trainable_counts():
    m = crisp_model()
    assert m.trainable_count("adapt", train_head=False) == 3 * 16
    assert m.trainable_count("adapt", train_head=True) == 3 * 16 + 3 * 8 + 3


def test_snapshot_restore(rng):
    m = crisp_model()
    snap = m.snapshot()
    for p in m.all_parameters().values():
        p += 1
    m.restore(snap)
    assert all(np.array_equal(p, snap[k]) for k, p in m.all_parameters().items())


def test_from_bank_requires_order():
    bank = crisp_model().bank
    bank.meta = {}
    with pytest.raises(ConfigError):
        ToyMLP.from_bank(bank)


def test_with_backend_preserves_function(rng):
    base = ToyMLP.dense([6, 8, 8, 3], seed=2)
    x = rng.standard_normal((5, 6)).astype(np.float32)
    for backend in ("dense", "lora", "recast"):
        assert np.allclose(with_backend(base, backend).forward(x)[0], base.forward(x)[0], atol=1e-5)
    svd_full = with_backend(base, "svd", rank=8)
    assert np.allclose(svd_full.forward(x)[0], base.forward(x)[0], atol=1e-4)
    with pytest.raises(ConfigError):
        with_backend(base, "crisp")


# -- tasks -------------------------------------------------------------------------


def test_make_task_deterministic_and_disjoint():
    spec = SyntheticTask(seed=3)
    a, b = make_task(spec), make_task(spec)
    for f in ("x_train", "y_train", "x_val", "y_val", "x_test", "y_test"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert len(a.x_train) == 512 and len(a.x_val) == 256 and len(a.x_test) == 512
    rows = {r.tobytes() for r in a.x_train}
    assert not rows & {r.tobytes() for r in a.x_test}


def test_identity_shift_equals_source():
    spec = SyntheticTask(generator="concentric_rings", seed=1)
    a, b = make_task(spec), make_task(spec.shifted(0.0, 0))
    assert a.x_train.tobytes() == b.x_train.tobytes() and a.y_train.tobytes() == b.y_train.tobytes()
    c = make_task(spec.shifted(0.5, 1))
    assert not np.array_equal(a.x_train, c.x_train)
    assert np.array_equal((a.y_train + 1) % spec.n_classes, c.y_train)


def test_task_validation():
    with pytest.raises(ConfigError):
        SyntheticTask(generator="spirals")
    with pytest.raises(ConfigError):
        SyntheticTask(n_classes=1)


def test_noiseless_blobs_fit_perfectly():
    data = make_task(SyntheticTask(noise=0.0, seed=0))
    m = ToyMLP.dense([16, 32, 4], seed=0)
    train_classifier(m, data.x_train, data.y_train, epochs=30)
    assert m.accuracy(data.x_train, data.y_train) == 1.0


def test_dense_baseline_gate():
    data = make_task(SyntheticTask(noise=0.5, n_classes=4, seed=0))
    m = ToyMLP.dense([16, 32, 32, 32, 4], seed=0)
    train_classifier(m, data.x_train, data.y_train, epochs=30)
    assert m.accuracy(data.x_test, data.y_test) >= 0.95


def test_training_is_backend_agnostic_in_batch_order():
    data = make_task(SyntheticTask(seed=0, n_train=64))
    seen = []
    for backend in ("dense", "lora"):
        m = with_backend(ToyMLP.dense([16, 8, 4]), backend)
        orig = m.forward
        order = []

        def spy(x, _orig=orig, _order=order):
            _order.append(x.tobytes())
            return _orig(x)

        m.forward = spy
        train_classifier(m, data.x_train, data.y_train, epochs=2, mode="adapt")
        seen.append(order)
    assert seen[0] == seen[1]
