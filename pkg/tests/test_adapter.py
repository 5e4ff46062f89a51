import numpy as np
import pytest
from sklearn.base import clone

from conftest import central_diff, rel_err
from crisp.adapter import AdaptConfig, MixerAdapter, adapt, evaluate, mixers_of, trainable_budget
from crisp.errors import ConfigError
from crisp.mimicry import FactorBank, LayerGroup
from crisp.numerics import cross_entropy
from crisp.recombinator import FactorizationConfig, GateConfig, param_count
from crisp.toy import Dataset, SyntheticTask, ToyMLP, make_task


def chain_bank(rng, n_layers, d, r, s, n_classes=2, group_size=3):
    names = [f"fc{i}" for i in range(n_layers)]
    groups = []
    for j in range(0, n_layers, group_size):
        cfg = FactorizationConfig(r, s, d, d)
        g = LayerGroup(f"mid/{j}", "mid", names[j : j + group_size], (d, d), cfg)
        g.basis = (rng.standard_normal(cfg.basis_shape) / np.sqrt(r)).astype(np.float32)
        for n in g.members:
            g.mixers[n] = rng.standard_normal(cfg.mixer_shape).astype(np.float32)
            g.biases[n] = np.zeros(d, np.float32)
        groups.append(g)
    dense = {"head.weight": (rng.standard_normal((n_classes, d)) * 0.3).astype(np.float32),
             "head.bias": np.zeros(n_classes, np.float32)}
    return FactorBank(groups, GateConfig(), dense, {"layer_order": names + ["head"]})


def toy_data(rng, d=8, n=64, classes=2):
    x = rng.standard_normal((3 * n, d)).astype(np.float32)
    y = (x[:, 0] > 0).astype(np.int64) % classes
    return Dataset(x[:n], y[:n], x[n : 2 * n], y[n : 2 * n], x[2 * n :], y[2 * n :])


def basis_bytes(bank):
    return [g.basis.tobytes() for g in bank.groups]


def test_config_validation():
    with pytest.raises(ConfigError):
        AdaptConfig(lr=-1)
    with pytest.raises(ConfigError):
        AdaptConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        AdaptConfig(patience=0)


def test_trainable_budget_examples(rng):
    bank = chain_bank(rng, 12, 8, 12, 16)
    model = ToyMLP.from_bank(bank)
    assert trainable_budget(model, AdaptConfig(train_head=False)) == 12 * 192 == 2304
    assert trainable_budget(model, AdaptConfig(train_head=True)) == 2304 + 2 * 8 + 2
    assert param_count(FactorizationConfig(12, 16, 8, 8), 3, 4)[1] == 192
    tiny = ToyMLP.from_bank(chain_bank(rng, 2, 4, 1, 1))
    assert trainable_budget(tiny, AdaptConfig(train_head=False)) == 2


def test_zero_epochs_is_noop(rng):
    bank = chain_bank(rng, 3, 8, 4, 8)
    before = bank.copy()
    model = ToyMLP.from_bank(bank)
    _, rows = adapt(model, toy_data(rng), AdaptConfig(epochs=0))
    assert [r["epoch"] for r in rows] == [0, 0]
    for g, b in zip(bank.groups, before.groups):
        for n in g.members:
            assert np.array_equal(g.mixers[n], b.mixers[n])
    assert np.array_equal(bank.dense["head.weight"], before.dense["head.weight"])


def test_zero_learning_rate_is_identity(rng):
    bank = chain_bank(rng, 3, 8, 4, 8)
    before = bank.copy()
    adapt(ToyMLP.from_bank(bank), toy_data(rng), AdaptConfig(lr=0.0, epochs=3))
    for g, b in zip(bank.groups, before.groups):
        assert all(np.array_equal(g.mixers[n], b.mixers[n]) for n in g.members)


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_adapt_never_touches_bases_or_biases(rng, optimizer):
    bank = chain_bank(rng, 3, 8, 4, 8)
    bases = basis_bytes(bank)
    biases = {n: b.tobytes() for g in bank.groups for n, b in g.biases.items()}
    mixers = {n: m.copy() for g in bank.groups for n, m in g.mixers.items()}
    adapt(ToyMLP.from_bank(bank), toy_data(rng), AdaptConfig(epochs=5, optimizer=optimizer))
    assert basis_bytes(bank) == bases
    assert {n: b.tobytes() for g in bank.groups for n, b in g.biases.items()} == biases
    assert any(not np.array_equal(mixers[n], m) for g in bank.groups for n, m in g.mixers.items())


def test_adapt_improves_training_loss_and_restores_best(rng):
    bank = chain_bank(rng, 3, 8, 4, 8)
    model = ToyMLP.from_bank(bank)
    data = toy_data(rng)
    mixers, rows = adapt(model, data, AdaptConfig(epochs=15))
    val = [r["loss"] for r in rows if r["split"] == "val"]
    assert evaluate(model, data.x_val, data.y_val)[0] == pytest.approx(min(val), rel=1e-6)
    assert min(val) < val[0]
    assert set(mixers) == {"fc0", "fc1", "fc2"}
    assert mixers_of(model)["fc0"] is bank.groups[0].mixers["fc0"]


def test_early_stopping_patience(rng):
    bank = chain_bank(rng, 3, 8, 4, 8)
    data = toy_data(rng)
    # validation labels are the training labels flipped, so fitting the training set only hurts validation
    data = Dataset(data.x_train, data.y_train, data.x_train, 1 - data.y_train, data.x_test, data.y_test)
    _, rows = adapt(ToyMLP.from_bank(bank), data, AdaptConfig(lr=0.2, epochs=40, patience=2))
    assert max(r["epoch"] for r in rows) <= 4


def test_empty_dataset_rejected(rng):
    bank = chain_bank(rng, 3, 8, 4, 8)
    empty = Dataset(*[np.zeros((0, 8), np.float32), np.zeros(0, int)] * 3)
    with pytest.raises(ConfigError):
        adapt(ToyMLP.from_bank(bank), empty)


def test_mixer_gradients_through_model_match_fd(rng):
    bank = chain_bank(rng, 3, 6, 3, 6)
    for g in bank.groups:
        for n in g.members:
            g.biases[n] = rng.uniform(0.2, 0.5, 6).astype(np.float32)
    model = ToyMLP.from_bank(bank).astype(np.float64)
    x, y = rng.standard_normal((5, 6)), rng.integers(0, 2, 5)

    def loss():
        return cross_entropy(model.forward(x)[0], y)[0]

    logits, _ = model.forward(x)
    grads = model.backward(cross_entropy(logits, y)[1], mode="adapt", train_head=False)
    for k, p in model.parameters("adapt", train_head=False).items():
        assert k.endswith(".mixer")
        assert rel_err(grads[k], central_diff(loss, p)) < 1e-4, k


def test_mixer_adapter_estimator(rng):
    spec = SyntheticTask(dim=8, n_classes=2, n_train=128, n_val=64, n_test=64, seed=2)
    data = make_task(spec)
    bank = chain_bank(rng, 3, 8, 4, 8)
    est = MixerAdapter(bank, epochs=10).fit(data.x_train, data.y_train)
    assert est.predict(data.x_test).shape == (64,)
    assert np.allclose(est.predict_proba(data.x_test).sum(axis=1), 1.0, atol=1e-5)
    assert 0.0 <= est.score(data.x_test, data.y_test) <= 1.0
    assert basis_bytes(est.model_.bank) == basis_bytes(bank)
    assert est.get_params()["lr"] == 0.05
    assert clone(est).get_params()["epochs"] == 10 and not hasattr(clone(est), "model_")
    with pytest.raises(ConfigError):
        MixerAdapter().fit(data.x_train, data.y_train)
