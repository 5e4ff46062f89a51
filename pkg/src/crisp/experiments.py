"""End-to-end procedures on toy models: pipeline stages, ablation sweeps and directional trials.

Stage functions take a :class:`~crisp.config.RunConfig` and return plain
rows ready for CSV output.  The ``*_trial`` functions run one seed of a
fixed protocol and return the numbers a directional comparison needs; the
protocols were fixed from pilot runs before the comparisons were asserted.
"""

import dataclasses
import logging

import numpy as np

from .adapter import AdaptConfig, adapt, evaluate, trainable_budget
from .compressor import (
    CompressConfig,
    DistillConfig,
    bank_metrics,
    calibrate,
    cluster_compress,
    distill_compress,
    random_student,
    reduced_rank,
    svd_warm_start,
)
from .config import RunConfig
from .errors import ConfigError
from .mimicry import NeuralMimicry
from .recombinator import ACTIVATIONS, PLACEMENTS, FactorizationConfig, param_count
from .toy import SyntheticTask, ToyMLP, make_task, train_classifier, with_backend

log = logging.getLogger(__name__)

STAGE_FIELDS = ["stage", "group", "rel_error", "params_before", "params_after"]
RETROFIT_FIELDS = ["step", "group", "loss", "rel_error"]
ADAPT_FIELDS = ["epoch", "split", "loss", "accuracy"]


# ---------------------------------------------------------------------------
# pipeline stages


def pretrain(cfg):
    """Dense source model trained on the source task; returns ``(model, dataset)``."""
    data = make_task(cfg.task)
    if data.x_train.shape[1] != cfg.model.dims[0] or cfg.model.dims[-1] != cfg.task.n_classes:
        raise ConfigError(
            f"model dims {cfg.model.dims} do not fit task dim {cfg.task.dim} / {cfg.task.n_classes} classes"
        )
    model = ToyMLP.dense(cfg.model.dims, seed=cfg.model.seed)
    train_classifier(model, data.x_train, data.y_train, cfg.model.pretrain_epochs, cfg.model.batch_size,
                     cfg.model.pretrain_lr, seed=cfg.model.seed)
    return model, data


def mimicry_estimator(cfg, **overrides):
    m, f, g = cfg.mimicry, cfg.factorization, cfg.gate
    params = dict(
        r=f.r, s=f.s, group_size=f.group_size, placement=g.placement, activation=g.activation,
        loss=m.loss.kind, beta=m.loss.beta, init=m.init, basis_init=m.basis_init, lr=m.lr,
        optimizer=m.optimizer, max_steps=m.max_steps, target_rel_error=m.target_rel_error,
        decay=m.decay, decay_every=m.decay_every, exclude=tuple(f.exclude), seed=m.seed,
    )
    params.update(overrides)
    return NeuralMimicry(**params)


def retrofit_checkpoint(checkpoint, cfg, **overrides):
    """Retrofit a dense checkpoint; returns ``(bank, history rows)``."""
    est = mimicry_estimator(cfg, **overrides).fit(checkpoint)
    rows = [{"step": st, "group": gid, "loss": loss, "rel_error": rel} for st, gid, loss, rel in est.loss_history_]
    return est.bank_, rows


def final_rel_errors(history_rows):
    """Last recorded relative error per group."""
    out = {}
    for row in history_rows:
        out[row["group"]] = row["rel_error"]
    return out


def compress_bank(bank, cfg, mode, data=None):
    """Compress ``bank`` by ``cfg.compress.rate``; returns ``(bank, stage rows)``.

    ``cluster`` is data-free apart from the optional calibration epochs;
    ``distill`` needs the source dataset for the teacher/student match.
    """
    teacher_w = bank.weights()
    before = {g.group_id: g.basis.size + sum(m.size for m in g.mixers.values()) for g in bank.groups}
    if mode == "cluster":
        out, rows = cluster_compress(bank, cfg.compress, teacher_w)
        if cfg.compress.calib_epochs > 0:
            if data is None:
                raise ConfigError("calibration needs a dataset")
            model = ToyMLP.from_bank(out)
            calibrate(model, teacher_w, data.x_train, data.y_train, cfg.compress)
            rows += bank_metrics(out, "task-loss calibration", teacher_w, before)
        else:
            rows += bank_metrics(out, "calibration skipped (stage 1 only)", teacher_w, before)
        return out, rows
    if mode == "distill":
        if data is None:
            raise ConfigError("distillation needs a dataset")
        r_targets = {reduced_rank(g.cfg.r, cfg.compress.rate_for(g.kind)) for g in bank.groups}
        if len(r_targets) != 1:
            raise ConfigError("distill mode needs a single target rank across groups")
        student_bank = svd_warm_start(bank, r_targets.pop())
        rows = bank_metrics(student_bank, "svd_warm_start", teacher_w, before)
        teacher, student = ToyMLP.from_bank(bank), ToyMLP.from_bank(student_bank)
        distill_compress(teacher, student, data.x_train, cfg.distill)
        rows += bank_metrics(student_bank, "distill", teacher_w, before)
        student_bank.meta = dict(student_bank.meta, compression="distill")
        return student_bank, rows
    raise ConfigError(f"unknown compression mode {mode!r}")


def adapt_bank(bank, cfg, data):
    """Mixer-only adaptation of a copy of ``bank``; returns ``(adapted bank, metric rows)``."""
    adapted = bank.copy()
    model = ToyMLP.from_bank(adapted)
    _, rows = adapt(model, data, cfg.adapt)
    test_loss, test_acc = evaluate(model, data.x_test, data.y_test)
    rows.append({"epoch": rows[-1]["epoch"], "split": "test", "loss": test_loss, "accuracy": test_acc})
    return adapted, rows


# ---------------------------------------------------------------------------
# ablation sweeps


def _with(cfg, **sections):
    return dataclasses.replace(cfg, **sections)


def _adapted_accuracy(bank, cfg, target):
    model = ToyMLP.from_bank(bank.copy())
    frozen = model.accuracy(target.x_test, target.y_test)
    adapt(model, target, cfg.adapt)
    return frozen, model.accuracy(target.x_test, target.y_test)


def sweep(cfg, name):
    """Rows for one ablation sweep, over every seed in ``cfg.ablate.seeds``."""
    fn = {
        "gate_placement": _sweep_gate,
        "loss_fn": _sweep_loss,
        "init": _sweep_init,
        "mixer_dims": _sweep_mixer_dims,
        "budget": _sweep_budget,
    }.get(name)
    if fn is None:
        raise ConfigError(f"unknown sweep {name!r}")
    rows = []
    for seed in cfg.ablate.seeds:
        scfg = _with(
            cfg,
            model=dataclasses.replace(cfg.model, seed=seed),
            task=dataclasses.replace(cfg.task, seed=seed),
            mimicry=dataclasses.replace(cfg.mimicry, seed=seed, max_steps=cfg.ablate.mimicry_steps),
            adapt=dataclasses.replace(cfg.adapt, seed=seed),
        )
        for row in fn(scfg):
            rows.append({"seed": seed, **row})
    return rows


SWEEP_FIELDS = {
    "gate_placement": ["seed", "placement", "activation", "rel_error", "frozen_accuracy", "adapted_accuracy"],
    "loss_fn": ["seed", "loss", "steps", "rel_error"],
    "init": ["seed", "init", "steps", "rel_error"],
    "mixer_dims": ["seed", "r", "s", "total_params", "trainable_per_layer", "rel_error"],
    "budget": ["seed", "method", "setting", "trainable_params", "accuracy"],
}


def _retrofit_stats(cfg, ckpt, **overrides):
    bank, hist = retrofit_checkpoint(ckpt, cfg, **overrides)
    return bank, hist[-1]["step"], max(final_rel_errors(hist).values())


def _sweep_gate(cfg):
    model, _ = pretrain(cfg)
    target = make_task(cfg.target_task)
    ckpt = model.to_checkpoint()
    rows = []
    for placement in PLACEMENTS:
        for act in ACTIVATIONS:
            bank, _, rel = _retrofit_stats(cfg, ckpt, placement=placement, activation=act)
            frozen, adapted = _adapted_accuracy(bank, cfg, target)
            rows.append({"placement": placement, "activation": act, "rel_error": rel,
                         "frozen_accuracy": frozen, "adapted_accuracy": adapted})
    return rows


def _sweep_loss(cfg):
    ckpt = pretrain(cfg)[0].to_checkpoint()
    rows = []
    for kind in ("smooth_l1", "huber", "mse", "l1"):
        _, steps, rel = _retrofit_stats(cfg, ckpt, loss=kind)
        rows.append({"loss": kind, "steps": steps, "rel_error": rel})
    return rows


def _sweep_init(cfg):
    from .mimicry import INIT_SCHEMES

    ckpt = pretrain(cfg)[0].to_checkpoint()
    rows = []
    for scheme in INIT_SCHEMES:
        _, steps, rel = _retrofit_stats(cfg, ckpt, init=scheme)
        rows.append({"init": scheme, "steps": steps, "rel_error": rel})
    return rows


def _sweep_mixer_dims(cfg):
    ckpt = pretrain(cfg)[0].to_checkpoint()
    rows = []
    for r, s in cfg.ablate.mixer_dims:
        bank, _, rel = _retrofit_stats(cfg, ckpt, r=r, s=s)
        rows.append({"r": r, "s": s, "total_params": bank.param_count(), "trainable_per_layer": r * s,
                     "rel_error": rel})
    return rows


def _sweep_budget(cfg):
    model, _ = pretrain(cfg)
    target = make_task(cfg.target_task)
    ckpt = model.to_checkpoint()
    acfg = cfg.adapt
    rows = []
    for rank in cfg.ablate.budget_ranks:
        bank, _, _ = _retrofit_stats(cfg, ckpt, r=rank)
        m = ToyMLP.from_bank(bank.copy())
        n = trainable_budget(m, acfg)
        adapt(m, target, acfg)
        rows.append({"method": "crisp", "setting": f"r={rank},s={cfg.factorization.s}", "trainable_params": n,
                     "accuracy": m.accuracy(target.x_test, target.y_test)})
    for backend in ("lora", "svd"):
        for rank in cfg.ablate.budget_ranks:
            m = with_backend(model, backend, rank=rank, seed=acfg.seed)
            n = trainable_budget(m, acfg)
            adapt(m, target, acfg)
            rows.append({"method": backend, "setting": f"rank={rank}", "trainable_params": n,
                         "accuracy": m.accuracy(target.x_test, target.y_test)})
    m = with_backend(model, "dense")
    n = m.trainable_count("none", acfg.train_head)
    adapt(m, target, acfg)
    rows.append({"method": "head_only" if acfg.train_head else "frozen", "setting": "-", "trainable_params": n,
                 "accuracy": m.accuracy(target.x_test, target.y_test)})
    return rows


# ---------------------------------------------------------------------------
# pre-registered directional trials


def _trial_config(seed, noise=1.0, r=8, s=8, steps=2000, **sections):
    cfg = RunConfig()
    cfg = _with(
        cfg,
        model=dataclasses.replace(cfg.model, seed=seed, pretrain_epochs=30),
        task=SyntheticTask(noise=noise, seed=seed),
        factorization=dataclasses.replace(cfg.factorization, r=r, s=s, group_size=3),
        mimicry=dataclasses.replace(cfg.mimicry, seed=seed, max_steps=steps),
        adapt=AdaptConfig(lr=0.05, epochs=30, seed=seed),
    )
    return _with(cfg, **sections) if sections else cfg


def peft_gain_trial(seed):
    """Frozen vs mixer-adapted accuracy on a rotated, label-shifted target task."""
    cfg = _trial_config(seed)
    model, _ = pretrain(cfg)
    bank, _ = retrofit_checkpoint(model.to_checkpoint(), cfg)
    target = make_task(cfg.task.shifted(0.6, 1))
    m = ToyMLP.from_bank(bank)
    basis_before = {g.group_id: g.basis.tobytes() for g in bank.groups}
    frozen = m.accuracy(target.x_test, target.y_test)
    adapt(m, target, cfg.adapt)
    unchanged = all(g.basis.tobytes() == basis_before[g.group_id] for g in bank.groups)
    return {"frozen": frozen, "adapted": m.accuracy(target.x_test, target.y_test), "bases_unchanged": unchanged}


def gate_activation_trial(seed):
    """Adapted target accuracy for PRE gating with silu_gate vs relu (head frozen, small mixers)."""
    cfg = _trial_config(seed, r=4, s=8)
    model, _ = pretrain(cfg)
    ckpt = model.to_checkpoint()
    target = make_task(cfg.task.shifted(1.2, 0))
    acfg = dataclasses.replace(cfg.adapt, train_head=False)
    out = {}
    for act in ("silu_gate", "relu"):
        bank, _ = retrofit_checkpoint(ckpt, cfg, activation=act)
        m = ToyMLP.from_bank(bank)
        adapt(m, target, acfg)
        out[act] = m.accuracy(target.x_test, target.y_test)
    return out


def retention_trial(seed, rate=0.5, calib_epochs=20):
    """Accuracy of the dense source model vs its cluster-compressed, calibrated CRISP version."""
    cfg = _trial_config(seed, r=16, s=16)
    cfg = _with(cfg, compress=CompressConfig(rate=rate, calib_epochs=calib_epochs, seed=seed))
    model, data = pretrain(cfg)
    bank, _ = retrofit_checkpoint(model.to_checkpoint(), cfg)
    uncompressed = ToyMLP.from_bank(bank).accuracy(data.x_test, data.y_test)
    teacher_w = bank.weights()
    stage1, _ = cluster_compress(bank, cfg.compress, teacher_w)
    m = ToyMLP.from_bank(stage1)
    stage1_acc = m.accuracy(data.x_test, data.y_test)
    _, met = calibrate(m, teacher_w, data.x_train, data.y_train, cfg.compress)
    return {
        "dense": model.accuracy(data.x_test, data.y_test),
        "uncompressed": uncompressed,
        "stage1": stage1_acc,
        "compressed": m.accuracy(data.x_test, data.y_test),
        "calib_loss_before": met["loss_before"],
        "calib_loss_after": met["loss_after"],
        "params_before": bank.param_count(),
        "params_after": m.bank.param_count(),
    }


def warm_start_trial(seed, r=32, r_target=16, epochs=10):
    """Final distillation loss from an SVD warm start vs a random orthogonal student."""
    cfg = _trial_config(seed, r=r, s=32, steps=3000)
    model, data = pretrain(cfg)
    bank, _ = retrofit_checkpoint(model.to_checkpoint(), cfg)
    teacher = ToyMLP.from_bank(bank)
    dcfg = DistillConfig(epochs=epochs, seed=seed)
    out = {}
    for name, student_bank in (("svd", svd_warm_start(bank, r_target)),
                               ("orthogonal", random_student(bank, r_target, seed=seed))):
        _, met = distill_compress(teacher, ToyMLP.from_bank(student_bank), data.x_train, dcfg)
        out[name] = met["final_loss"]
    return out


def shared_subspace_bank(seed, d=16, layers=4, k=4, noise=0.3):
    """Random layers ``P Q_i^T + noise`` that share one output subspace ``P`` of rank ``k``."""
    rng = np.random.default_rng(seed)
    p = rng.normal(0.0, 1.0, (d, k))
    out = {}
    for i in range(layers):
        w = p @ rng.normal(0.0, 1.0, (k, d)) / np.sqrt(k * d) + noise * rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        out[f"fc{i}.weight"] = w.astype(np.float32)
    return out


def mixer_shape_trial(seed, r=4, column_rich=16, row_rich=4, steps=1500):
    """Mimicry error of two ``(r, s)`` shapes with identical total parameter counts."""
    ckpt = shared_subspace_bank(seed)
    d, layers = 16, len(ckpt)
    out = {}
    for name, s in (("column_rich", column_rich), ("row_rich", row_rich)):
        est = NeuralMimicry(r=r, s=s, group_size=layers, max_steps=steps, seed=seed).fit(ckpt)
        out[name] = float(np.mean(list(est.rel_errors_.values())))
        out[f"{name}_params"] = param_count(FactorizationConfig(r, s, d, d), layers, 1)[0]
    return out
