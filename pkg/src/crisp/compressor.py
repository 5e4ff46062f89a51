"""Shrinking a factor bank: distillation with an SVD warm start, and data-free basis clustering.

The clustering path runs per group: score basis columns, cluster them,
merge each cluster into one column, sum the matching mixer rows, then
re-solve every mixer against the teacher weights by least squares.  An
optional calibration pass refines the result on weight reconstruction plus
a task loss.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, GateRangeWarning, ShapeError
from .mimicry import LayerGroup, init_matrix
from .numerics import (
    as_matrix,
    cross_entropy,
    kl_divergence,
    pseudo_inverse,
    random_projection,
    svd,
    weighted_kmeans,
)
from .optim import Adam
from .recombinator import activate, activation_floor, invert_activation
from .toy import run_epochs

log = logging.getLogger(__name__)


@dataclass
class CompressConfig:
    rate: float = 0.5
    rates: dict = field(default_factory=dict)
    importance_lambda: float = 1.0
    proj_dim: int = None
    w1: float = 1.0
    w2: float = 1.0
    calib_epochs: int = 0
    calib_lr: float = 0.005
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        for rho in [self.rate, *self.rates.values()]:
            if not 0 <= rho < 1:
                raise ConfigError(f"compression rate must lie in [0, 1), got {rho}")
        if self.importance_lambda < 0:
            raise ConfigError("importance lambda must be >= 0")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("calibration weights must be >= 0")
        if self.calib_epochs < 0:
            raise ConfigError("calibration epochs must be >= 0")

    def rate_for(self, kind):
        return self.rates.get(kind, self.rates.get(kind.split(":")[0], self.rate))


@dataclass
class DistillConfig:
    lambda_kl: float = 1.0
    lambda_feat: float = 1.0
    epochs: int = 20
    lr: float = 0.005
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lambda_kl < 0 or self.lambda_feat < 0:
            raise ConfigError("distillation weights must be >= 0")
        if not (self.lambda_kl > 0 or self.lambda_feat > 0):
            raise ConfigError("at least one of lambda_kl, lambda_feat must be positive")


def reduced_rank(r, rho):
    """``floor(r * (1 - rho))`` computed exactly; must stay >= 1."""
    r_new = math.floor(Fraction(r) * (1 - Fraction(str(rho))))
    if r_new < 1:
        raise ConfigError(f"rate {rho} leaves no basis columns out of r={r}")
    return r_new


# ---------------------------------------------------------------------------
# stage 1: importance, cluster, merge, aggregate


def importance_scores(b, mixers, lam=1.0, variance_boost=None):
    """Column score ``||B[:, j]||_2 + lam * sum_i ||A_i[j, :]||_1``, optionally scaled by ``1 + boost_j``."""
    b = as_matrix(b, "basis").astype(np.float64)
    r = b.shape[1]
    w = np.linalg.norm(b, axis=0)
    for a in mixers:
        a = np.asarray(a, dtype=np.float64)
        if a.shape[0] != r:
            raise ShapeError(f"mixer has {a.shape[0]} rows, basis has {r} columns")
        w = w + lam * np.abs(a).sum(axis=1)
    if variance_boost is not None:
        w = w * (1.0 + np.asarray(variance_boost, dtype=np.float64))
    return w


def cluster_features(b, mixers, w, proj_dim=None, seed=0):
    """One row per basis column: projected column next to its mixer rows, scaled by importance."""
    b = as_matrix(b, "basis").astype(np.float64)
    proj = random_projection(b.T, proj_dim, seed)
    rows = [proj] + [np.asarray(a, dtype=np.float64) for a in mixers]
    return np.hstack(rows) * np.asarray(w, dtype=np.float64)[:, None]


def cluster_basis(b, mixers, w, r_prime, proj_dim=None, seed=0):
    r = np.shape(b)[1]
    if r_prime > r:
        raise ConfigError(f"cannot cluster {r} columns into {r_prime}")
    phi = cluster_features(b, mixers, w, proj_dim, seed)
    weights = np.asarray(w, dtype=np.float64)
    if not np.any(weights > 0):
        weights = np.ones_like(weights)
    return weighted_kmeans(phi, weights, r_prime, seed=seed)


def merge_basis(b, assignments, w):
    """Importance-weighted mean per cluster, rescaled to the weighted RMS of member norms."""
    b = as_matrix(b, "basis")
    b64 = b.astype(np.float64)
    assignments = np.asarray(assignments)
    w = np.asarray(w, dtype=np.float64)
    if assignments.shape != (b.shape[1],):
        raise ShapeError(f"need one assignment per basis column ({b.shape[1]}), got {assignments.shape}")
    k = int(assignments.max()) + 1
    out = np.zeros((b.shape[0], k))
    norms = np.linalg.norm(b64, axis=0)
    for c in range(k):
        idx = np.flatnonzero(assignments == c)
        if idx.size == 0:
            continue
        cw = w[idx]
        if cw.sum() <= 0:
            cw = np.ones_like(cw)
        mean = (b64[:, idx] * cw).sum(axis=1) / cw.sum()
        target = np.sqrt((cw * norms[idx] ** 2).sum() / cw.sum())
        nrm = np.linalg.norm(mean)
        out[:, c] = mean * (target / nrm) if nrm > 0 else mean
    return out.astype(b.dtype)


def aggregate_coefficients(mixers, assignments):
    """Row ``c`` of each new mixer is the sum of old rows assigned to cluster ``c``."""
    assignments = np.asarray(assignments)
    k = int(assignments.max()) + 1
    out = []
    for a in mixers:
        a = np.asarray(a)
        agg = np.zeros((k, a.shape[1]))
        np.add.at(agg, assignments, a.astype(np.float64))
        out.append(agg.astype(a.dtype))
    return out


# ---------------------------------------------------------------------------
# stage 1b: least-squares re-solve


def _gate_floor(gate_cfg):
    if gate_cfg.is_linear:
        return -np.inf
    return activation_floor(gate_cfg.activation)


def resolve_coefficients(w_teacher, b, cfg, gate_cfg):
    """Least-squares mixer reproducing ``w_teacher`` from basis ``b``.

    PRE solves for the gated matrix and inverts the gate element-wise; POST
    inverts the activation on the teacher weight first; TEMP solves against
    the activated basis.  Targets outside the activation's range are clamped
    and reported with a :class:`GateRangeWarning`.
    """
    b = as_matrix(b, "basis").astype(np.float64)
    if b.shape != cfg.basis_shape:
        raise ShapeError(f"basis shape {b.shape} != {cfg.basis_shape}")
    w = np.asarray(w_teacher, dtype=np.float64)
    if w.shape != (cfg.d_out, cfg.d_in):
        raise ShapeError(f"teacher weight shape {w.shape} != {(cfg.d_out, cfg.d_in)}")
    target = w.reshape(cfg.u, cfg.s)
    p, act = gate_cfg.placement, gate_cfg.activation
    clamped = np.zeros(0, dtype=bool)
    if gate_cfg.is_linear:
        a = pseudo_inverse(b) @ target
    elif p == "PRE":
        a, clamped = invert_activation(pseudo_inverse(b) @ target, act)
    elif p == "POST":
        pre, clamped = invert_activation(target, act)
        a = pseudo_inverse(b) @ pre
    else:
        a = pseudo_inverse(activate(b, act)[0]) @ target
    if clamped.any():
        warnings.warn(
            f"{int(clamped.sum())} re-solve targets fell below the {act} range and were clamped",
            GateRangeWarning,
            stacklevel=2,
        )
    return a.astype(np.float32)


def fit_gate_range(b, gated, gate_cfg, margin=0.5):
    """Rescale basis columns so every gated coefficient row is reachable by the gate.

    ``gated`` are the least-squares solutions ``pinv(b) @ W`` of the group's
    layers.  Column ``j`` is multiplied by ``c_j >= 1`` and row ``j`` of every
    solution divided by it, leaving ``b @ gated`` unchanged, until each row's
    minimum sits above ``margin`` times the activation's floor.
    """
    floor = _gate_floor(gate_cfg)
    b = np.asarray(b, dtype=np.float64).copy()
    if gate_cfg.placement != "PRE" or not np.isfinite(floor) or floor >= 0:
        return b
    lowest = np.min([np.min(g, axis=1) for g in gated], axis=0)
    scale = np.maximum(1.0, lowest / (margin * floor))
    return b * scale


def _teacher_target(teacher_w, cfg):
    return np.asarray(teacher_w, dtype=np.float64).reshape(cfg.u, cfg.s)


def resolve_group(group, teacher_weights, gate_cfg, keep_if_worse=True):
    """Re-solve every mixer of ``group`` in place against the teacher weights."""
    cfg = group.cfg
    pinv = pseudo_inverse(group.basis.astype(np.float64))
    gated = [pinv @ _teacher_target(teacher_weights[n], cfg) for n in group.members]
    group.basis = fit_gate_range(group.basis, gated, gate_cfg).astype(np.float32)
    for n in group.members:
        old = group.mixers[n]
        old_err = np.linalg.norm(group.weight(n, gate_cfg) - teacher_weights[n])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            group.mixers[n] = resolve_coefficients(teacher_weights[n], group.basis, cfg, gate_cfg)
        new_err = np.linalg.norm(group.weight(n, gate_cfg) - teacher_weights[n])
        for w in caught:
            log.warning("group %s layer %s: %s", group.group_id, n, w.message)
        if keep_if_worse and new_err > old_err:
            group.mixers[n] = old
    return group


# ---------------------------------------------------------------------------
# pipelines


def compress_group(group, cfg, gate_cfg, teacher_weights=None, variance_boost=None):
    """Stage 1 (+ 1b when teacher weights are given) for one group; returns a new group."""
    r = group.cfg.r
    r_prime = reduced_rank(r, cfg.rate_for(group.kind))
    mixers = [group.mixers[n] for n in group.members]
    w = importance_scores(group.basis, mixers, cfg.importance_lambda, variance_boost)
    if r_prime == r:
        assignments = np.arange(r)
    else:
        assignments = cluster_basis(group.basis, mixers, w, r_prime, cfg.proj_dim, cfg.seed).assignments
    new = LayerGroup(group.group_id, group.kind, list(group.members), group.shape, group.cfg.with_rank(r_prime))
    new.basis = merge_basis(group.basis, assignments, w).astype(np.float32)
    for n, a in zip(group.members, aggregate_coefficients(mixers, assignments)):
        new.mixers[n] = a.astype(np.float32)
    new.biases = {n: b.copy() for n, b in group.biases.items()}
    if teacher_weights is not None:
        resolve_group(new, teacher_weights, gate_cfg)
    return new, assignments


def _group_size(g):
    return g.basis.size + sum(m.size for m in g.mixers.values())


def _group_rel_error(g, gate_cfg, teacher_weights):
    errs = []
    for n in g.members:
        t = np.asarray(teacher_weights[n], dtype=np.float64)
        d = np.linalg.norm(g.weight(n, gate_cfg).astype(np.float64) - t)
        errs.append(d / np.linalg.norm(t) if np.linalg.norm(t) > 0 else d)
    return float(max(errs))


def cluster_compress(bank, cfg, teacher_weights=None):
    """Data-free basis reduction of every group; returns ``(bank, metrics rows)``.

    ``teacher_weights`` defaults to the input bank's own regenerated weights,
    which is what the coefficient re-solve fits against.  Rows are emitted
    for the merged bank (stage ``cluster``) and after the re-solve (stage
    ``resolve``).
    """
    teacher_weights = teacher_weights if teacher_weights is not None else bank.weights()
    out = bank.copy()
    rows = []
    new_groups = []
    for g in out.groups:
        before = _group_size(g)
        ng, _ = compress_group(g, cfg, bank.gate)
        rows.append({"stage": "cluster", "group": g.group_id, "params_before": before, "params_after": _group_size(ng),
                     "rel_error": _group_rel_error(ng, bank.gate, teacher_weights)})
        resolve_group(ng, teacher_weights, bank.gate)
        rows.append({"stage": "resolve", "group": g.group_id, "params_before": before, "params_after": _group_size(ng),
                     "rel_error": _group_rel_error(ng, bank.gate, teacher_weights)})
        new_groups.append(ng)
    out.groups = new_groups
    out.meta = dict(bank.meta, compression="cluster")
    return out, rows


def bank_metrics(bank, stage, teacher_weights, before=None):
    """One metrics row per group of ``bank`` for ``stage``; ``before`` maps group id to its old size."""
    rows = []
    for g in bank.groups:
        size = _group_size(g)
        rows.append({"stage": stage, "group": g.group_id, "rel_error": _group_rel_error(g, bank.gate, teacher_weights),
                     "params_before": (before or {}).get(g.group_id, size), "params_after": size})
    return rows


def svd_warm_start(teacher_bank, r_target):
    """Student bank whose bases keep the top ``r_target`` scaled left singular vectors.

    Mixers are then re-solved against the teacher's regenerated weights.
    """
    teacher_w = teacher_bank.weights()
    out = teacher_bank.copy()
    new_groups = []
    for g in out.groups:
        if not 1 <= r_target <= g.cfg.r:
            raise ConfigError(f"group {g.group_id}: r_target={r_target} outside [1, {g.cfg.r}]")
        res = svd(g.basis.astype(np.float64))
        ng = LayerGroup(g.group_id, g.kind, list(g.members), g.shape, g.cfg.with_rank(r_target))
        ng.basis = (res.u[:, :r_target] * res.s[:r_target]).astype(np.float32)
        ng.mixers = {n: np.zeros(ng.cfg.mixer_shape, np.float32) for n in g.members}
        ng.biases = {n: b.copy() for n, b in g.biases.items()}
        resolve_group(ng, teacher_w, teacher_bank.gate, keep_if_worse=False)
        new_groups.append(ng)
    out.groups = new_groups
    out.meta = dict(teacher_bank.meta, warm_start="svd", r_target=r_target)
    return out


def random_student(teacher_bank, r_target, seed=0):
    """Student with orthogonally initialised bases and mixers (the no-warm-start baseline)."""
    rng = np.random.default_rng(seed)
    out = teacher_bank.copy()
    new_groups = []
    for g in out.groups:
        ng = LayerGroup(g.group_id, g.kind, list(g.members), g.shape, g.cfg.with_rank(r_target))
        ng.basis = init_matrix("orthogonal", ng.cfg.basis_shape, rng).astype(np.float32)
        ng.mixers = {n: init_matrix("orthogonal", ng.cfg.mixer_shape, rng).astype(np.float32) for n in g.members}
        ng.biases = {n: b.copy() for n, b in g.biases.items()}
        new_groups.append(ng)
    out.groups = new_groups
    out.meta = dict(teacher_bank.meta, warm_start="orthogonal", r_target=r_target)
    return out


def distillation_loss(student, teacher_logits, teacher_feats, x, cfg):
    """Weighted KL + per-layer feature MSE; returns ``(loss, grads)`` over the student factors."""
    logits, feats = student.forward(x)
    loss = 0.0
    dlogits = np.zeros_like(logits, dtype=np.float64)
    if cfg.lambda_kl > 0:
        kl, g = kl_divergence(logits, teacher_logits)
        loss += cfg.lambda_kl * kl
        dlogits = dlogits + cfg.lambda_kl * g
    fgrads = None
    if cfg.lambda_feat > 0:
        fgrads = []
        for fs, ft in zip(feats, teacher_feats):
            d = fs.astype(np.float64) - ft
            loss += cfg.lambda_feat * float((d * d).mean())
            fgrads.append(cfg.lambda_feat * 2.0 * d / d.size)
    return loss, student.backward(dlogits, feature_grads=fgrads, mode="full", train_head=False)


def distill_compress(teacher, student, x, cfg=None):
    """Train the student's factors to match the teacher's logits and hidden features.

    ``teacher`` and ``student`` are :class:`ToyMLP` models with identical
    layer layouts.  Returns ``(student bank, metrics)`` where metrics carries
    the per-epoch loss history and the final full-set loss.
    """
    cfg = cfg or DistillConfig()
    x = np.asarray(x)
    t_logits, t_feats = teacher.forward(x)
    t_logits = t_logits.astype(np.float64)
    t_feats = [f.astype(np.float64) for f in t_feats]
    params = student.parameters("full", train_head=False)
    initial = distillation_loss(student, t_logits, t_feats, x, cfg)[0]

    def batch_loss(idx):
        return distillation_loss(student, t_logits[idx], [f[idx] for f in t_feats], x[idx], cfg)

    history = run_epochs(len(x), batch_loss, params, Adam(cfg.lr), cfg.epochs, cfg.batch_size, cfg.seed)
    final = distillation_loss(student, t_logits, t_feats, x, cfg)[0]
    return student.bank, {"initial_loss": initial, "final_loss": final, "history": history}


def calibration_loss(model, teacher_weights, x, y, cfg):
    """``w1 * sum ||W - W_teacher||_F^2 + w2 * CE``; gradients over bases and mixers."""
    bank = model.bank
    loss = 0.0
    wgrads = {}
    if cfg.w1 > 0:
        for n, w in bank.weights().items():
            d = w.astype(np.float64) - teacher_weights[n]
            loss += cfg.w1 * float((d * d).sum())
            wgrads[n] = cfg.w1 * 2.0 * d
    logits, _ = model.forward(x)
    dlogits = np.zeros_like(logits, dtype=np.float64)
    if cfg.w2 > 0:
        ce, g = cross_entropy(logits, y)
        loss += cfg.w2 * ce
        dlogits = cfg.w2 * g.astype(np.float64)
    grads = model.backward(dlogits, mode="full", train_head=False, weight_grads=wgrads)
    return loss, grads


def calibrate(model, teacher_weights, x, y, cfg):
    """Refine a compressed model for ``cfg.calib_epochs`` epochs; returns ``(bank, metrics)``."""
    teacher_weights = {k: np.asarray(v, dtype=np.float64) for k, v in teacher_weights.items()}
    before = calibration_loss(model, teacher_weights, x, y, cfg)[0]
    history = []
    if cfg.calib_epochs > 0:
        params = model.parameters("full", train_head=False)

        def batch_loss(idx):
            return calibration_loss(model, teacher_weights, x[idx], y[idx], cfg)

        history = run_epochs(len(x), batch_loss, params, Adam(cfg.calib_lr), cfg.calib_epochs, cfg.batch_size, cfg.seed)
    after = calibration_loss(model, teacher_weights, x, y, cfg)[0]
    return model.bank, {"loss_before": before, "loss_after": after, "history": history,
                        "objective": "task-loss calibration"}
