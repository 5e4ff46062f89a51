"""Data-free retrofit of dense weights into shared bases and per-layer mixers.

Layers of the same kind are chunked into groups that share one basis; each
layer keeps its own mixer and a dense bias.  :func:`retrofit` then fits the
factors to the pretrained weights by minimising a reconstruction loss on the
weights alone.
"""

import copy
import hashlib
import logging
import re
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, DivergenceError, NumericalError, ShapeError
from .numerics import LossConfig, loss_and_grad
from .optim import make_optimizer, step_decay
from .recombinator import FactorizationConfig, GateConfig, generate_weight, layer_backward

log = logging.getLogger(__name__)

INIT_SCHEMES = ("gaussian_0p01", "uniform", "kaiming", "xavier", "orthogonal")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    index: int
    d_out: int
    d_in: int


@dataclass
class LayerGroup:
    group_id: str
    kind: str
    members: list
    shape: tuple = None
    cfg: FactorizationConfig = None
    basis: np.ndarray = None
    mixers: dict = field(default_factory=dict)
    biases: dict = field(default_factory=dict)

    def weight(self, name, gate_cfg):
        return generate_weight(self.basis, self.mixers[name], self.cfg, gate_cfg)


@dataclass
class FactorBank:
    """Retrofitted model state: grouped factors plus tensors left dense."""

    groups: list
    gate: GateConfig = field(default_factory=GateConfig)
    dense: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def layer_names(self):
        return [n for g in self.groups for n in g.members]

    def group_of(self, name):
        for g in self.groups:
            if name in g.mixers or name in g.members:
                return g
        raise KeyError(name)

    def weight(self, name):
        return self.group_of(name).weight(name, self.gate)

    def weights(self):
        return {n: g.weight(n, self.gate) for g in self.groups for n in g.members}

    def copy(self):
        return copy.deepcopy(self)

    def param_count(self, include_biases=False):
        total = 0
        for g in self.groups:
            total += g.basis.size + sum(m.size for m in g.mixers.values())
            if include_biases:
                total += sum(b.size for b in g.biases.values())
        return total

    def relative_errors(self, targets):
        """Per-layer ``||W_gen - W|| / ||W||`` against ``targets``."""
        out = {}
        for name, w in self.weights().items():
            t = np.asarray(targets[name], dtype=np.float64)
            nrm = np.linalg.norm(t)
            diff = np.linalg.norm(w.astype(np.float64) - t)
            out[name] = float(diff / nrm) if nrm > 0 else float(diff)
        return out

    def validate(self):
        seen = set()
        for g in self.groups:
            if not g.members:
                raise ConfigError(f"group {g.group_id} has no members")
            if g.basis.shape != g.cfg.basis_shape:
                raise ShapeError(
                    f"group {g.group_id}: basis shape {g.basis.shape} != {g.cfg.basis_shape}"
                )
            for n in g.members:
                if n in seen:
                    raise ConfigError(f"layer {n} appears in more than one group")
                seen.add(n)
                if g.mixers[n].shape != g.cfg.mixer_shape:
                    raise ShapeError(
                        f"group {g.group_id}: mixer {n} shape {g.mixers[n].shape} != {g.cfg.mixer_shape}"
                    )


@dataclass
class MimicryConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    init: str = "orthogonal"
    basis_init: str = "gaussian_0p01"
    lr: float = 0.01
    optimizer: str = "adam"
    decay: float = 0.5
    decay_every: int = 2000
    max_steps: int = 10000
    target_rel_error: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"mimicry lr must be positive, got {self.lr}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        for scheme in (self.init, self.basis_init):
            if scheme not in INIT_SCHEMES:
                raise ConfigError(f"unknown init scheme {scheme!r}")


# ---------------------------------------------------------------------------
# grouping and initialisation


def describe_checkpoint(tensors, exclude=()):
    """Split a ``{name: array}`` checkpoint into factorisable layers and the rest.

    A layer is any ``<layer>.weight`` 2-D tensor not listed in ``exclude``.  Its
    kind is the layer name with digit runs dropped plus its shape, so only
    same-shaped layers of the same family can share a basis.
    """
    layers, weights, biases, dense = [], {}, {}, {}
    index = 0
    for key, arr in tensors.items():
        arr = np.asarray(arr)
        if key.endswith(".weight") and arr.ndim == 2 and key[: -len(".weight")] not in exclude:
            name = key[: -len(".weight")]
            family = re.sub(r"\.?[0-9]+", "", name) or "layer"
            kind = f"{family}:{arr.shape[0]}x{arr.shape[1]}"
            layers.append(LayerSpec(name, kind, index, arr.shape[0], arr.shape[1]))
            weights[name] = arr
            index += 1
    names = {l.name for l in layers}
    for key, arr in tensors.items():
        if key.endswith(".weight") and key[: -len(".weight")] in names:
            continue
        if key.endswith(".bias") and key[: -len(".bias")] in names:
            biases[key[: -len(".bias")]] = np.asarray(arr)
        else:
            dense[key] = np.asarray(arr)
    return layers, weights, biases, dense


def checkpoint_digest(tensors):
    """SHA-256 over names, shapes and float32 bytes, in sorted name order."""
    h = hashlib.sha256()
    for key in sorted(tensors):
        arr = np.ascontiguousarray(tensors[key], dtype="<f4")
        h.update(f"{key}:{arr.shape};".encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def group_layers(layers, group_size):
    """Chunk consecutive same-kind layers into groups of ``group_size``."""
    if not layers:
        raise ConfigError("no layers to group")
    if group_size < 1:
        raise ConfigError(f"group_size must be >= 1, got {group_size}")
    by_kind = {}
    for spec in sorted(layers, key=lambda l: l.index):
        by_kind.setdefault(spec.kind, []).append(spec)
    groups = []
    for kind, specs in by_kind.items():
        for start in range(0, len(specs), group_size):
            chunk = specs[start : start + group_size]
            shapes = {(l.d_out, l.d_in) for l in chunk}
            if len(shapes) > 1:
                raise ConfigError(f"layers of kind {kind!r} have mixed shapes {sorted(shapes)}")
            gid = f"{kind}/{start // group_size}"
            groups.append(LayerGroup(gid, kind, [l.name for l in chunk], shapes.pop()))
    return groups


def init_matrix(scheme, shape, rng):
    rows, cols = shape
    if scheme == "gaussian_0p01":
        return rng.normal(0.0, 0.01, shape)
    if scheme == "uniform":
        bound = 1.0 / np.sqrt(rows)
        return rng.uniform(-bound, bound, shape)
    if scheme == "kaiming":
        return rng.normal(0.0, np.sqrt(2.0 / rows), shape)
    if scheme == "xavier":
        return rng.normal(0.0, np.sqrt(2.0 / (rows + cols)), shape)
    if scheme == "orthogonal":
        g = rng.standard_normal((max(shape), min(shape)))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
        return q.T if rows < cols else q
    raise ConfigError(f"unknown init scheme {scheme!r}")


def init_factors(groups, r, s, mimicry_cfg=None, gate_cfg=None, biases=None):
    """Draw bases and mixers for every group from ``mimicry_cfg.seed``."""
    mimicry_cfg = mimicry_cfg or MimicryConfig()
    gate_cfg = gate_cfg or GateConfig()
    biases = biases or {}
    rng = np.random.default_rng(mimicry_cfg.seed)
    out = []
    for g in groups:
        d_out, d_in = g.shape if g.shape is not None else (g.cfg.d_out, g.cfg.d_in)
        try:
            cfg = FactorizationConfig(r, s, d_in, d_out)
        except ConfigError as exc:
            raise ConfigError(f"layer {g.members[0]} ({d_out}x{d_in}): {exc}") from None
        ng = LayerGroup(g.group_id, g.kind, list(g.members), (d_out, d_in), cfg)
        ng.basis = init_matrix(mimicry_cfg.basis_init, cfg.basis_shape, rng).astype(np.float32)
        for name in g.members:
            ng.mixers[name] = init_matrix(mimicry_cfg.init, cfg.mixer_shape, rng).astype(np.float32)
            b = biases.get(name)
            ng.biases[name] = (
                np.zeros(d_out, np.float32) if b is None else np.array(b, dtype=np.float32)
            )
        out.append(ng)
    return FactorBank(out, gate_cfg, meta={"seed": mimicry_cfg.seed})


# ---------------------------------------------------------------------------
# reconstruction loop


def bank_params(bank, bases=True, mixers=True):
    """Named views of the bank's trainable factors (shared arrays, not copies)."""
    params = {}
    for g in bank.groups:
        if bases:
            params[f"groups.{g.group_id}.basis"] = g.basis
        if mixers:
            for n in g.members:
                params[f"layers.{n}.mixer"] = g.mixers[n]
    return params


def factor_grads(bank, dl_dw, bases=True, mixers=True):
    """Chain ``{layer: dL/dW}`` through every layer's transform into factor gradients."""
    grads = {}
    for g in bank.groups:
        gb = None
        for n in g.members:
            if n not in dl_dw:
                continue
            db, da = layer_backward(dl_dw[n], g.basis, g.mixers[n], g.cfg, bank.gate)
            gb = db.astype(np.float64) if gb is None else gb + db
            if mixers:
                grads[f"layers.{n}.mixer"] = da
        if bases and gb is not None:
            grads[f"groups.{g.group_id}.basis"] = gb
    return grads


def mimicry_loss(bank, targets, loss_cfg):
    """Summed per-layer reconstruction loss and ``{layer: dL/dW}``."""
    total = 0.0
    per_group = {}
    dl_dw = {}
    for g in bank.groups:
        gl = 0.0
        for n in g.members:
            w = g.weight(n, bank.gate)
            l, grad = loss_and_grad(w, np.asarray(targets[n], dtype=w.dtype), loss_cfg)
            gl += l
            dl_dw[n] = grad
        per_group[g.group_id] = gl
        total += gl
    return total, per_group, dl_dw


def _group_rel_errors(bank, targets):
    errs = bank.relative_errors(targets)
    return {g.group_id: max(errs[n] for n in g.members) for g in bank.groups}


def retrofit(pretrained, bank, mimicry_cfg=None):
    """Fit ``bank`` to the pretrained weights; returns ``(bank, history)``.

    ``pretrained`` maps layer names to ``(d_out, d_in)`` weights; no data
    samples are involved.  ``history`` holds one ``(step, group, loss,
    rel_error)`` row per group per step.  The input bank is not modified.
    """
    cfg = mimicry_cfg or MimicryConfig()
    bank = bank.copy()
    for n in bank.layer_names:
        if n not in pretrained:
            raise ShapeError(f"no pretrained weight for layer {n}")
        exp = (bank.group_of(n).cfg.d_out, bank.group_of(n).cfg.d_in)
        if np.shape(pretrained[n]) != exp:
            raise ShapeError(f"layer {n}: checkpoint shape {np.shape(pretrained[n])} != {exp}")
    params = bank_params(bank)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    history = []
    initial = None
    above = 0
    for step in range(cfg.max_steps + 1):
        total, per_group, dl_dw = mimicry_loss(bank, pretrained, cfg.loss)
        rel = _group_rel_errors(bank, pretrained)
        for gid, gl in per_group.items():
            history.append((step, gid, gl, rel[gid]))
        if not np.isfinite(total):
            raise NumericalError(f"mimicry loss became {total} at step {step}", step=step)
        if initial is None:
            initial = total
        above = above + 1 if total > 10.0 * initial else 0
        if above >= 100:
            raise DivergenceError(
                f"mimicry loss above 10x its initial value for 100 steps (step {step})", step=step
            )
        if max(rel.values()) <= cfg.target_rel_error or step == cfg.max_steps:
            break
        grads = factor_grads(bank, dl_dw)
        opt.step(params, grads, step_decay(cfg.lr, step, cfg.decay, cfg.decay_every))
    log.info("retrofit stopped at step %d, max rel error %.3e", step, max(rel.values()))
    return bank, history


class NeuralMimicry(TransformerMixin, BaseEstimator):
    """Retrofit a checkpoint into shared bases and gated mixers.

    ``fit`` takes a ``{name: array}`` checkpoint (``<layer>.weight`` /
    ``<layer>.bias``); layers named in ``exclude`` stay dense.  ``transform``
    returns the regenerated weights for the layers present in its input.
    """

    def __init__(
        self,
        r=8,
        s=8,
        group_size=2,
        placement="PRE",
        activation="silu_gate",
        loss="smooth_l1",
        beta=1.0,
        init="orthogonal",
        basis_init="gaussian_0p01",
        lr=0.01,
        optimizer="adam",
        max_steps=10000,
        target_rel_error=1e-2,
        decay=0.5,
        decay_every=2000,
        exclude=(),
        seed=0,
    ):
        self.r = r
        self.s = s
        self.group_size = group_size
        self.placement = placement
        self.activation = activation
        self.loss = loss
        self.beta = beta
        self.init = init
        self.basis_init = basis_init
        self.lr = lr
        self.optimizer = optimizer
        self.max_steps = max_steps
        self.target_rel_error = target_rel_error
        self.decay = decay
        self.decay_every = decay_every
        self.exclude = exclude
        self.seed = seed

    def _mimicry_config(self):
        return MimicryConfig(
            loss=LossConfig(self.loss, self.beta),
            init=self.init,
            basis_init=self.basis_init,
            lr=self.lr,
            optimizer=self.optimizer,
            decay=self.decay,
            decay_every=self.decay_every,
            max_steps=self.max_steps,
            target_rel_error=self.target_rel_error,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        layers, weights, biases, dense = describe_checkpoint(dict(X), tuple(self.exclude))
        mcfg = self._mimicry_config()
        groups = group_layers(layers, self.group_size)
        bank = init_factors(
            groups, self.r, self.s, mcfg, GateConfig(self.placement, self.activation), biases
        )
        bank.dense = {k: np.array(v, dtype=np.float32) for k, v in dense.items()}
        self.bank_, history = retrofit(weights, bank, mcfg)
        self.bank_.meta.update(
            source_sha256=checkpoint_digest(dict(X)),
            layer_order=[k[: -len(".weight")] for k in dict(X) if k.endswith(".weight")],
        )
        self.loss_history_ = history
        self.rel_errors_ = self.bank_.relative_errors(weights)
        return self

    def transform(self, X=None):
        check_is_fitted(self, "bank_")
        weights = self.bank_.weights()
        if X is None:
            return weights
        keep = {k[: -len(".weight")] if k.endswith(".weight") else k for k in dict(X)}
        return {n: w for n, w in weights.items() if n in keep}
