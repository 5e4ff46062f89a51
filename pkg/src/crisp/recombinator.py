"""Weight-generating transforms: the coefficient-gated basis/mixer layer and its baselines.

Every transform produces a ``(d_out, d_in)`` weight.  Factor products of
shape ``(u, s)`` are flattened row-major into that shape, with
``u = d_in * d_out / s``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import as_matrix, matmul, result_dtype, svd

PLACEMENTS = ("PRE", "POST", "TEMP", "NONE")
ACTIVATIONS = ("silu_gate", "relu", "gelu", "none")

_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


@dataclass(frozen=True)
class FactorizationConfig:
    r: int
    s: int
    d_in: int
    d_out: int

    def __post_init__(self):
        if self.r < 1 or self.s < 1:
            raise ConfigError(f"r and s must be >= 1, got r={self.r}, s={self.s}")
        if self.d_in < 1 or self.d_out < 1:
            raise ConfigError(f"layer dims must be >= 1, got {self.d_out}x{self.d_in}")
        if (self.d_in * self.d_out) % self.s:
            raise ConfigError(
                f"s={self.s} does not divide d_in*d_out={self.d_in * self.d_out}"
            )

    @property
    def u(self):
        return self.d_in * self.d_out // self.s

    @property
    def basis_shape(self):
        return (self.u, self.r)

    @property
    def mixer_shape(self):
        return (self.r, self.s)

    def with_rank(self, r):
        return FactorizationConfig(r, self.s, self.d_in, self.d_out)


@dataclass(frozen=True)
class GateConfig:
    placement: str = "PRE"
    activation: str = "silu_gate"

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown gate placement {self.placement!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown gate activation {self.activation!r}")

    @property
    def is_linear(self):
        return self.placement == "NONE" or self.activation == "none"


NO_GATE = GateConfig("NONE", "none")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activate(x, kind):
    """Element-wise activation and its derivative, evaluated in float64."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "silu_gate":
        sig = _sigmoid(x)
        return x * sig, sig * (1.0 + x * (1.0 - sig))
    if kind == "relu":
        return np.maximum(x, 0.0), (x > 0).astype(np.float64)
    if kind == "gelu":
        t = np.tanh(_GELU_K * (x + _GELU_C * x**3))
        val = 0.5 * x * (1.0 + t)
        der = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
        return val, der
    if kind == "none":
        return x.copy(), np.ones_like(x)
    raise ConfigError(f"unknown activation {kind!r}")


def gate(a, cfg=GateConfig()):
    """Gated mixer and element-wise derivative d(gated)/d(a)."""
    a = np.asarray(a)
    val, der = activate(a, cfg.activation)
    dtype = result_dtype(a)
    return val.astype(dtype), der.astype(dtype)


def _branch_point(kind):
    # left end of the monotone branch: root of the derivative, by bisection
    if kind == "relu":
        return 0.0
    if kind == "none":
        return -np.inf
    lo, hi = -4.0, 0.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if activate(mid, kind)[1] < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


_BRANCH = {k: _branch_point(k) for k in ACTIVATIONS}


def activation_floor(kind):
    """Smallest value the activation attains (``-inf`` for the identity)."""
    x0 = _BRANCH[kind]
    return -np.inf if np.isinf(x0) else float(activate(x0, kind)[0])


def invert_activation(y, kind, steps=50):
    """Solve ``act(x) = y`` on the monotone branch by bisection.

    Returns ``(x, clamped)`` where ``clamped`` marks targets below the
    activation's minimum; those are mapped to the minimiser.
    """
    y = np.asarray(y, dtype=np.float64)
    if kind == "none":
        return y.copy(), np.zeros(y.shape, dtype=bool)
    x0 = _BRANCH[kind]
    floor = activation_floor(kind)
    clamped = y < floor
    target = np.maximum(y, floor)
    lo = np.full(y.shape, x0)
    hi = np.maximum(target, 0.0) + 1.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        below = activate(mid, kind)[0] < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi), clamped


# ---------------------------------------------------------------------------
# coefficient-gated layer


def _check_factors(b, a, cfg):
    if b.shape != cfg.basis_shape:
        raise ShapeError(f"basis shape {b.shape} != expected {cfg.basis_shape}")
    if a.shape != cfg.mixer_shape:
        raise ShapeError(f"mixer shape {a.shape} != expected {cfg.mixer_shape}")


def generate_weight(b, a, cfg, gate_cfg=GateConfig()):
    """Materialise a layer weight of shape ``(d_out, d_in)`` from basis ``b`` and mixer ``a``.

    PRE gates the mixer, POST activates the reconstructed weight, TEMP
    activates the basis, NONE is the plain product.
    """
    b = as_matrix(b, "basis")
    a = as_matrix(a, "mixer")
    _check_factors(b, a, cfg)
    p, act = gate_cfg.placement, gate_cfg.activation
    dtype = result_dtype(b, a)
    if p == "PRE":
        prod = matmul(b, gate(a, gate_cfg)[0])
    elif p == "TEMP":
        prod = matmul(activate(b, act)[0].astype(dtype), a)
    elif p == "POST":
        prod = activate(matmul(b, a), act)[0].astype(dtype)
    else:
        prod = matmul(b, a)
    return prod.reshape(cfg.d_out, cfg.d_in)


def pre_activation_product(b, a, cfg):
    """``reshape(b @ a)`` before any gating; what cluster merging preserves."""
    return matmul(as_matrix(b), as_matrix(a)).reshape(cfg.d_out, cfg.d_in)


def layer_backward(dl_dw, b, a, cfg, gate_cfg=GateConfig()):
    """Gradients of a scalar loss w.r.t. basis and mixer given ``dL/dW``."""
    b = as_matrix(b, "basis")
    a = as_matrix(a, "mixer")
    _check_factors(b, a, cfg)
    dl_dw = np.asarray(dl_dw)
    if dl_dw.shape != (cfg.d_out, cfg.d_in):
        raise ShapeError(f"dL/dW shape {dl_dw.shape} != {(cfg.d_out, cfg.d_in)}")
    dtype = result_dtype(dl_dw, b, a)
    g = dl_dw.astype(np.float64).reshape(cfg.u, cfg.s)
    b64 = b.astype(np.float64)
    a64 = a.astype(np.float64)
    p, act = gate_cfg.placement, gate_cfg.activation
    if p == "PRE":
        ga, da = activate(a64, act)
        grad_b = g @ ga.T
        grad_a = (b64.T @ g) * da
    elif p == "TEMP":
        fb, db = activate(b64, act)
        grad_b = (g @ a64.T) * db
        grad_a = fb.T @ g
    elif p == "POST":
        _, dp = activate(b64 @ a64, act)
        h = g * dp
        grad_b = h @ a64.T
        grad_a = b64.T @ h
    else:
        grad_b = g @ a64.T
        grad_a = b64.T @ g
    return grad_b.astype(dtype), grad_a.astype(dtype)


# ---------------------------------------------------------------------------
# baseline transforms


def lora_weight(w_p, b, a):
    """Low-rank update ``b @ a`` added to a frozen weight."""
    w_p = as_matrix(w_p, "w_p")
    prod = matmul(b, a)
    if prod.shape != w_p.shape:
        raise ShapeError(f"low-rank product {prod.shape} does not match weight {w_p.shape}")
    return (prod.astype(np.float64) + w_p).astype(result_dtype(w_p, prod))


def basis_sharing_weight(b, a):
    """Plain product ``b @ a`` with ``b`` of shape ``(d_out, r)`` shared across layers."""
    return matmul(b, a)


def recast_weight(b_star, coeffs, shape):
    """Average of ``b_star @ a_j`` over the rows ``a_j`` of ``coeffs``, reshaped to ``shape``."""
    b_star = as_matrix(b_star, "b_star")
    coeffs = np.atleast_2d(np.asarray(coeffs))
    k, r = coeffs.shape
    if k == 0:
        raise ConfigError("need at least one coefficient vector")
    if r != b_star.shape[1]:
        raise ShapeError(f"coefficient length {r} != basis rank {b_star.shape[1]}")
    if b_star.shape[0] != shape[0] * shape[1]:
        raise ShapeError(f"basis rows {b_star.shape[0]} != {shape[0]}*{shape[1]}")
    b64 = b_star.astype(np.float64)
    acc = np.matmul(b64, coeffs[0].astype(np.float64).reshape(r, 1))
    for j in range(1, k):
        acc = acc + np.matmul(b64, coeffs[j].astype(np.float64).reshape(r, 1))
    acc = acc / k
    return acc.astype(result_dtype(b_star, coeffs)).reshape(shape)


def svd_truncate(w, k):
    """Top-``k`` singular triplets ``(u_k, s_k, v_k)`` of ``w``."""
    w = as_matrix(w, "w")
    if not 1 <= k <= min(w.shape):
        raise ConfigError(f"k must lie in [1, {min(w.shape)}], got {k}")
    res = svd(w)
    return res.u[:, :k], res.s[:k], res.v[:, :k]


def param_count(cfg, layers_per_group, num_groups):
    """Stored factor parameters and trainable mixer parameters per layer (biases excluded)."""
    total = num_groups * cfg.u * cfg.r + num_groups * layers_per_group * cfg.r * cfg.s
    return total, cfg.r * cfg.s
