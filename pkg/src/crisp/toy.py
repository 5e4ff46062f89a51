"""Desk-scale MLP classifier with pluggable weight backends, plus synthetic tasks.

Every linear layer exposes ``weight()``, its named parameters and a
``grads(dW)`` method that chains ``dL/dW`` into those parameters, so one
hand-written backward pass serves dense, factorised and adapter layers.
Parameter names are global: ``layers.<name>.<param>`` for per-layer tensors
and ``groups.<gid>.basis`` for shared bases.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .numerics import cross_entropy, matmul, result_dtype, softmax, svd
from .recombinator import layer_backward, recast_weight

log = logging.getLogger(__name__)

BACKENDS = ("dense", "crisp", "lora", "recast", "basis_sharing", "svd")


# ---------------------------------------------------------------------------
# layers


class DenseLinear:
    backend = "dense"

    def __init__(self, name, weight, bias):
        self.name = name
        self.w = weight
        self.bias = bias

    @property
    def shape(self):
        return self.w.shape

    def weight(self):
        return self.w

    def params(self):
        return {f"layers.{self.name}.weight": self.w}

    def adapter_keys(self):
        return set(self.params())

    def grads(self, dw):
        return {f"layers.{self.name}.weight": dw}


class CrispLinear:
    """Layer whose weight is generated from its group's shared basis and its own mixer."""

    def __init__(self, name, group, gate_cfg, backend="crisp"):
        self.name = name
        self.group = group
        self.gate = gate_cfg
        self.backend = backend

    @property
    def shape(self):
        return (self.group.cfg.d_out, self.group.cfg.d_in)

    @property
    def bias(self):
        return self.group.biases[self.name]

    @property
    def basis_key(self):
        return f"groups.{self.group.group_id}.basis"

    @property
    def mixer_key(self):
        return f"layers.{self.name}.mixer"

    def weight(self):
        return self.group.weight(self.name, self.gate)

    def params(self):
        return {self.basis_key: self.group.basis, self.mixer_key: self.group.mixers[self.name]}

    def adapter_keys(self):
        return {self.mixer_key}

    def grads(self, dw):
        db, da = layer_backward(dw, self.group.basis, self.group.mixers[self.name], self.group.cfg, self.gate)
        return {self.basis_key: db, self.mixer_key: da}


class LoraLinear:
    backend = "lora"

    def __init__(self, name, w_p, b, a, bias):
        self.name = name
        self.w_p = w_p
        self.b = b
        self.a = a
        self.bias = bias

    @property
    def shape(self):
        return self.w_p.shape

    def weight(self):
        return (self.w_p.astype(np.float64) + matmul(self.b, self.a)).astype(self.w_p.dtype)

    def params(self):
        return {f"layers.{self.name}.lora_b": self.b, f"layers.{self.name}.lora_a": self.a}

    def adapter_keys(self):
        return set(self.params())

    def grads(self, dw):
        dw = dw.astype(np.float64)
        return {
            f"layers.{self.name}.lora_b": (dw @ self.a.T.astype(np.float64)).astype(self.b.dtype),
            f"layers.{self.name}.lora_a": (self.b.T.astype(np.float64) @ dw).astype(self.a.dtype),
        }


class RecastLinear:
    """Flattened basis averaged over ``K`` coefficient vectors (rows of ``coeffs``)."""

    backend = "recast"

    def __init__(self, name, basis, coeffs, bias, shape):
        self.name = name
        self.basis = basis
        self.coeffs = coeffs
        self.bias = bias
        self._shape = tuple(shape)

    @property
    def shape(self):
        return self._shape

    def weight(self):
        return recast_weight(self.basis, self.coeffs, self._shape)

    def params(self):
        return {f"layers.{self.name}.basis": self.basis, f"layers.{self.name}.coeffs": self.coeffs}

    def adapter_keys(self):
        return {f"layers.{self.name}.coeffs"}

    def grads(self, dw):
        g = dw.astype(np.float64).reshape(-1, 1)
        k = self.coeffs.shape[0]
        mean_a = self.coeffs.astype(np.float64).mean(axis=0, keepdims=True)
        d_coeff = (self.basis.T.astype(np.float64) @ g).T / k
        return {
            f"layers.{self.name}.basis": (g @ mean_a).astype(self.basis.dtype),
            f"layers.{self.name}.coeffs": np.repeat(d_coeff, k, axis=0).astype(self.coeffs.dtype),
        }


class SvdLinear:
    """Truncated SVD ``U diag(s) V^T``; adaptation trains the singular values only."""

    backend = "svd"

    def __init__(self, name, u, s, v, bias):
        self.name = name
        self.u = u
        self.s = s
        self.v = v
        self.bias = bias

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])

    def weight(self):
        return matmul(self.u * self.s, self.v.T)

    def params(self):
        return {
            f"layers.{self.name}.u": self.u,
            f"layers.{self.name}.s": self.s,
            f"layers.{self.name}.v": self.v,
        }

    def adapter_keys(self):
        return {f"layers.{self.name}.s"}

    def grads(self, dw):
        dw = dw.astype(np.float64)
        u = self.u.astype(np.float64)
        v = self.v.astype(np.float64)
        s = self.s.astype(np.float64)
        return {
            f"layers.{self.name}.u": ((dw @ v) * s).astype(self.u.dtype),
            f"layers.{self.name}.s": np.einsum("ij,ik,jk->k", dw, u, v).astype(self.s.dtype),
            f"layers.{self.name}.v": ((dw.T @ u) * s).astype(self.v.dtype),
        }


# ---------------------------------------------------------------------------
# model


class ToyMLP:
    """ReLU MLP; the last layer is the classifier head and is always dense."""

    def __init__(self, layers, bank=None):
        if not layers:
            raise ConfigError("a model needs at least one layer")
        self.layers = list(layers)
        self.bank = bank
        self._cache = None
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.shape[0] != nxt.shape[1]:
                raise ShapeError(f"layer {prev.name} output {prev.shape[0]} != {nxt.name} input {nxt.shape[1]}")

    # -- construction ------------------------------------------------------

    @classmethod
    def dense(cls, dims, seed=0, dtype=np.float32):
        """He-initialised dense MLP with layers ``fc0 .. fc{n-2}`` and ``head``."""
        rng = np.random.default_rng(seed)
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            name = "head" if i == len(dims) - 2 else f"fc{i}"
            w = rng.normal(0.0, np.sqrt(2.0 / d_in), (d_out, d_in)).astype(dtype)
            layers.append(DenseLinear(name, w, np.zeros(d_out, dtype)))
        return cls(layers)

    @classmethod
    def from_checkpoint(cls, tensors):
        layers = []
        for key, w in tensors.items():
            if key.endswith(".weight"):
                name = key[: -len(".weight")]
                w = np.array(w, dtype=np.float32)
                b = tensors.get(f"{name}.bias")
                b = np.zeros(w.shape[0], np.float32) if b is None else np.array(b, dtype=np.float32)
                layers.append(DenseLinear(name, w, b))
        return cls(layers)

    @classmethod
    def from_bank(cls, bank, layer_order=None, backend="crisp"):
        """Model whose factorised layers read straight from ``bank`` (no copies)."""
        order = layer_order or bank.meta.get("layer_order")
        if not order:
            raise ConfigError("bank carries no layer order; pass layer_order")
        factored = {n: g for g in bank.groups for n in g.members}
        layers = []
        for name in order:
            if name in factored:
                layers.append(CrispLinear(name, factored[name], bank.gate, backend))
            else:
                w = bank.dense.get(f"{name}.weight")
                if w is None:
                    raise ConfigError(f"layer {name} is neither factorised nor stored dense")
                b = bank.dense.get(f"{name}.bias")
                if b is None:
                    b = bank.dense[f"{name}.bias"] = np.zeros(w.shape[0], w.dtype)
                layers.append(DenseLinear(name, w, b))
        return cls(layers, bank)

    def to_checkpoint(self):
        """Materialised dense tensors ``<layer>.weight`` / ``<layer>.bias``."""
        out = {}
        for layer in self.layers:
            out[f"{layer.name}.weight"] = np.array(layer.weight(), dtype=np.float32)
            out[f"{layer.name}.bias"] = np.array(layer.bias, dtype=np.float32)
        return out

    @property
    def layer_order(self):
        return [l.name for l in self.layers]

    @property
    def head(self):
        return self.layers[-1]

    # -- parameters --------------------------------------------------------

    def parameters(self, mode="full", train_head=True, train_bias=False):
        """Named trainable arrays.

        ``full`` trains every weight-producing tensor of the hidden layers;
        ``adapt`` trains only each backend's adapter tensors (mixers for the
        factorised backends).  The head follows ``train_head`` in both modes.
        """
        if mode not in ("full", "adapt", "none"):
            raise ConfigError(f"unknown training mode {mode!r}")
        out = {}
        if mode == "none":
            return out
        for layer in self.layers[:-1]:
            params = layer.params()
            keys = params.keys() if mode == "full" else layer.adapter_keys()
            for k in keys:
                out[k] = params[k]
            if train_bias:
                out[f"layers.{layer.name}.bias"] = layer.bias
        if train_head:
            out[f"layers.{self.head.name}.weight"] = self.head.w
            out[f"layers.{self.head.name}.bias"] = self.head.bias
        return out

    def all_parameters(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params())
            out[f"layers.{layer.name}.bias"] = layer.bias
        return out

    def trainable_count(self, mode="adapt", train_head=True, train_bias=False):
        return sum(p.size for p in self.parameters(mode, train_head, train_bias).values())

    def snapshot(self):
        return {k: v.copy() for k, v in self.all_parameters().items()}

    def restore(self, snap):
        for k, v in self.all_parameters().items():
            v[...] = snap[k]

    def astype(self, dtype):
        """Cast every parameter in place (used for float64 gradient checks)."""
        groups = {}
        for layer in self.layers:
            if isinstance(layer, CrispLinear):
                groups[id(layer.group)] = layer.group
                continue
            for attr, val in list(vars(layer).items()):
                if isinstance(val, np.ndarray):
                    setattr(layer, attr, val.astype(dtype))
        for g in groups.values():
            g.basis = g.basis.astype(dtype)
            g.mixers = {k: v.astype(dtype) for k, v in g.mixers.items()}
            g.biases = {k: v.astype(dtype) for k, v in g.biases.items()}
        return self

    # -- forward / backward ------------------------------------------------

    def forward(self, x):
        """Return ``(logits, features)``; features are post-ReLU hidden activations."""
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.layers[0].shape[1]:
            raise ShapeError(f"input shape {x.shape} does not match model input dim {self.layers[0].shape[1]}")
        h = x.astype(result_dtype(self.layers[0].weight()))
        inputs, weights, masks, feats = [], [], [], []
        for i, layer in enumerate(self.layers):
            w = layer.weight()
            z = (matmul(h, w.T).astype(np.float64) + layer.bias).astype(w.dtype)
            inputs.append(h)
            weights.append(w)
            if i < len(self.layers) - 1:
                mask = z > 0
                h = np.where(mask, z, 0).astype(z.dtype)
                masks.append(mask)
                feats.append(h)
            else:
                h = z
        self._cache = (inputs, weights, masks)
        return h, feats

    def backward(self, dl_dlogits, feature_grads=None, mode="full", train_head=True, train_bias=False, weight_grads=None):
        """Gradients for the parameters returned by ``parameters(mode, ...)``.

        ``feature_grads`` adds ``dL/dfeature`` at each hidden layer;
        ``weight_grads`` adds a direct ``dL/dW`` per layer name (weight-space
        penalties).  Requires a preceding :meth:`forward`.
        """
        if self._cache is None:
            raise ConfigError("backward called without a cached forward pass")
        inputs, weights, masks = self._cache
        wanted = self.parameters(mode, train_head, train_bias)
        grads = {}
        g = np.asarray(dl_dlogits, dtype=np.float64)
        n_layers = len(self.layers)
        for i in range(n_layers - 1, -1, -1):
            layer = self.layers[i]
            if i < n_layers - 1:
                if feature_grads is not None and feature_grads[i] is not None:
                    g = g + feature_grads[i]
                g = g * masks[i]
            dw = g.T @ inputs[i].astype(np.float64)
            if weight_grads and layer.name in weight_grads:
                dw = dw + weight_grads[layer.name]
            bias_key = f"layers.{layer.name}.bias"
            if bias_key in wanted:
                grads[bias_key] = g.sum(axis=0).astype(layer.bias.dtype)
            keys = set(layer.params()) & set(wanted)
            if keys:
                for k, v in layer.grads(dw.astype(weights[i].dtype)).items():
                    if k in keys:
                        grads[k] = grads[k] + v if k in grads else v
            if i:
                g = g @ weights[i].astype(np.float64)
        return grads

    # -- inference -----------------------------------------------------------

    def predict_proba(self, x):
        return softmax(self.forward(x)[0])

    def predict(self, x):
        return np.argmax(self.forward(x)[0], axis=1)

    def accuracy(self, x, y):
        return float((self.predict(x) == np.asarray(y)).mean())


def with_backend(model, backend, rank=4, seed=0, k=1):
    """Copy of a dense model whose hidden layers use a baseline adapter backend.

    ``lora`` starts from a zero update, ``svd`` keeps the top-``rank`` triplets,
    ``recast`` keeps ``rank`` columns of a flattened SVD basis with ``k``
    identical coefficient vectors.  The head stays dense.
    """
    if backend not in ("dense", "lora", "svd", "recast"):
        raise ConfigError(f"with_backend does not build {backend!r}; use ToyMLP.from_bank for factorised backends")
    rng = np.random.default_rng(seed)
    layers = []
    for layer in model.layers[:-1]:
        w = np.array(layer.weight(), dtype=np.float32)
        b = np.array(layer.bias, dtype=np.float32)
        d_out, d_in = w.shape
        if backend == "dense":
            layers.append(DenseLinear(layer.name, w, b))
        elif backend == "lora":
            a = rng.normal(0.0, 1.0 / np.sqrt(d_in), (rank, d_in)).astype(np.float32)
            layers.append(LoraLinear(layer.name, w, np.zeros((d_out, rank), np.float32), a, b))
        elif backend == "svd":
            res = svd(w)
            layers.append(SvdLinear(layer.name, res.u[:, :rank].copy(), res.s[:rank].copy(), res.v[:, :rank].copy(), b))
        else:
            flat = w.reshape(-1, 1).astype(np.float64)
            basis = np.hstack([flat, rng.normal(0.0, 1e-3, (flat.shape[0], rank - 1))])
            coeffs = np.zeros((k, rank))
            coeffs[:, 0] = 1.0
            layers.append(RecastLinear(layer.name, basis.astype(np.float32), coeffs.astype(np.float32), b, w.shape))
    head = model.head
    layers.append(DenseLinear(head.name, np.array(head.w, dtype=np.float32), np.array(head.bias, dtype=np.float32)))
    return ToyMLP(layers)


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SyntheticTask:
    generator: str = "gaussian_blobs"
    n_classes: int = 4
    dim: int = 16
    noise: float = 0.5
    n_train: int = 512
    n_val: int = 256
    n_test: int = 512
    rotation: float = 0.0
    label_shift: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.generator not in ("gaussian_blobs", "concentric_rings"):
            raise ConfigError(f"unknown task generator {self.generator!r}")
        if self.n_classes < 2 or self.dim < 2:
            raise ConfigError("a task needs >= 2 classes and >= 2 dimensions")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one sample")

    def shifted(self, rotation, label_shift):
        return SyntheticTask(
            self.generator, self.n_classes, self.dim, self.noise, self.n_train, self.n_val,
            self.n_test, rotation, label_shift, self.seed,
        )

    @property
    def source(self):
        return self.shifted(0.0, 0)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    spec: SyntheticTask = field(default=None, repr=False)


def _plane_rotation(dim, angle):
    """Rotate every coordinate pair (0,1), (2,3), ... by ``angle``."""
    r = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        r[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return r


def make_task(spec):
    """Deterministic train/val/test splits; shifts are applied on top of the source draw."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val + spec.n_test
    y = rng.integers(0, spec.n_classes, n)
    if spec.generator == "gaussian_blobs":
        centers = rng.normal(0.0, 1.0, (spec.n_classes, spec.dim))
        x = centers[y] + spec.noise * rng.standard_normal((n, spec.dim))
    else:
        frame = np.linalg.qr(rng.standard_normal((spec.dim, 2)))[0]
        theta = rng.uniform(0.0, 2 * np.pi, n)
        radius = 1.0 + y
        ring = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
        x = ring @ frame.T + spec.noise * rng.standard_normal((n, spec.dim))
    if spec.rotation:
        x = x @ _plane_rotation(spec.dim, spec.rotation).T
    if spec.label_shift:
        y = (y + spec.label_shift) % spec.n_classes
    x = x.astype(np.float32)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return Dataset(x[:a], y[:a], x[a:b], y[a:b], x[b:], y[b:], spec)


# ---------------------------------------------------------------------------
# training loop


def minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def run_epochs(n, batch_loss, params, optimizer, epochs, batch_size, seed, lr_at=None, on_epoch=None):
    """Generic minibatch loop.

    ``batch_loss(idx)`` returns ``(loss, grads)``; ``on_epoch(epoch, mean_loss)``
    may return True to stop early.  Raises on a non-finite loss.
    """
    if n == 0:
        raise ConfigError("empty dataset")
    rng = np.random.default_rng(seed)
    step = 0
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in minibatches(n, batch_size, rng):
            loss, grads = batch_loss(idx)
            if not np.isfinite(loss):
                raise NumericalError(f"training loss became {loss} at epoch {epoch}, step {step}", step=step)
            optimizer.step(params, grads, None if lr_at is None else lr_at(step))
            total += loss * len(idx)
            count += len(idx)
            step += 1
        history.append(total / count)
        if on_epoch is not None and on_epoch(epoch, total / count):
            break
    return history


def train_classifier(model, x, y, epochs=30, batch_size=32, lr=0.01, seed=0, mode="full", optimizer="adam", train_head=True):
    """Fit ``model`` to labels with cross-entropy; returns per-epoch mean loss."""
    from .optim import make_optimizer

    params = model.parameters(mode, train_head)
    opt = make_optimizer(optimizer, lr)

    def batch_loss(idx):
        logits, _ = model.forward(x[idx])
        loss, g = cross_entropy(logits, y[idx])
        return loss, model.backward(g, mode=mode, train_head=train_head)

    return run_epochs(len(x), batch_loss, params, opt, epochs, batch_size, seed)
