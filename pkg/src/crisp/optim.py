"""In-place optimizers over ``{name: ndarray}`` parameter dicts."""

import numpy as np

from .errors import ConfigError


class SGD:
    def __init__(self, lr=0.01):
        self.lr = lr

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            p = params[name]
            p[...] = (p.astype(np.float64) - lr * g).astype(p.dtype)


class Adam:
    def __init__(self, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p = params[name]
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p[...] = (p.astype(np.float64) - upd).astype(p.dtype)


def make_optimizer(name, lr):
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ConfigError(f"unknown optimizer {name!r}")


def step_decay(lr, step, factor, period):
    """Learning rate after ``step`` steps of a step scheduler."""
    if period <= 0:
        return lr
    return lr * factor ** (step // period)
