"""Dense kernels: products, losses, SVD, pseudo-inverse, weighted k-means.

Matrices are plain 2-D numpy arrays.  Storage is float32; every reduction is
carried out in float64 and rounded back.  Passing float64 inputs keeps the
result in float64, which is what the finite-difference checks rely on.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConfigError, NumericalError, ShapeError

LOSS_KINDS = ("smooth_l1", "huber", "mse", "l1")


def result_dtype(*arrays):
    """float64 if any input is float64, float32 otherwise."""
    for a in arrays:
        if np.asarray(a).dtype == np.float64:
            return np.float64
    return np.float32


def as_matrix(x, name="matrix"):
    a = np.asarray(x)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(result_dtype(a, b))


# ---------------------------------------------------------------------------
# element-wise regression losses


@dataclass(frozen=True)
class LossConfig:
    kind: str = "smooth_l1"
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not self.beta > 0:
            raise ConfigError(f"loss beta must be positive, got {self.beta}")


def loss_and_grad(pred, target, cfg=LossConfig()):
    """Mean-reduced loss between ``pred`` and ``target`` and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    dtype = result_dtype(pred, target)
    d = pred.astype(np.float64) - target.astype(np.float64)
    ad = np.abs(d)
    beta = cfg.beta
    if cfg.kind == "smooth_l1":
        small = ad < beta
        per = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
        g = np.where(small, d / beta, np.sign(d))
    elif cfg.kind == "huber":
        small = ad <= beta
        per = np.where(small, 0.5 * d * d, beta * (ad - 0.5 * beta))
        g = np.where(small, d, beta * np.sign(d))
    elif cfg.kind == "mse":
        per = d * d
        g = 2.0 * d
    else:
        per = ad
        g = np.sign(d)
    n = max(d.size, 1)
    return float(per.sum() / n), (g / n).astype(dtype)


# ---------------------------------------------------------------------------
# classification losses


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels):
    """Softmax cross-entropy averaged over the batch, with gradient w.r.t. logits."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ConfigError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), (grad / n).astype(result_dtype(logits))


def kl_divergence(student_logits, teacher_logits):
    """KL(softmax(student) || softmax(teacher)), batch mean, gradient w.r.t. the student."""
    s = as_matrix(student_logits, "student_logits")
    t = as_matrix(teacher_logits, "teacher_logits")
    if s.shape != t.shape:
        raise ShapeError(f"student/teacher logits differ: {s.shape} vs {t.shape}")
    ls = log_softmax(s)
    lt = log_softmax(t)
    p = np.exp(ls)
    per_row = (p * (ls - lt)).sum(axis=1, keepdims=True)
    n = s.shape[0]
    grad = p * ((ls - lt) - per_row) / n
    return float(per_row.mean()), grad.astype(result_dtype(s))


# ---------------------------------------------------------------------------
# SVD via Jacobi eigendecomposition of the Gram matrix


@dataclass
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        return matmul(self.u * self.s, self.v.T)


def jacobi_eigh(g, max_sweeps=100, tol=1e-10):
    """Eigen-decompose a symmetric matrix with cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` unsorted.  Convergence is declared
    once the off-diagonal Frobenius norm drops below ``tol * ||g||_F``.
    """
    a = np.array(g, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a) or 1.0
    off = 0.0
    mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt((a[mask] ** 2).sum())
        if off <= tol * scale:
            return np.diag(a).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                diff = a[q, q] - a[p, p]
                if abs(apq) <= 1e-300 or abs(apq) < 1e-18 * abs(diff):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = diff / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / abs(theta)
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cols = a[:, [p, q]]
                a[:, p] = c * cols[:, 0] - s * cols[:, 1]
                a[:, q] = s * cols[:, 0] + c * cols[:, 1]
                rows = a[[p, q], :]
                a[p, :] = c * rows[0] - s * rows[1]
                a[q, :] = s * rows[0] + c * rows[1]
                vc = v[:, [p, q]]
                v[:, p] = c * vc[:, 0] - s * vc[:, 1]
                v[:, q] = s * vc[:, 0] + c * vc[:, 1]
    raise NumericalError(
        f"Jacobi eigensolver did not converge in {max_sweeps} sweeps (off-diagonal norm {off:.3e})",
        residual=off,
    )


def _orthonormal_columns(b, s):
    """Normalise columns of ``b`` by ``s``; fill rank-deficient slots by completion."""
    m, k = b.shape
    u = np.zeros((m, k))
    s_max = s.max() if s.size else 0.0
    floor = s_max * 1e-12
    for j in range(k):
        if s[j] > floor and s[j] > 0:
            x = b[:, j] / s[j]
        else:
            # pick the canonical vector least covered by the columns so far
            resid = 1.0 - (u[:, :j] ** 2).sum(axis=1)
            x = np.zeros(m)
            x[int(np.argmax(resid))] = 1.0
        for _ in range(2):
            x = x - u[:, :j] @ (u[:, :j].T @ x)
        nrm = np.linalg.norm(x)
        if nrm > 0:
            u[:, j] = x / nrm
    return u


def _svd_tall(a, max_sweeps, tol):
    evals, vecs = jacobi_eigh(a.T @ a, max_sweeps, tol)
    v = vecs[:, np.argsort(-evals, kind="stable")]
    b = a @ v
    s = np.linalg.norm(b, axis=0)
    order = np.argsort(-s, kind="stable")
    s, v, b = s[order], v[:, order], b[:, order]
    return _orthonormal_columns(b, s), s, v


def svd(m, max_sweeps=100, tol=1e-10):
    """Thin SVD ``m = u @ diag(s) @ v.T`` with ``k = min(rows, cols)``.

    Singular values come out non-increasing; each column of ``u`` is signed so
    its largest-magnitude entry is positive.
    """
    a = as_matrix(m, "m")
    if a.size == 0:
        raise ShapeError("svd of an empty matrix")
    if not np.all(np.isfinite(a)):
        raise NumericalError("svd input contains non-finite entries")
    dtype = result_dtype(a)
    a = a.astype(np.float64)
    if a.shape[0] >= a.shape[1]:
        u, s, v = _svd_tall(a, max_sweeps, tol)
    else:
        v, s, u = _svd_tall(a.T, max_sweeps, tol)
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return SvdResult(u.astype(dtype), s.astype(dtype), v.astype(dtype))


def pseudo_inverse(m, rcond=1e-6):
    """Moore-Penrose inverse; singular values below ``rcond * s_max`` count as zero."""
    a = as_matrix(m, "m")
    res = svd(a.astype(np.float64))
    s_max = res.s[0] if res.s.size else 0.0
    keep = res.s > rcond * s_max
    inv = np.zeros_like(res.s)
    inv[keep] = 1.0 / res.s[keep]
    return ((res.v * inv) @ res.u.T).astype(result_dtype(a))


# ---------------------------------------------------------------------------
# random projection and weighted k-means


def random_projection(m, d_out=None, seed=0):
    """Project rows of ``m`` with a seeded Gaussian map scaled by ``1/sqrt(d_out)``."""
    a = as_matrix(m, "m")
    if d_out is None:
        d_out = min(64, a.shape[1])
    if d_out < 1:
        raise ConfigError(f"projection dimension must be >= 1, got {d_out}")
    g = np.random.default_rng(seed).standard_normal((a.shape[1], d_out)) / np.sqrt(d_out)
    return matmul(a, g.astype(result_dtype(a)))


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x, w, k, rng):
    n = x.shape[0]
    chosen = [int(rng.choice(n, p=w / w.sum()))]
    closest = _sq_dists(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        pot = w * closest
        if pot.sum() > 0:
            idx = int(rng.choice(n, p=pot / pot.sum()))
        else:
            # all mass already covered: take the lowest-index point not yet used
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[np.argmax(closest[free])])
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[[idx]])[:, 0])
    return x[chosen].copy()


def _repair_empty(labels, d2, k):
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k)
    for e in range(k):
        if counts[e]:
            continue
        own = d2[np.arange(len(labels)), labels]
        own = np.where(counts[labels] > 1, own, -1.0)
        i = int(np.argmax(own))
        counts[labels[i]] -= 1
        labels[i] = e
        counts[e] = 1
    return labels


def _centroids(x, w, labels, k):
    c = np.zeros((k, x.shape[1]))
    for j in range(k):
        members = labels == j
        tw = w[members].sum()
        if tw > 0:
            c[j] = (w[members, None] * x[members]).sum(0) / tw
        else:
            c[j] = x[members].mean(0)
    return c


def weighted_kmeans(points, weights, k, seed=0, max_iter=100):
    """Lloyd's algorithm with importance-weighted centroids and weighted k-means++ seeding."""
    x = as_matrix(points, "points").astype(np.float64)
    n = x.shape[0]
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (n,):
        raise ShapeError(f"expected {n} weights, got {w.shape}")
    if k < 1 or k > n:
        raise ConfigError(f"k must lie in [1, {n}], got {k}")
    if np.any(w < 0) or not np.any(w > 0):
        raise ConfigError("weights must be non-negative with at least one positive entry")
    if k == n:
        return ClusterResult(np.arange(n), x.copy(), 0.0, [0.0], 0)

    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, w, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        new = _repair_empty(np.argmin(d2, axis=1), d2, k)
        centers = _centroids(x, w, new, k)
        history.append(float((w * ((x - centers[new]) ** 2).sum(1)).sum()))
        if labels is not None and np.array_equal(new, labels):
            labels = new
            break
        labels = new
    return ClusterResult(labels, centers, history[-1], history, it)


class WeightedKMeans(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`weighted_kmeans`.

    Parameters
    ----------
    n_clusters : int
        Number of clusters.
    max_iter : int
        Cap on Lloyd iterations.
    random_state : int
        Seed for the k-means++ seeding.
    """

    def __init__(self, n_clusters=8, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None, sample_weight=None):
        X = check_array(X, dtype=np.float64)
        if sample_weight is None:
            sample_weight = np.ones(X.shape[0])
        res = weighted_kmeans(X, sample_weight, self.n_clusters, self.random_state, self.max_iter)
        self.cluster_centers_ = res.centroids
        self.labels_ = res.assignments
        self.inertia_ = res.inertia
        self.n_iter_ = res.n_iter
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return np.sqrt(_sq_dists(X, self.cluster_centers_))

    def predict(self, X):
        return np.argmin(self.transform(X), axis=1)
