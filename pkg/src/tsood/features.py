"""Per-class density and geometry models fitted on pre-logit features.

Every model is fitted from ``(features, labels, n_classes)`` and scores a
batch of feature rows against each class, returning an ``(n, n_classes)``
array. All arithmetic is float64.

Each model can be flattened with ``state()`` into a JSON-able dict plus a
dict of named arrays, and rebuilt with ``from_state``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import digamma

COV_REL_REG = 1e-3
COV_ABS_FLOOR = 1e-6


class InsufficientSamplesError(ValueError):
    pass


class NoConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"one-class SVM did not converge after {iterations} iterations "
                         f"(KKT residual {residual:.3g})")
        self.residual = residual
        self.iterations = iterations


def _by_class(features, labels, n_classes: int, minimum: int = 2) -> list[np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features must be (n, F) with one label per row")
    groups = [features[labels == c] for c in range(n_classes)]
    for c, g in enumerate(groups):
        if g.shape[0] < minimum:
            raise InsufficientSamplesError(f"class {c} has {g.shape[0]} samples; need >= {minimum}")
    return groups


def _rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


# --- tied Gaussian --------------------------------------------------------------

@dataclass
class GaussianClassModel:
    means: np.ndarray  # (C, F)
    covariance: np.ndarray  # (F, F), pooled within-class, unregularized
    reg: float
    precision: np.ndarray  # inverse of covariance + reg * I

    def distances(self, x) -> np.ndarray:
        return mahalanobis_distance(self, x)

    def state(self):
        return {"kind": "gaussian", "reg": self.reg}, {
            "means": self.means, "covariance": self.covariance, "precision": self.precision}

    @classmethod
    def from_state(cls, meta, arrays):
        return cls(arrays["means"], arrays["covariance"], float(meta["reg"]), arrays["precision"])


def fit_gaussian_tied(features, labels, n_classes: int) -> GaussianClassModel:
    groups = _by_class(features, labels, n_classes)
    F = groups[0].shape[1]
    N = sum(g.shape[0] for g in groups)
    means = np.stack([g.mean(axis=0) for g in groups])
    scatter = np.zeros((F, F))
    for g, mu in zip(groups, means):
        r = g - mu
        scatter += r.T @ r
    cov = scatter / (N - n_classes)
    cov = 0.5 * (cov + cov.T)
    reg = max(COV_REL_REG * float(np.trace(cov)) / F, COV_ABS_FLOOR)
    factor = cho_factor(cov + reg * np.eye(F), lower=True)
    precision = cho_solve(factor, np.eye(F))
    return GaussianClassModel(means, cov, reg, 0.5 * (precision + precision.T))


def mahalanobis_distance(model: GaussianClassModel, x) -> np.ndarray:
    """Squared Mahalanobis distance of each row to each class mean."""
    diff = _rows(x)[:, None, :] - model.means[None, :, :]
    d = np.einsum("ncf,fg,ncg->nc", diff, model.precision, diff)
    return np.maximum(d, 0.0)


# --- PCA ------------------------------------------------------------------------

@dataclass
class PcaClassModel:
    means: list[np.ndarray]
    components: list[np.ndarray]  # each (k_c, F), orthonormal rows
    explained_ratio: list[np.ndarray]  # per-component variance fractions
    retained: float

    def errors(self, x) -> np.ndarray:
        return reconstruction_error(self, x)

    @property
    def ks(self) -> list[int]:
        return [v.shape[0] for v in self.components]

    def state(self):
        arrays = {}
        for c, (m, v, r) in enumerate(zip(self.means, self.components, self.explained_ratio)):
            arrays[f"c{c}.mean"], arrays[f"c{c}.components"], arrays[f"c{c}.ratio"] = m, v, r
        return {"kind": "pca", "retained": self.retained, "n_classes": len(self.means),
                "ks": self.ks}, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        C = int(meta["n_classes"])
        return cls([arrays[f"c{c}.mean"] for c in range(C)],
                   [arrays[f"c{c}.components"] for c in range(C)],
                   [arrays[f"c{c}.ratio"] for c in range(C)], float(meta["retained"]))


def explained_variance(x) -> tuple[np.ndarray, np.ndarray]:
    """Principal directions (rows) and their variance fractions for centered ``x``."""
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    var = s ** 2
    total = var.sum()
    ratio = var / total if total > 0 else np.zeros_like(var)
    return vt, ratio


def fit_pca(features, labels, n_classes: int, retained: float = 0.97) -> PcaClassModel:
    if not 0 < retained <= 1:
        raise ValueError("retained must be in (0, 1]")
    groups = _by_class(features, labels, n_classes)
    means, comps, ratios = [], [], []
    for g in groups:
        m = g.mean(axis=0)
        vt, ratio = explained_variance(g - m)
        if ratio.sum() == 0:
            k = 0
        else:
            # tolerance so that retained=1.0 is reachable despite rounding in cumsum
            k = int(np.searchsorted(np.cumsum(ratio), retained - 1e-12)) + 1
            k = min(k, vt.shape[0])
        means.append(m)
        comps.append(vt[:k].copy())
        ratios.append(ratio)
    return PcaClassModel(means, comps, ratios, retained)


def reconstruction_error(model: PcaClassModel, x) -> np.ndarray:
    """Squared distance of each row to each class's principal subspace."""
    x = _rows(x)
    out = np.empty((x.shape[0], len(model.means)))
    for c, (m, v) in enumerate(zip(model.means, model.components)):
        r = x - m
        resid = r - (r @ v.T) @ v
        out[:, c] = np.einsum("nf,nf->n", resid, resid)
    return out


# --- Isolation Forest -------------------------------------------------------------

def average_path_length(n) -> np.ndarray:
    """c(n): expected unsuccessful-search path length in a BST of n nodes."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n > 2
    harmonic = digamma(n[big]) + np.euler_gamma  # H(n - 1)
    out[big] = 2.0 * harmonic - 2.0 * (n[big] - 1.0) / n[big]
    out[n == 2] = 1.0
    return out


@dataclass
class _Forest:
    """All trees of one class packed into flat node arrays."""

    feature: np.ndarray  # int64, -1 at leaves
    threshold: np.ndarray
    left: np.ndarray  # int64 child index, -1 at leaves
    right: np.ndarray
    size: np.ndarray  # residual sample count at leaves
    depth: np.ndarray
    roots: np.ndarray
    psi: int

    def path_lengths(self, x: np.ndarray) -> np.ndarray:
        """(n_trees, n) path lengths including the c(size) leaf credit."""
        node = np.repeat(self.roots[:, None], x.shape[0], axis=1)
        cols = np.arange(x.shape[0])[None, :]
        while True:
            inner = self.left[node] >= 0
            if not inner.any():
                break
            f = np.where(inner, self.feature[node], 0)
            go_left = x[cols, f] < self.threshold[node]
            step = np.where(go_left, self.left[node], self.right[node])
            node = np.where(inner, step, node)
        return self.depth[node] + average_path_length(self.size[node])


@dataclass
class IsolationForestModel:
    forests: list[_Forest]
    n_trees: int
    psi: int
    seed: int

    def scores(self, x) -> np.ndarray:
        return if_anomaly_score(self, x)

    def state(self):
        arrays = {}
        for c, f in enumerate(self.forests):
            for name in ("feature", "threshold", "left", "right", "size", "depth", "roots"):
                arrays[f"c{c}.{name}"] = getattr(f, name)
        meta = {"kind": "iforest", "n_trees": self.n_trees, "psi": self.psi, "seed": self.seed,
                "n_classes": len(self.forests), "class_psi": [f.psi for f in self.forests]}
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        forests = []
        for c, psi in enumerate(meta["class_psi"]):
            parts = {k: arrays[f"c{c}.{k}"] for k in ("feature", "threshold", "left", "right", "size", "depth", "roots")}
            for k in ("feature", "left", "right", "roots"):
                parts[k] = parts[k].astype(np.int64)
            forests.append(_Forest(psi=int(psi), **parts))
        return cls(forests, int(meta["n_trees"]), int(meta["psi"]), int(meta["seed"]))


def _grow_forest(x: np.ndarray, n_trees: int, psi: int, rng: np.random.Generator) -> _Forest:
    max_depth = int(math.ceil(math.log2(psi)))
    feature, threshold, left, right, size, depth, roots = [], [], [], [], [], [], []

    def new_node(n, d):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(d)
        return len(feature) - 1

    for _ in range(n_trees):
        sample = x[rng.choice(x.shape[0], size=psi, replace=False)]
        root = new_node(psi, 0)
        roots.append(root)
        stack = [(root, sample)]
        while stack:
            node, pts = stack.pop()
            d = depth[node]
            if d >= max_depth or pts.shape[0] <= 1:
                continue
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            usable = np.flatnonzero(hi > lo)
            if usable.size == 0:
                continue
            f = int(usable[rng.integers(usable.size)])
            t = float(rng.uniform(lo[f], hi[f]))
            mask = pts[:, f] < t
            l_idx = new_node(int(mask.sum()), d + 1)
            r_idx = new_node(int((~mask).sum()), d + 1)
            feature[node], threshold[node], left[node], right[node] = f, t, l_idx, r_idx
            stack.append((r_idx, pts[~mask]))
            stack.append((l_idx, pts[mask]))

    return _Forest(np.array(feature, np.int64), np.array(threshold), np.array(left, np.int64),
                   np.array(right, np.int64), np.array(size, np.float64), np.array(depth, np.float64),
                   np.array(roots, np.int64), psi)


def fit_isolation_forest(features, labels, n_classes: int, n_trees: int = 100,
                         psi: int = 256, seed: int = 0) -> IsolationForestModel:
    if psi < 2:
        raise ValueError("psi must be >= 2")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    groups = _by_class(features, labels, n_classes)
    seeds = np.random.SeedSequence(seed).spawn(n_classes)
    forests = [_grow_forest(g, n_trees, min(psi, g.shape[0]), np.random.default_rng(s))
               for g, s in zip(groups, seeds)]
    return IsolationForestModel(forests, n_trees, psi, seed)


def if_anomaly_score(model: IsolationForestModel, x) -> np.ndarray:
    """2^(-E[h(x)] / c(psi)) per class; higher is more anomalous."""
    x = _rows(x)
    out = np.empty((x.shape[0], len(model.forests)))
    for c, forest in enumerate(model.forests):
        mean_h = forest.path_lengths(x).mean(axis=0)
        out[:, c] = 2.0 ** (-mean_h / average_path_length(forest.psi))
    return out


# --- one-class SVM ----------------------------------------------------------------

def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class OcsvmSolution:
    alpha: np.ndarray
    rho: float
    residual: float
    iterations: int


def solve_ocsvm_dual(K: np.ndarray, nu: float, tol: float = 1e-3, max_iter: int = 100_000) -> OcsvmSolution:
    """Minimize 1/2 a'Ka subject to 0 <= a_i <= 1/(nu n), sum(a) = 1.

    Pairwise (SMO) updates on the maximal violating pair; the residual is
    ``max_{a_i > 0} G_i - min_{a_i < C} G_i`` with ``G = K a``.
    """
    n = K.shape[0]
    C = 1.0 / (nu * n)
    alpha = np.zeros(n)
    full = min(int(math.floor(nu * n)), n)
    alpha[:full] = C
    if full < n:
        alpha[full] = 1.0 - full * C
    alpha = np.clip(alpha, 0.0, C)
    G = K @ alpha
    diag = np.diag(K)
    eps = 1e-12 * C

    residual = math.inf
    it = 0
    for it in range(max_iter + 1):
        up = alpha < C - eps  # can increase
        down = alpha > eps  # can decrease
        i = int(np.flatnonzero(up)[np.argmin(G[up])]) if up.any() else -1
        j = int(np.flatnonzero(down)[np.argmax(G[down])]) if down.any() else -1
        if i < 0 or j < 0:
            residual = 0.0
            break
        residual = float(G[j] - G[i])
        if residual <= tol:
            break
        if it == max_iter:
            raise NoConvergenceError(residual, it)
        eta = max(diag[i] + diag[j] - 2.0 * K[i, j], 1e-12)
        delta = min((G[j] - G[i]) / eta, C - alpha[i], alpha[j])
        alpha[i] += delta
        alpha[j] -= delta
        G += delta * (K[:, i] - K[:, j])

    free = (alpha > eps) & (alpha < C - eps)
    if free.any():
        rho = float(G[free].mean())
    else:
        at_upper = alpha >= C - eps
        at_zero = alpha <= eps
        lb = G[at_upper].max() if at_upper.any() else G.min()
        ub = G[at_zero].min() if at_zero.any() else G.max()
        rho = 0.5 * float(lb + ub)
    return OcsvmSolution(alpha, rho, max(residual, 0.0), it)


@dataclass
class OcsvmClassModel:
    support: list[np.ndarray]  # support vectors per class
    coef: list[np.ndarray]  # alpha of each support vector
    rho: list[float]
    gamma: float
    nu: float
    residuals: list[float]

    def decisions(self, x) -> np.ndarray:
        return ocsvm_decision(self, x)

    def state(self):
        arrays = {}
        for c, (sv, a) in enumerate(zip(self.support, self.coef)):
            arrays[f"c{c}.support"], arrays[f"c{c}.coef"] = sv, a
        return {"kind": "ocsvm", "rho": self.rho, "gamma": self.gamma, "nu": self.nu,
                "residuals": self.residuals, "n_classes": len(self.rho)}, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        C = int(meta["n_classes"])
        return cls([arrays[f"c{c}.support"] for c in range(C)], [arrays[f"c{c}.coef"] for c in range(C)],
                   [float(r) for r in meta["rho"]], float(meta["gamma"]), float(meta["nu"]),
                   [float(r) for r in meta["residuals"]])


def default_gamma(features) -> float:
    """1 / (F * mean per-feature variance), with 1/F when the variance vanishes."""
    x = _rows(features)
    var = float(x.var(axis=0).mean())
    return 1.0 / (x.shape[1] * var) if var > 0 else 1.0 / x.shape[1]


def fit_ocsvm(features, labels, n_classes: int, nu: float = 0.1, gamma: float | None = None,
              tol: float = 1e-3, max_iter: int = 100_000) -> OcsvmClassModel:
    if not 0 < nu <= 1:
        raise ValueError("nu must be in (0, 1]")
    groups = _by_class(features, labels, n_classes, minimum=1)
    if gamma is None:
        gamma = default_gamma(np.concatenate(groups))
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    support, coef, rho, residuals = [], [], [], []
    for g in groups:
        sol = solve_ocsvm_dual(rbf_kernel(g, g, gamma), nu, tol, max_iter)
        keep = sol.alpha > 0
        support.append(g[keep])
        coef.append(sol.alpha[keep])
        rho.append(sol.rho)
        residuals.append(sol.residual)
    return OcsvmClassModel(support, coef, rho, float(gamma), nu, residuals)


def ocsvm_decision(model: OcsvmClassModel, x) -> np.ndarray:
    """sum_i alpha_i K(x, x_i) - rho per class; larger means more inlying."""
    x = _rows(x)
    out = np.empty((x.shape[0], len(model.rho)))
    for c, (sv, a, r) in enumerate(zip(model.support, model.coef, model.rho)):
        out[:, c] = rbf_kernel(x, sv, model.gamma) @ a - r
    return out


MODEL_TYPES = {"gaussian": GaussianClassModel, "pca": PcaClassModel,
               "iforest": IsolationForestModel, "ocsvm": OcsvmClassModel}


def model_from_state(meta: dict, arrays: dict) -> object:
    return MODEL_TYPES[meta["kind"]].from_state(meta, arrays)
