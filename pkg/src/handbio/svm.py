"""Kernel SVMs trained one coordinate at a time, with Platt calibration.

The dual solved by :func:`train_binary` has no equality constraint: the bias
is carried by a constant ``bias_term`` added to the kernel, so every dual
variable can be updated on its own (iterative single data algorithm)::

    max  sum(a) - 1/2 a' Q a,   0 <= a_i <= C,   Q_ij = y_i y_j (k(x_i, x_j) + bias_term)

Scores used downstream are log posteriors ``log p(y=+1 | x)`` from a sigmoid
fitted to the decision values.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba
import numpy as np

from .container import pack_json, read_archive, unpack_json, write_archive


class LabelError(ValueError):
    pass


class DataError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Kernel:
    kind: str = "linear"
    degree: int = 2
    scale: float = 1.0
    offset: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")

    def __call__(self, a, b) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        g = a @ b.T
        if self.kind == "linear":
            return g
        return (self.scale * g + self.offset) ** self.degree

    def gram(self, X) -> np.ndarray:
        """Kernel matrix of ``X`` with itself, exactly symmetric."""
        K = self(X, X)
        return np.triu(K) + np.triu(K, 1).T


POLY2 = Kernel("polynomial", degree=2, scale=1.0, offset=1.0)
LINEAR = Kernel("linear")


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    coef: np.ndarray            # alpha_i * y_i for the support vectors
    alpha: np.ndarray
    bias: float
    kernel: Kernel
    C_box: float
    bias_term: float = 1.0
    platt: tuple[float, float] | None = None
    n_iter: int = 0
    max_violation: float = 0.0

    @property
    def n_features(self):
        return self.support_vectors.shape[1]


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"X must be (n, d) matching y; got {X.shape} and {y.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature value")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise LabelError("labels must be +1/-1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise LabelError("need at least one example of each label")
    return X, y


@numba.njit(cache=True)
def _isda(Q, C, tol, max_iter):
    n = Q.shape[0]
    alpha = np.zeros(n)
    grad = np.ones(n)      # gradient of the dual objective, 1 - Q alpha
    it = 0
    worst = 0.0
    while it < max_iter:
        worst, i = -1.0, -1
        for j in range(n):
            g = grad[j]
            if alpha[j] <= 0.0:
                v = g if g > 0.0 else 0.0
            elif alpha[j] >= C:
                v = -g if g < 0.0 else 0.0
            else:
                v = abs(g)
            if v > worst and Q[j, j] > 0.0:
                worst, i = v, j
        if worst < tol:
            break
        it += 1
        new = alpha[i] + grad[i] / Q[i, i]
        if new < 0.0:
            new = 0.0
        elif new > C:
            new = C
        delta = new - alpha[i]
        alpha[i] = new
        for j in range(n):
            grad[j] -= delta * Q[j, i]
    return alpha, it, max(worst, 0.0)


def train_binary(X, y, kernel: Kernel = LINEAR, C_box: float = 1.0, tol: float = 1e-4,
                 max_passes: int = 10000, bias_term: float = 1.0, gram=None) -> SvmModel:
    """Soft-margin SVM by single-coordinate dual updates.

    Each step picks the coordinate with the largest KKT violation, takes the
    exact Newton step along it and clips to ``[0, C_box]``.  Stops when every
    violation is below ``tol`` or after ``max_passes * n`` updates.  Coordinates
    with a zero kernel diagonal never move.  The bias is the mean residual over
    margin support vectors.
    """
    X, y = _check_xy(X, y)
    if C_box <= 0:
        raise ValueError("C_box must be positive")
    n = len(y)
    K = kernel.gram(X) if gram is None else np.asarray(gram, dtype=np.float64)
    Q = (K + bias_term) * np.outer(y, y)
    alpha, it, worst = _isda(Q, float(C_box), float(tol), int(max_passes) * n)
    sv = alpha > 0
    coef = alpha * y
    free = sv & (alpha < C_box)
    if np.any(free):
        resid = y[free] - K[free] @ coef
        bias = float(resid.mean())
    else:
        bias = float(bias_term * coef.sum())
    return SvmModel(support_vectors=X[sv].copy(), coef=coef[sv], alpha=alpha[sv], bias=bias,
                    kernel=kernel, C_box=C_box, bias_term=bias_term, n_iter=it,
                    max_violation=float(worst))


def decision_value(model: SvmModel, x) -> np.ndarray | float:
    """``sum_i coef_i k(sv_i, x) + bias`` for one vector or each row of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xx = np.atleast_2d(x)
    if xx.shape[1] != model.n_features:
        raise ShapeError(f"expected {model.n_features} features, got {xx.shape[1]}")
    if len(model.coef) == 0:
        out = np.full(len(xx), model.bias)
    else:
        out = model.kernel(xx, model.support_vectors) @ model.coef + model.bias
    return float(out[0]) if single else out


def platt_fit_values(f, y, max_iter: int = 100) -> tuple[float, float]:
    """Fit ``p(y=1|f) = 1 / (1 + exp(A f + B))`` by regularized maximum likelihood.

    Newton's method with backtracking on smoothed targets, in the numerically
    stable form of Lin, Lin and Weng.
    """
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y)
    pos = int(np.sum(y > 0))
    neg = int(np.sum(y <= 0))
    if pos == 0 or neg == 0:
        raise LabelError("calibration data must contain both labels")
    hi, lo = (pos + 1.0) / (pos + 2.0), 1.0 / (neg + 2.0)
    t = np.where(y > 0, hi, lo)
    A, B = 0.0, np.log((neg + 1.0) / (pos + 1.0))
    sigma, min_step, eps = 1e-12, 1e-10, 1e-5

    def objective(A, B):
        fab = f * A + B
        return float(np.sum(t * np.logaddexp(0.0, fab) + (1 - t) * np.logaddexp(0.0, -fab)))

    fval = objective(A, B)
    for _ in range(max_iter):
        fab = f * A + B
        e = np.exp(-np.abs(fab))
        p = np.where(fab >= 0, e / (1 + e), 1 / (1 + e))
        q = np.where(fab >= 0, 1 / (1 + e), e / (1 + e))
        d2 = p * q
        h11 = sigma + np.sum(f * f * d2)
        h22 = sigma + np.sum(d2)
        h21 = np.sum(f * d2)
        d1 = t - p
        g1, g2 = np.sum(f * d1), np.sum(d1)
        if abs(g1) < eps and abs(g2) < eps:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= min_step:
            nA, nB = A + step * dA, B + step * dB
            nf = objective(nA, nB)
            if nf < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nf
                break
            step /= 2
        else:
            break
    return float(A), float(B)


def platt_fit(model: SvmModel, X_holdout, y_holdout) -> tuple[float, float]:
    """Fit and store sigmoid parameters from held-out decision values."""
    y = np.asarray(y_holdout)
    if not (np.any(y > 0) and np.any(y < 0)):
        raise LabelError("holdout must contain both labels")
    model.platt = platt_fit_values(decision_value(model, np.atleast_2d(X_holdout)), y)
    return model.platt


def _log_sigmoid_neg(z):
    # log(1 / (1 + exp(z)))
    return -np.logaddexp(0.0, z)


def log_posterior(model: SvmModel, x):
    """Log of the calibrated positive-class posterior; always <= 0."""
    if model.platt is None:
        raise StateError("Platt calibration has not been fitted")
    A, B = model.platt
    return _log_sigmoid_neg(A * np.asarray(decision_value(model, x)) + B)


def _stratified_folds(y, k, rng):
    fold = np.empty(len(y), dtype=int)
    for label in (-1, 1):
        idx = np.flatnonzero(y == label)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = np.arange(len(idx)) % k
    return fold


def fit_calibrated(X, y, kernel: Kernel, C_box: float = 1.0, folds: int = 3, seed: int = 0,
                   gram=None, **kw) -> SvmModel:
    """Train on all data; fit Platt parameters on out-of-fold decision values."""
    X, y = _check_xy(X, y)
    K = kernel.gram(X) if gram is None else gram
    rng = np.random.default_rng(seed)
    fold = _stratified_folds(y, folds, rng)
    f_oof = np.empty(len(y))
    for k in range(folds):
        tr, te = fold != k, fold == k
        if not te.any():
            continue
        if not (np.any(y[tr] > 0) and np.any(y[tr] < 0)):
            raise DataError("a calibration fold lacks one of the labels")
        m = train_binary(X[tr], y[tr], kernel, C_box, gram=K[np.ix_(tr, tr)], **kw)
        f_oof[te] = decision_value(m, X[te])
    model = train_binary(X, y, kernel, C_box, gram=K, **kw)
    model.platt = platt_fit_values(f_oof, y)
    return model


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


@dataclass
class OneVsAll:
    """One calibrated binary SVM per class (that class against the rest)."""

    classes: list
    models: list[SvmModel]
    scaler: Standardizer
    kernel: Kernel
    C_box: float

    def decision_values(self, X) -> np.ndarray:
        Z = self.scaler(np.atleast_2d(X))
        return np.stack([decision_value(m, Z) for m in self.models], axis=1)

    def scores(self, X) -> np.ndarray:
        """``(n, n_classes)`` log posteriors."""
        Z = self.scaler(np.atleast_2d(X))
        return np.stack([log_posterior(m, Z) for m in self.models], axis=1)

    def predict(self, X):
        return np.asarray(self.classes)[self.scores(X).argmax(axis=1)]

    def __len__(self):
        return len(self.models)


def train_one_vs_all(X, labels, kernel: Kernel = POLY2, C_box: float = 1.0, folds: int = 3,
                     seed: int = 0, standardize: bool = True, **kw) -> OneVsAll:
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(np.unique(labels).tolist())
    if len(classes) < 2:
        raise LabelError("need at least two subjects")
    for c in classes:
        if np.sum(labels == c) < 2:
            raise DataError(f"subject {c} has fewer than 2 examples")
    scaler = Standardizer.fit(X) if standardize else Standardizer(np.zeros(X.shape[1]),
                                                                  np.ones(X.shape[1]))
    Z = scaler(X)
    K = kernel.gram(Z)
    models = []
    for j, c in enumerate(classes):
        y = np.where(labels == c, 1.0, -1.0)
        models.append(fit_calibrated(Z, y, kernel, C_box, folds, seed=seed + j, gram=K, **kw))
    return OneVsAll(classes, models, scaler, kernel, C_box)


def train_gender_svm(X, labels, kernel: Kernel = LINEAR, C_box: float = 1.0, seed: int = 0,
                     **kw):
    """Binary SVM on standardized features for two-class labels 0/1 (1 -> +1)."""
    X = np.asarray(X, dtype=np.float64)
    scaler = Standardizer.fit(X)
    y = np.where(np.asarray(labels) == 1, 1.0, -1.0)
    model = fit_calibrated(scaler(X), y, kernel, C_box, seed=seed, **kw)
    return scaler, model


def sum_rule_fuse(scores, class_lists=None):
    """Add per-class log posteriors across views.

    ``scores`` is a sequence (or dict) of arrays shaped ``(n_classes,)`` or
    ``(n, n_classes)``.  Returns ``(fused, argmax)``; ties resolve to the
    lowest class index.
    """
    if isinstance(scores, dict):
        scores = list(scores.values())
    arrs = [np.asarray(s, dtype=np.float64) for s in scores]
    if not arrs:
        raise ConfigurationError("no views to fuse")
    if class_lists is not None:
        first = list(class_lists[0])
        if any(list(c) != first for c in class_lists[1:]):
            raise ConfigurationError("views disagree on the class list")
    if len({a.shape for a in arrs}) != 1:
        raise ConfigurationError(f"views have different shapes: {[a.shape for a in arrs]}")
    fused = np.sum(arrs, axis=0)
    return fused, np.argmax(fused, axis=-1)


def threshold_accept(scores, t: float):
    """Index of the best class if its score is strictly above ``t``, else ``None``."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ConfigurationError("empty score vector")
    if t > 0:
        raise ValueError("threshold is a log probability and must be <= 0")
    best = int(np.argmax(s))
    return best if s[best] > t else None


@dataclass
class Ensemble:
    """Per-view one-vs-all banks fused by the sum rule."""

    banks: dict[str, OneVsAll] = field(default_factory=dict)

    @property
    def classes(self):
        lists = [b.classes for b in self.banks.values()]
        if any(l != lists[0] for l in lists[1:]):
            raise ConfigurationError("banks disagree on the class list")
        return lists[0]

    @classmethod
    def fit(cls, views: dict, labels, kernel: Kernel = POLY2, C_box: float = 1.0, seed: int = 0,
            **kw):
        return cls({name: train_one_vs_all(X, labels, kernel, C_box, seed=seed, **kw)
                    for name, X in views.items()})

    def view_scores(self, views: dict) -> dict[str, np.ndarray]:
        return {name: self.banks[name].scores(views[name]) for name in self.banks}

    def fused_scores(self, views: dict) -> np.ndarray:
        self.classes
        return sum_rule_fuse(self.view_scores(views))[0]

    def predict(self, views: dict):
        return np.asarray(self.classes)[self.fused_scores(views).argmax(axis=1)]


def save_bank(path, bank: OneVsAll, view: str = "") -> None:
    meta = {"kind": "ova_bank", "view": view, "classes": [int(c) if isinstance(c, (int, np.integer))
                                                          else str(c) for c in bank.classes],
            "kernel": vars(bank.kernel), "C_box": bank.C_box,
            "bias_term": [m.bias_term for m in bank.models]}
    entries = {"__meta__": pack_json(meta), "mean": bank.scaler.mean, "std": bank.scaler.std,
               "bias": np.array([m.bias for m in bank.models]),
               "platt": np.array([m.platt for m in bank.models], dtype=np.float64)}
    for j, m in enumerate(bank.models):
        entries[f"sv.{j}"] = m.support_vectors
        entries[f"coef.{j}"] = m.coef
        entries[f"alpha.{j}"] = m.alpha
    write_archive(path, entries)


def load_bank(path) -> tuple[OneVsAll, str]:
    arc = read_archive(path)
    meta = unpack_json(arc["__meta__"])
    if meta.get("kind") != "ova_bank":
        raise ConfigurationError(f"{path}: not an SVM bank file")
    kernel = Kernel(**meta["kernel"])
    models = []
    for j in range(len(meta["classes"])):
        models.append(SvmModel(arc[f"sv.{j}"], arc[f"coef.{j}"], arc[f"alpha.{j}"],
                               float(arc["bias"][j]), kernel, meta["C_box"],
                               meta["bias_term"][j], tuple(map(float, arc["platt"][j]))))
    bank = OneVsAll(meta["classes"], models, Standardizer(arc["mean"], arc["std"]), kernel,
                    meta["C_box"])
    return bank, meta["view"]


def write_scores_csv(path, image_ids, classes, view_scores: dict) -> None:
    """Columns: image_id, class, view, log_posterior."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id", "class", "view", "log_posterior"])
        for view, S in view_scores.items():
            for i, image_id in enumerate(image_ids):
                for j, c in enumerate(classes):
                    wr.writerow([image_id, c, view, repr(float(S[i, j]))])
