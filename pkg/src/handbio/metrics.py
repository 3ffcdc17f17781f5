"""Accuracy, confusion matrices, FAR/FRR/EER threshold sweeps and ROC/AUC."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    pass


def default_sweep() -> np.ndarray:
    """Thresholds ``log(0.9) + 0.01 k`` for k = 0..10, then exactly ``log(1) = 0``.

    The next grid step would overshoot zero, so the endpoint is appended
    instead of stepping past it.
    """
    return np.append(np.log(0.9) + 0.01 * np.arange(11), 0.0)


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.size == 0:
        raise DataError("no predictions")
    if p.shape != y.shape:
        raise DataError(f"length mismatch: {p.shape} vs {y.shape}")
    return float(np.mean(p == y))


def confusion(predictions, labels, classes=None, normalize: bool = True) -> np.ndarray:
    """Confusion matrix with rows = predicted class, columns = true class.

    With ``normalize`` each non-empty row sums to one.
    """
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.size == 0:
        raise DataError("no predictions")
    if p.shape != y.shape:
        raise DataError(f"length mismatch: {p.shape} vs {y.shape}")
    if classes is None:
        classes = sorted(set(p.tolist()) | set(y.tolist()))
    index = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes)))
    for pi, yi in zip(p.tolist(), y.tolist()):
        m[index[pi], index[yi]] += 1
    if normalize:
        rows = m.sum(axis=1, keepdims=True)
        m = np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)
    return m


@dataclass
class ErrorReport:
    thresholds: np.ndarray | None = None
    far: np.ndarray | None = None
    frr: np.ndarray | None = None
    eer: float | None = None
    eer_threshold: float | None = None
    eer_extrapolated: bool = False
    fpr: np.ndarray | None = None
    tpr: np.ndarray | None = None
    auc: float | None = None
    scores: str = "fused"


def _scores(x, name):
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DataError(f"{name} trial set is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} scores contain non-finite values")
    return arr


def far_frr(genuine, impostor, thresholds=None) -> ErrorReport:
    """Per-threshold error rates; a trial is accepted when its score is strictly above ``t``.

    ``thresholds`` defaults to :func:`default_sweep`; pass ``"scores"`` to use
    every distinct observed score (plus one point below the minimum).
    """
    g, imp = _scores(genuine, "genuine"), _scores(impostor, "impostor")
    if thresholds is None:
        t = default_sweep()
    elif isinstance(thresholds, str) and thresholds == "scores":
        allv = np.unique(np.concatenate([g, imp]))
        t = np.concatenate([[allv[0] - 1.0], allv])
    else:
        t = np.asarray(thresholds, dtype=np.float64)
    gs, ims = np.sort(g), np.sort(imp)
    # counts of scores <= t
    g_le = np.searchsorted(gs, t, side="right")
    i_le = np.searchsorted(ims, t, side="right")
    far = (len(ims) - i_le) / len(ims)
    frr = g_le / len(gs)
    return ErrorReport(thresholds=t, far=far, frr=frr)


def eer(report: ErrorReport):
    """Equal error rate by linear interpolation where FAR - FRR changes sign.

    Returns ``(rate, threshold, extrapolated)``; ``extrapolated`` is true when
    the curves do not cross on the grid, in which case the nearest boundary
    point is returned.
    """
    t, far, frr = report.thresholds, report.far, report.frr
    if t is None or len(t) == 0:
        raise DataError("report has no FAR/FRR sweep")
    d = far - frr
    for k in range(len(t)):
        if d[k] == 0:
            out = (float(far[k]), float(t[k]), False)
            break
        if k + 1 < len(t) and d[k] > 0 > d[k + 1]:
            w = d[k] / (d[k] - d[k + 1])
            rate = far[k] + w * (far[k + 1] - far[k])
            out = (float(rate), float(t[k] + w * (t[k + 1] - t[k])), False)
            break
    else:
        k = len(t) - 1 if d[-1] > 0 else 0
        out = (float((far[k] + frr[k]) / 2), float(t[k]), True)
    report.eer, report.eer_threshold, report.eer_extrapolated = out
    return out


def roc_auc(genuine, impostor) -> ErrorReport:
    """ROC with a threshold at every distinct score and its trapezoidal area.

    A score at or above the threshold counts as a positive decision.  The
    area is accumulated in integer counts and divided once, so it equals the
    tie-corrected Mann-Whitney statistic exactly.
    """
    g, imp = _scores(genuine, "genuine"), _scores(impostor, "impostor")
    P, N = len(g), len(imp)
    thr = np.unique(np.concatenate([g, imp]))[::-1]
    gs, ims = np.sort(g), np.sort(imp)
    tp = P - np.searchsorted(gs, thr, side="left")
    fp = N - np.searchsorted(ims, thr, side="left")
    tp = np.concatenate([[0], tp]).astype(np.int64)
    fp = np.concatenate([[0], fp]).astype(np.int64)
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return ErrorReport(fpr=fp / N, tpr=tp / P, auc=area2 / (2 * P * N))


def identification_trials(score_matrix, true_index):
    """Split an ``(n_images, n_subjects)`` score matrix into genuine and impostor trials.

    Every test image is checked against every enrolled subject: its own
    subject's score is a genuine trial, all others are impostor trials.
    """
    S = np.asarray(score_matrix, dtype=np.float64)
    idx = np.asarray(true_index)
    mask = np.zeros(S.shape, dtype=bool)
    mask[np.arange(len(S)), idx] = True
    return S[mask], S[~mask]


def error_report(genuine, impostor, thresholds=None, label: str = "fused") -> ErrorReport:
    rep = far_frr(genuine, impostor, thresholds)
    eer(rep)
    roc = roc_auc(genuine, impostor)
    rep.fpr, rep.tpr, rep.auc, rep.scores = roc.fpr, roc.tpr, roc.auc, label
    return rep


def write_sweep_csv(path, report: ErrorReport) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "far", "frr"])
        for t, a, r in zip(report.thresholds, report.far, report.frr):
            wr.writerow([f"{t:.10g}", f"{a:.10g}", f"{r:.10g}"])


def write_roc_csv(path, report: ErrorReport) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["fpr", "tpr"])
        for a, b in zip(report.fpr, report.tpr):
            wr.writerow([f"{a:.10g}", f"{b:.10g}"])
