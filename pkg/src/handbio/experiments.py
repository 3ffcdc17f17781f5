"""End-to-end protocol runners: split -> preprocess -> train -> evaluate."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import svm
from .container import read_planes, write_planes
from .dataset import GENDERS, Dataset
from .features import LbpParams, lbp_histogram
from .imgproc import GuidedFilterParams, PAPER_SIZE, detail_luma, resize_bilinear
from .metrics import (ErrorReport, accuracy, confusion, error_report, identification_trials)
from .nn import (TrainHyper, build_two_stream, forward_features, predict_gender, preset_config,
                 to_nchw, train_two_stage)
from .splits import GenderSplit, IdSplit, make_gender_split, make_id_split

VIEWS = ("fc9_s1", "fc10_s2", "fusion", "lbp")


@dataclass(frozen=True)
class PipelineConfig:
    preset: str = "desk"
    gf_radius: int = 2
    gf_regularization: float = 0.01
    epsilon: float = 1e-3
    input_size: int = 32
    lbp_radius: int = 1
    lbp_uniform: bool = True
    hyper: dict = field(default_factory=lambda: asdict(TrainHyper.desk()))
    svm_C: float = 1.0
    svm_tol: float = 1e-3
    calib_folds: int = 3
    fused_threshold_mode: str = "mean"   # fused sum divided by the number of views

    @classmethod
    def desk(cls, **kw):
        return cls(**kw)

    @classmethod
    def paper(cls, **kw):
        base = dict(preset="paper", gf_radius=10, input_size=PAPER_SIZE,
                    hyper=asdict(TrainHyper()))
        base.update(kw)
        return cls(**base)

    @property
    def train_hyper(self) -> TrainHyper:
        h = dict(self.hyper)
        h["epochs_stage1"] = tuple(h["epochs_stage1"])
        h["epochs_joint"] = tuple(h["epochs_joint"])
        return TrainHyper(**h)

    @property
    def guided(self) -> GuidedFilterParams:
        return GuidedFilterParams(self.gf_radius, self.gf_regularization)

    @property
    def lbp(self) -> LbpParams:
        return LbpParams(8, self.lbp_radius, self.lbp_uniform)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class FeatureCache:
    """Preprocessed inputs and LBP histograms per image, memoized and optionally on disk.

    Disk entries are plane files named by a hash of the image content and the
    preprocessing parameters: planes are the low image, the detail layer and
    the LBP histogram (stored as a ``(1, bins, 1)`` plane).
    """

    def __init__(self, dataset: Dataset, config: PipelineConfig, cache_dir=None):
        self.dataset = dataset
        self.config = config
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._mem: dict[str, tuple] = {}

    def _key(self, img: np.ndarray) -> str:
        c = self.config
        params = json.dumps([c.gf_radius, c.gf_regularization, c.epsilon, c.input_size,
                             c.lbp_radius, c.lbp_uniform])
        h = hashlib.sha1(np.ascontiguousarray(img, dtype=np.float64).tobytes())
        h.update(params.encode())
        return h.hexdigest()

    def compute(self, img):
        c = self.config
        smooth, high_full = detail_luma(img, c.guided, c.epsilon)
        low = np.clip(resize_bilinear(smooth, c.input_size, c.input_size), 0, 1)
        high = np.clip(resize_bilinear(high_full, c.input_size, c.input_size), 0, 1)[:, :, None]
        # rounded like the disk cache so cached and uncached runs agree bit for bit
        lbp = lbp_histogram(high_full, c.lbp).values.astype(np.float32).astype(np.float64)
        return low.astype(np.float32), high.astype(np.float32), lbp

    def get(self, record):
        if record.image_path in self._mem:
            return self._mem[record.image_path]
        img = self.dataset.load_image(record)
        out = None
        path = None
        if self.cache_dir is not None:
            path = self.cache_dir / f"{self._key(img)}.hbpl"
            if path.exists():
                low, high, lbp = read_planes(path)
                out = (low, high, lbp[0, :, 0].astype(np.float64))
        if out is None:
            out = self.compute(img)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                write_planes(path, [out[0], out[1], out[2][None, :, None]])
        self._mem[record.image_path] = out
        return out

    def arrays(self, records):
        items = [self.get(r) for r in records]
        low = to_nchw(np.stack([i[0] for i in items]))
        high = to_nchw(np.stack([i[1] for i in items]))
        lbp = np.stack([i[2] for i in items])
        return low, high, lbp


def gender_labels(records) -> np.ndarray:
    return np.array([GENDERS.index(r.gender) for r in records])


def train_gender_cnn(cache: FeatureCache, records, seed: int, log: list | None = None):
    config = cache.config
    low, high, _ = cache.arrays(records)
    labels = gender_labels(records)
    model = build_two_stream(preset_config(config.preset), seed=seed)
    hyper = config.train_hyper
    hyper = TrainHyper(**{**asdict(hyper), "seed": seed})
    return train_two_stage(model, low, high, labels, hyper, log)


@dataclass
class GenderResult:
    side: str
    rows: list = field(default_factory=list)         # (seed, method, accuracy)
    confusions: dict = field(default_factory=dict)   # method -> mean row-normalized matrix
    models: list = field(default_factory=list)

    def mean(self, method: str) -> float:
        vals = [a for _, m, a in self.rows if m == method]
        return float(np.mean(vals))


def evaluate_gender(model, cache: FeatureCache, split: GenderSplit, config: PipelineConfig,
                    seed: int = 0) -> dict:
    """Softmax accuracy and SVM-on-concatenated-taps accuracy for one split."""
    lo_tr, hi_tr, _ = cache.arrays(split.train)
    lo_te, hi_te, _ = cache.arrays(split.test)
    y_tr, y_te = gender_labels(split.train), gender_labels(split.test)
    _, probs = predict_gender(model, lo_te, hi_te)
    pred_cnn = probs.argmax(axis=1)
    f_tr = forward_features(model, lo_tr, hi_tr)["concat"]
    f_te = forward_features(model, lo_te, hi_te)["concat"]
    scaler, m = svm.train_gender_svm(f_tr, y_tr, svm.LINEAR, config.svm_C, seed=seed,
                                     tol=config.svm_tol)
    pred_svm = (np.asarray(svm.decision_value(m, scaler(f_te))) > 0).astype(int)
    return {
        "cnn": (accuracy(pred_cnn, y_te), confusion(pred_cnn, y_te, classes=[0, 1])),
        "svm_on_features": (accuracy(pred_svm, y_te), confusion(pred_svm, y_te, classes=[0, 1])),
    }


def run_gender_experiment(dataset: Dataset, side: str, seeds, config: PipelineConfig,
                          n_train: int = 1000, n_test: int = 500, cache: FeatureCache = None,
                          log: list | None = None, keep_models: bool = False) -> GenderResult:
    cache = cache or FeatureCache(dataset, config)
    result = GenderResult(side)
    sums: dict[str, np.ndarray] = {}
    for rep, seed in enumerate(seeds):
        split = make_gender_split(dataset, side, seed, n_train, n_test, rep)
        try:
            model = train_gender_cnn(cache, split.train, seed, log)
            out = evaluate_gender(model, cache, split, config, seed)
        except Exception as exc:
            raise RuntimeError(f"gender repeat {rep} (seed {seed}) failed: {exc}") from exc
        for method, (acc, conf) in out.items():
            result.rows.append((seed, method, acc))
            sums[method] = sums.get(method, 0) + conf
        if keep_models:
            result.models.append(model)
    result.confusions = {k: v / len(seeds) for k, v in sums.items()}
    return result


def id_header(n_subjects: int, side: str) -> str:
    return f"({n_subjects}-{side[0].upper()})"


@dataclass
class IdResult:
    n_subjects: int
    side: str
    fusion: str
    rows: list = field(default_factory=list)    # (seed, top1)
    report: ErrorReport | None = None
    report_full: ErrorReport | None = None
    scores: list = field(default_factory=list)  # per repeat: (image ids, classes, view scores)

    @property
    def header(self):
        return id_header(self.n_subjects, self.side)

    @property
    def mean(self) -> float:
        return float(np.mean([a for _, a in self.rows]))


def id_views(model, cache: FeatureCache, records) -> dict[str, np.ndarray]:
    low, high, lbp = cache.arrays(records)
    taps = forward_features(model, low, high)
    return {"fc9_s1": taps["fc9_s1"], "fc10_s2": taps["fc10_s2"], "fusion": taps["fusion"],
            "lbp": lbp, "concat": taps["concat"]}


def fit_id_banks(model, cache: FeatureCache, split: IdSplit, config: PipelineConfig,
                 fusion: str = "ensemble", seed: int = 0) -> dict[str, svm.OneVsAll]:
    """One-vs-all banks per view (``ensemble``) or one bank on the concatenated taps."""
    tr = id_views(model, cache, split.train)
    y_tr = np.array([r.subject_id for r in split.train])
    kw = dict(folds=config.calib_folds, tol=config.svm_tol)
    if fusion == "ensemble":
        views = VIEWS
    elif fusion == "single_svm":
        views = ("concat",)
    else:
        raise ValueError(f"unknown fusion {fusion!r}")
    return {v: svm.train_one_vs_all(tr[v], y_tr, svm.POLY2, config.svm_C, seed=seed, **kw)
            for v in views}


def score_id(model, cache: FeatureCache, records, banks: dict, config: PipelineConfig):
    """Top-1 accuracy, per-view score matrices and threshold scores for test records."""
    te = id_views(model, cache, records)
    y_te = np.array([r.subject_id for r in records])
    ens = svm.Ensemble(banks)
    classes = ens.classes
    view_scores = ens.view_scores({v: te[v] for v in banks})
    fused, pred_idx = svm.sum_rule_fuse(view_scores)
    top1 = accuracy(np.asarray(classes)[pred_idx], y_te)
    thr_scores = fused / len(view_scores) if config.fused_threshold_mode == "mean" else fused
    true_idx = np.searchsorted(classes, y_te)
    return top1, view_scores, thr_scores, true_idx, classes


def evaluate_id(model, cache: FeatureCache, split: IdSplit, config: PipelineConfig,
                fusion: str = "ensemble", seed: int = 0):
    banks = fit_id_banks(model, cache, split, config, fusion, seed)
    return score_id(model, cache, split.test, banks, config)


def run_id_experiment(dataset: Dataset, n_subjects: int, side: str, fusion: str, seeds,
                      config: PipelineConfig, model=None, force: bool = False,
                      cache: FeatureCache = None, n_train: int = 10, n_test: int = 4,
                      log: list | None = None) -> IdResult:
    """Identification accuracy over repeated random subject/image draws.

    Without ``model`` a gender CNN is trained on each repeat's training images
    and used as the feature extractor.  FAR/FRR are pooled over repeats.
    """
    cache = cache or FeatureCache(dataset, config)
    result = IdResult(n_subjects, side, fusion)
    genuine, impostor = [], []
    for rep, seed in enumerate(seeds):
        split = make_id_split(dataset, side, n_subjects, seed, n_train, n_test, force, rep)
        try:
            extractor = model if model is not None else train_gender_cnn(cache, split.train,
                                                                         seed, log)
            top1, view_scores, thr_scores, true_idx, classes = evaluate_id(
                extractor, cache, split, config, fusion, seed)
        except Exception as exc:
            raise RuntimeError(f"identification repeat {rep} (seed {seed}) failed: {exc}") from exc
        result.rows.append((seed, top1))
        g, i = identification_trials(thr_scores, true_idx)
        genuine.append(g)
        impostor.append(i)
        result.scores.append(([r.image_path for r in split.test], classes, view_scores))
    g, i = np.concatenate(genuine), np.concatenate(impostor)
    label = "fused" if fusion == "ensemble" else "single"
    result.report = error_report(g, i, None, label)
    result.report_full = error_report(g, i, "scores", label)
    return result
