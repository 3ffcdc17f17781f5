"""Command-line entry point: ``handbio <command> [flags]``.

Every command writes into its ``--out`` directory: a ``config.json`` snapshot
of the resolved arguments first, then its outputs.  Passing that snapshot back
with ``--config`` reruns the command with identical settings; flags given on
the command line override snapshot values.  Failures leave an ``error.json``
record and a nonzero exit code.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import Dataset, load_metadata, synth_dataset, write_corpus
from .experiments import (FeatureCache, PipelineConfig, evaluate_gender, fit_id_banks, score_id,
                          id_header, train_gender_cnn)
from .imgproc import SsimParams, load_image, select_frames
from .metrics import error_report, identification_trials, write_roc_csv, write_sweep_csv
from .nn import load_model, save_model, write_log
from .splits import make_gender_split, make_id_split
from .svm import load_bank, save_bank, write_scores_csv

SNAPSHOT = "config.json"
ERROR_RECORD = "error.json"
LOCK = ".handbio.lock"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class CliError(Exception):
    """User-facing failure; ``kind`` lands in the error record."""

    def __init__(self, message: str, kind: str = "usage"):
        super().__init__(message)
        self.kind = kind


class MissingArtifact(CliError):
    def __init__(self, what: str, producer: str):
        super().__init__(f"{what}; run `handbio {producer}` first", "missing_artifact")


# -- argument handling ----------------------------------------------------------

def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _data_flags(p):
    p.add_argument("--data", help="metadata CSV of the hand corpus")
    p.add_argument("--images", help="image root (defaults to the CSV's directory)")
    p.add_argument("--column-map", help="JSON file mapping record fields to CSV columns")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="handbio", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"handbio {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run snapshot whose values become defaults")
    common.add_argument("--out", help="output directory")
    common.add_argument("--overwrite", action="store_true",
                        help="replace the contents of an existing run directory")
    common.add_argument("--preset", choices=["desk", "paper"], default="desk")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--images-per-subject", type=int, default=20)
    p.add_argument("--gender-signal", type=float, default=0.8)
    p.add_argument("--subject-signal", type=float, default=0.8)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--side", choices=["dorsal", "palmar"], default="dorsal")
    p.add_argument("--accessory-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("select-frames", parents=[common],
                       help="drop near-duplicate frames from an image sequence")
    p.add_argument("--frames", help="directory of frames, ordered by file name")
    p.add_argument("--threshold", type=float, help="keep frames whose SSIM is below this")

    p = sub.add_parser("preprocess", parents=[common], help="cache preprocessed planes")
    _data_flags(p)

    p = sub.add_parser("train-gender", parents=[common], help="train two-stream gender models")
    _data_flags(p)
    p.add_argument("--side", choices=["dorsal", "palmar"], default="dorsal")
    p.add_argument("--seeds", type=_seeds, default=[0])
    p.add_argument("--n-train", type=int, help="training images per gender")
    p.add_argument("--n-test", type=int, help="test images per gender")
    p.add_argument("--cache", help="preprocessing cache directory (from `preprocess`)")

    p = sub.add_parser("eval-gender", parents=[common], help="gender accuracy and confusion")
    _data_flags(p)
    p.add_argument("--model", help="`train-gender` run directory or a model file")
    p.add_argument("--side", choices=["dorsal", "palmar"])
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--cache")

    p = sub.add_parser("train-id", parents=[common], help="train identification SVM banks")
    _data_flags(p)
    p.add_argument("--model", help="`train-gender` run directory or a trained model file")
    p.add_argument("--side", choices=["dorsal", "palmar"], default="dorsal")
    p.add_argument("--subjects", type=int, default=80)
    p.add_argument("--force", action="store_true", help="allow any subject count")
    p.add_argument("--seeds", type=_seeds, default=[0])
    p.add_argument("--fusion", choices=["ensemble", "single_svm"], default="ensemble")
    p.add_argument("--n-train", type=int, default=10)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--cache")

    p = sub.add_parser("eval-id", parents=[common], help="identification accuracy and FAR/FRR")
    p.add_argument("--banks", help="`train-id` run directory")
    p.add_argument("--plots", action="store_true", help="also render ROC and FAR/FRR as SVG")
    p.add_argument("--cache")
    return parser


_NOT_SNAPSHOTTED = {"config", "overwrite", "command"}


def parse_args(argv=None):
    """Parse ``argv``, using a ``--config`` snapshot for defaults when given."""
    parser = build_parser()
    args = parser.parse_args(argv)
    pipeline = None
    if args.config:
        path = Path(args.config)
        if not path.exists():
            parser.error(f"--config: no such file {path}")
        snap = json.loads(path.read_text())
        if snap.get("command", args.command) != args.command:
            parser.error(f"--config was written by `{snap['command']}`, not `{args.command}`")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k: v for k, v in snap.get("args", {}).items()
                            if k not in _NOT_SNAPSHOTTED})
        args = parser.parse_args(argv)
        pipeline = snap.get("pipeline")
    base = PipelineConfig.paper() if args.preset == "paper" else PipelineConfig.desk()
    if pipeline:
        base = PipelineConfig.from_dict({**base.to_dict(), **pipeline})
    args.pipeline = base
    return args


def _abs(path):
    return str(Path(path).resolve()) if path else path


_PATH_ARGS = ("data", "images", "column_map", "model", "banks", "cache", "frames", "out")


def snapshot(args) -> dict:
    values = {k: v for k, v in vars(args).items() if k not in _NOT_SNAPSHOTTED | {"pipeline"}}
    for k in _PATH_ARGS:
        if k in values:
            values[k] = _abs(values[k])
    return {"command": args.command, "version": __version__, "args": values,
            "pipeline": args.pipeline.to_dict()}


# -- run directory ----------------------------------------------------------------

def _inside(child: Path, parent: Path) -> bool:
    try:
        child.relative_to(parent)
        return True
    except ValueError:
        return False


def _input_dirs(args) -> list[Path]:
    dirs = []
    if getattr(args, "data", None):
        dirs.append(Path(args.data).resolve().parent)
    for k in ("images", "frames"):
        if getattr(args, k, None):
            dirs.append(Path(getattr(args, k)).resolve())
    return dirs


def prepare_out(args) -> Path:
    if not args.out:
        raise CliError("--out is required")
    out = Path(args.out).resolve()
    for d in _input_dirs(args):
        if _inside(out, d) or _inside(d, out):
            raise CliError(f"output directory {out} overlaps the input directory {d}")
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{out} is locked by another run (remove {lock} if that run died)",
                       "locked") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        existing = [p for p in out.iterdir() if p.name != LOCK]
        if existing:
            if not args.overwrite:
                raise CliError(f"{out} is not empty; pass --overwrite to replace it")
            if not (out / SNAPSHOT).exists() and not (out / ERROR_RECORD).exists():
                raise CliError(f"refusing to clear {out}: it does not look like a run directory")
            for p in existing:
                shutil.rmtree(p) if p.is_dir() else p.unlink()
    except BaseException:
        lock.unlink()
        raise
    return out


def config_hash(args) -> str:
    """Digest of the resolved settings, ignoring where outputs go."""
    snap = snapshot(args)
    snap["args"].pop("out", None)
    return hashlib.sha256(json.dumps(snap, sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- helpers ----------------------------------------------------------------------

def _dataset(args) -> Dataset:
    if not args.data:
        raise CliError("--data is required (metadata CSV, e.g. from `handbio synth`)")
    cmap = json.loads(Path(args.column_map).read_text()) if args.column_map else None
    return load_metadata(args.data, args.images, cmap)


def _cache(dataset, args) -> FeatureCache:
    return FeatureCache(dataset, args.pipeline, getattr(args, "cache", None))


def _split_sizes(args):
    if args.preset == "paper":
        return args.n_train or 1000, args.n_test or 500
    return args.n_train or 120, args.n_test or 80


def _read_snapshot(run_dir: Path, producer: str) -> dict:
    path = run_dir / SNAPSHOT
    if not path.exists():
        raise MissingArtifact(f"{run_dir} has no {SNAPSHOT}", producer)
    snap = json.loads(path.read_text())
    if snap.get("command") != producer:
        raise MissingArtifact(f"{run_dir} was produced by `{snap.get('command')}`", producer)
    if (run_dir / ERROR_RECORD).exists():
        raise MissingArtifact(f"{run_dir} holds a failed run", producer)
    return snap


def _trained_model(path: Path):
    if not path.exists():
        raise MissingArtifact(f"model file {path} not found", "train-gender")
    model = load_model(path)
    if not model.trained:
        raise MissingArtifact(f"model file {path} is untrained", "train-gender")
    return model


def _model_file(model_arg, seed=None) -> Path:
    if not model_arg:
        raise MissingArtifact("--model is required", "train-gender")
    path = Path(model_arg)
    if path.is_dir():
        snap = _read_snapshot(path, "train-gender")
        seeds = snap["args"]["seeds"]
        return path / f"model_seed{seed if seed in seeds else seeds[0]}.hbw"
    return path


def _write_split(path, parts):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_path", "subject_id", "gender", "part"])
        for part, recs in parts.items():
            for r in recs:
                wr.writerow([r.image_path, r.subject_id, r.gender, part])


def _read_split(path, dataset: Dataset):
    index = {r.image_path: r for r in dataset.records}
    parts: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["image_path"] not in index:
                raise CliError(f"{path}: image {row['image_path']!r} is not in the dataset")
            parts.setdefault(row["part"], []).append(index[row["image_path"]])
    return parts


def _fmt(x) -> str:
    return f"{x:.10g}"


# -- commands ---------------------------------------------------------------------

def cmd_synth(args, out: Path):
    ds = synth_dataset(args.subjects, args.images_per_subject, args.gender_signal,
                       args.subject_signal, args.image_size, args.seed, args.side,
                       args.accessory_rate)
    csv_path = write_corpus(ds, out)
    print(f"wrote {len(ds)} images and {csv_path}")


def cmd_select_frames(args, out: Path):
    if args.threshold is None:
        raise CliError("--threshold is required for select-frames")
    if not args.frames:
        raise CliError("--frames is required")
    files = sorted(p for p in Path(args.frames).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    kept = select_frames([load_image(f) for f in files], SsimParams(), args.threshold)
    with open(out / "selected_frames.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "file"])
        for i in kept:
            wr.writerow([i, files[i].name])
    print(f"kept {len(kept)} of {len(files)} frames")


def cmd_preprocess(args, out: Path):
    ds = _dataset(args)
    cache = FeatureCache(ds, args.pipeline, out / "cache")
    with open(out / "index.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_path", "cache_file"])
        for r in ds.records:
            cache.get(r)
            wr.writerow([r.image_path, f"cache/{cache._key(ds.load_image(r))}.hbpl"])
    print(f"preprocessed {len(ds)} images into {out / 'cache'}")


def cmd_train_gender(args, out: Path):
    ds = _dataset(args)
    cache = _cache(ds, args)
    n_train, n_test = _split_sizes(args)
    for rep, seed in enumerate(args.seeds):
        split = make_gender_split(ds, args.side, seed, n_train, n_test, rep)
        _write_split(out / f"split_seed{seed}.csv", {"train": split.train, "test": split.test})
        log: list = []
        model = train_gender_cnn(cache, split.train, seed, log)
        save_model(model, out / f"model_seed{seed}.hbw")
        write_log(out / f"train_log_seed{seed}.csv", log)
        print(f"seed {seed}: trained on {len(split.train)} images")


def cmd_eval_gender(args, out: Path):
    model_arg = Path(args.model) if args.model else None
    if model_arg is None:
        raise MissingArtifact("--model is required", "train-gender")
    if model_arg.is_dir():
        snap = _read_snapshot(model_arg, "train-gender")["args"]
        for k in ("data", "images", "column_map", "side", "seeds", "n_train", "n_test", "cache"):
            if getattr(args, k, None) is None:
                setattr(args, k, snap.get(k))
    else:
        _trained_model(model_arg)
    args.side = args.side or "dorsal"
    args.seeds = args.seeds or [0]
    ds = _dataset(args)
    cache = _cache(ds, args)
    n_train, n_test = _split_sizes(args)
    rows, sums = [], {}
    for rep, seed in enumerate(args.seeds):
        model = _trained_model(_model_file(model_arg, seed))
        split = make_gender_split(ds, args.side, seed, n_train, n_test, rep)
        results = evaluate_gender(model, cache, split, args.pipeline, seed)
        for method, (acc, conf) in results.items():
            rows.append((args.side, method, seed, acc))
            sums[method] = sums.get(method, 0) + conf
    with open(out / "gender_accuracy.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["side", "method", "seed", "accuracy"])
        for side, method, seed, acc in rows:
            wr.writerow([side, method, seed, _fmt(acc)])
    with open(out / "gender_table.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["side", "method", "mean_accuracy", "repeats"])
        for method in sums:
            accs = [a for _, m, _, a in rows if m == method]
            wr.writerow([args.side, method, _fmt(np.mean(accs)), len(accs)])
    for method, total in sums.items():
        conf = total / len(args.seeds)
        with open(out / f"confusion_{method}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["predicted", "male", "female"])
            for name, row in zip(("male", "female"), conf):
                wr.writerow([name] + [_fmt(v) for v in row])
        print(f"{method}: mean accuracy {np.mean([a for _, m, _, a in rows if m == method]):.4f}")
    _write_json(out / "summary.json", {
        "side": args.side, "seeds": list(args.seeds), "config_hash": config_hash(args),
        "mean_accuracy": {m: float(np.mean([a for _, mm, _, a in rows if mm == m])) for m in sums}})


def cmd_train_id(args, out: Path):
    ds = _dataset(args)
    cache = _cache(ds, args)
    for rep, seed in enumerate(args.seeds):
        model = _trained_model(_model_file(args.model, seed))
        split = make_id_split(ds, args.side, args.subjects, seed, args.n_train, args.n_test,
                              args.force, rep)
        _write_split(out / f"split_seed{seed}.csv", {"train": split.train, "test": split.test})
        banks = fit_id_banks(model, cache, split, args.pipeline, args.fusion, seed)
        for view, bank in banks.items():
            save_bank(out / f"bank_seed{seed}_{view}.hbta", bank, view)
        print(f"seed {seed}: {len(banks)} bank(s) over {args.subjects} subjects")


def cmd_eval_id(args, out: Path):
    if not args.banks:
        raise MissingArtifact("--banks is required", "train-id")
    run = Path(args.banks)
    snap = _read_snapshot(run, "train-id")["args"]
    ns = argparse.Namespace(**snap)
    ns.cache = args.cache or snap.get("cache")
    ns.pipeline = args.pipeline
    ds = _dataset(ns)
    cache = _cache(ds, ns)
    header = id_header(snap["subjects"], snap["side"])
    rows, genuine, impostor = [], [], []
    view_trials: dict[str, tuple[list, list]] = {}
    for rep, seed in enumerate(snap["seeds"]):
        model = _trained_model(_model_file(snap["model"], seed))
        paths = sorted(run.glob(f"bank_seed{seed}_*.hbta"))
        split_path = run / f"split_seed{seed}.csv"
        if not paths or not split_path.exists():
            raise MissingArtifact(f"{run} has no banks for seed {seed}", "train-id")
        banks = {}
        for p in paths:
            bank, view = load_bank(p)
            banks[view] = bank
        parts = _read_split(split_path, ds)
        test = parts.get("test", [])
        top1, view_scores, thr, true_idx, classes = score_id(model, cache, test, banks,
                                                             args.pipeline)
        rows.append((seed, top1))
        g, i = identification_trials(thr, true_idx)
        genuine.append(g)
        impostor.append(i)
        for view, S in view_scores.items():
            vg, vi = identification_trials(S, true_idx)
            view_trials.setdefault(view, ([], []))
            view_trials[view][0].append(vg)
            view_trials[view][1].append(vi)
        write_scores_csv(out / f"scores_seed{seed}.csv", [r.image_path for r in test], classes,
                         view_scores)
    fusion = snap["fusion"]
    with open(out / "id_accuracy.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["header", "fusion", "seed", "top1"])
        for seed, acc in rows:
            wr.writerow([header, fusion, seed, _fmt(acc)])
    with open(out / "id_table.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["header", "fusion", "mean_top1", "repeats"])
        wr.writerow([header, fusion, _fmt(np.mean([a for _, a in rows])), len(rows)])
    label = "fused" if fusion == "ensemble" else "single"
    g, i = np.concatenate(genuine), np.concatenate(impostor)
    report = error_report(g, i, None, label)
    full = error_report(g, i, "scores", label)
    write_sweep_csv(out / "far_frr.csv", report)
    write_sweep_csv(out / "far_frr_all_scores.csv", full)
    write_roc_csv(out / "roc.csv", full)
    summary = [(label, report, full)]
    for view, (vg, vi) in view_trials.items():
        vr = error_report(np.concatenate(vg), np.concatenate(vi), None, view)
        vf = error_report(np.concatenate(vg), np.concatenate(vi), "scores", view)
        write_sweep_csv(out / f"far_frr_{view}.csv", vr)
        summary.append((view, vr, vf))
    with open(out / "eer.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scores", "eer", "eer_threshold", "extrapolated", "eer_all_scores", "auc"])
        for name, rep_grid, rep_full in summary:
            wr.writerow([name, _fmt(rep_grid.eer), _fmt(rep_grid.eer_threshold),
                         int(rep_grid.eer_extrapolated), _fmt(rep_full.eer), _fmt(rep_full.auc)])
    _write_json(out / "summary.json", {
        "header": header, "fusion": fusion, "seeds": list(snap["seeds"]),
        "config_hash": config_hash(args), "mean_top1": float(np.mean([a for _, a in rows])),
        "eer": report.eer, "eer_threshold": report.eer_threshold,
        "eer_extrapolated": report.eer_extrapolated, "eer_all_scores": full.eer,
        "auc": full.auc, "scores": label})
    if args.plots:
        write_plots(out, report, full)
    print(f"{header} {fusion}: mean top-1 {np.mean([a for _, a in rows]):.4f}, "
          f"EER {report.eer:.4f}, AUC {full.auc:.4f}")


def write_plots(out: Path, report, full) -> None:
    """ROC and FAR/FRR curves as static SVG (needs matplotlib)."""
    try:
        import matplotlib
    except ImportError:
        raise CliError("--plots needs matplotlib (pip install 'artifact[plots]')") from None
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "handbio"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(full.fpr, full.tpr)
    ax.set(xlabel="false positive rate", ylabel="true positive rate",
           title=f"ROC (AUC {full.auc:.3f})")
    fig.savefig(out / "roc.svg", metadata={"Date": None})
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(report.thresholds, report.far, label="FAR")
    ax.plot(report.thresholds, report.frr, label="FRR")
    ax.set(xlabel="threshold (log posterior)", ylabel="rate", title=f"EER {report.eer:.3f}")
    ax.legend()
    fig.savefig(out / "far_frr.svg", metadata={"Date": None})
    plt.close(fig)


COMMANDS = {
    "synth": cmd_synth,
    "select-frames": cmd_select_frames,
    "preprocess": cmd_preprocess,
    "train-gender": cmd_train_gender,
    "eval-gender": cmd_eval_gender,
    "train-id": cmd_train_id,
    "eval-id": cmd_eval_id,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        out = prepare_out(args)
    except CliError as exc:
        print(f"handbio {args.command}: {exc}", file=sys.stderr)
        return 2
    _write_json(out / SNAPSHOT, snapshot(args))
    try:
        COMMANDS[args.command](args, out)
        return 0
    except Exception as exc:
        kind = exc.kind if isinstance(exc, CliError) else type(exc).__name__
        _write_json(out / ERROR_RECORD, {"command": args.command, "error": kind,
                                         "message": str(exc)})
        print(f"handbio {args.command}: {exc}", file=sys.stderr)
        return 1
    finally:
        (out / LOCK).unlink(missing_ok=True)


if __name__ == "__main__":
    sys.exit(main())
