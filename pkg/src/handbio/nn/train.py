"""Two-stage training with SGD and momentum.

Stage 1 trains each stream alone behind a temporary two-way softmax head;
the joint stage then trains the whole two-stream model end to end.  Layers
inherited from a backbone (``conv*``, ``fc6``, ``fc7``) and the new layers
(``fc8`` onward, fusion, heads) use separate learning rates.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .layers import Dropout, Linear, SoftmaxCrossEntropy
from .model import Stream, TwoStreamModel


class DataError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainHyper:
    lr_pretrained: float = 1e-4
    lr_new: float = 0.002
    momentum: float = 0.9
    batch: int = 64
    epochs_stage1: tuple[int, int] = (15, 20)
    epochs_joint: tuple[int, int] = (7, 9)
    rel_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.lr_pretrained <= 0 or self.lr_new <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    @classmethod
    def desk(cls, **kw):
        """Settings for randomly initialised desk-preset models.

        Without a pretrained backbone the conv layers need the same rate as
        the new layers to learn anything in a handful of epochs.
        """
        base = dict(lr_pretrained=0.003, lr_new=0.003, batch=32)
        base.update(kw)
        return cls(**base)


class SGD:
    """``v <- momentum * v - lr * g``; ``theta <- theta + v`` with per-layer rates."""

    def __init__(self, layers, lr_map: dict[str, float], momentum: float):
        self.layers = list(layers)
        self.lr_map = lr_map
        self.momentum = momentum
        self.velocity = {(l.name, k): np.zeros_like(v)
                         for l in self.layers for k, v in l.params.items()}

    def step(self):
        for layer in self.layers:
            lr = self.lr_map[layer.name]
            for k, p in layer.params.items():
                v = self.velocity[(layer.name, k)]
                v *= self.momentum
                v -= lr * layer.grads[k]
                p += v


def learning_rates(layers, hyper: TrainHyper) -> dict[str, float]:
    return {l.name: hyper.lr_pretrained if getattr(l, "group", "new") == "pretrained"
            else hyper.lr_new for l in layers}


def _check_data(x_list, labels):
    labels = np.asarray(labels)
    if labels.size == 0 or any(len(x) == 0 for x in x_list):
        raise DataError("empty training data")
    if any(len(x) != len(labels) for x in x_list):
        raise DataError("inputs and labels differ in length")
    if not set(np.unique(labels)) <= {0, 1}:
        raise DataError("labels must be 0/1")
    return labels.astype(np.int64)


def _reseed_dropout(layers, seed):
    for i, layer in enumerate(layers):
        if isinstance(layer, Dropout):
            layer.rng = np.random.default_rng([seed, i])


def _run_epochs(forward, backward, loss_fn, inputs, labels, optimizer, hyper, epochs, rng,
                tag, log):
    lo, hi = epochs
    n = len(labels)
    prev = None
    history = []
    for epoch in range(1, hi + 1):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, hyper.batch):
            idx = order[start:start + hyper.batch]
            probs = forward([x[idx] for x in inputs], True)
            loss = loss_fn(labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"{tag}: loss diverged at epoch {epoch}")
            backward()
            optimizer.step()
            total += loss * len(idx)
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
        epoch_loss = total / n
        history.append(epoch_loss)
        if log is not None:
            log.append((tag, epoch, "train", epoch_loss, correct / n))
        if prev is not None and epoch >= lo and (prev - epoch_loss) < hyper.rel_tol * abs(prev):
            break
        prev = epoch_loss
    if log is not None:
        # final pass with dropout off gives the accuracy the trained weights actually reach
        total, correct = 0.0, 0
        for start in range(0, n, hyper.batch):
            sl = slice(start, start + hyper.batch)
            probs = forward([x[sl] for x in inputs], False)
            total += loss_fn(labels[sl]) * len(probs)
            correct += int((probs.argmax(axis=1) == labels[sl]).sum())
        log.append((tag, len(history), "eval", total / n, correct / n))
    return history


def train_stage1(model: TwoStreamModel, stream: int, images, labels, hyper: TrainHyper,
                 log: list | None = None) -> dict[str, np.ndarray]:
    """Train one stream behind a temporary ``fc -> 2`` + softmax head.

    ``images`` is the NCHW batch the stream consumes (low-frequency color
    images for stream 1, detail layers for stream 2).  The stream's
    parameters are updated in place and returned; the head is discarded.
    """
    s: Stream = model.stream1 if stream == 1 else model.stream2
    labels = _check_data([images], labels)
    images = np.asarray(images, dtype=model.config.dtype)
    rng = np.random.default_rng([hyper.seed, stream])
    head = Linear(s.out_dim, 2, name=f"s{stream}.tmp_head", rng=rng, dtype=images.dtype)
    head.group = "new"
    softmax = SoftmaxCrossEntropy(f"s{stream}.tmp_softmax")
    _reseed_dropout(s.layers, hyper.seed * 7919 + stream)
    layers = s.param_layers() + [head]
    opt = SGD(layers, learning_rates(layers, hyper), hyper.momentum)

    def forward(xs, train):
        return softmax.forward(head.forward(s.forward(xs[0], train), train))

    def backward():
        s.backward(head.backward(softmax.backward()))

    _run_epochs(forward, backward, softmax.loss, [images], labels, opt, hyper,
                hyper.epochs_stage1, rng, f"stage1-s{stream}", log)
    return {f"{l.name}.{k}": v for l in s.param_layers() for k, v in l.params.items()}


def train_joint(model: TwoStreamModel, low, high, labels, hyper: TrainHyper,
                log: list | None = None) -> TwoStreamModel:
    """End-to-end training of every layer, starting from the current weights."""
    labels = _check_data([low, high], labels)
    low = np.asarray(low, dtype=model.config.dtype)
    high = np.asarray(high, dtype=model.config.dtype)
    rng = np.random.default_rng([hyper.seed, 3])
    _reseed_dropout(model.stream1.layers + model.stream2.layers, hyper.seed * 7919 + 3)
    layers = model.param_layers()
    opt = SGD(layers, learning_rates(layers, hyper), hyper.momentum)
    _run_epochs(lambda xs, train: model.forward(xs[0], xs[1], train), model.backward, model.loss,
                [low, high], labels, opt, hyper, hyper.epochs_joint, rng, "joint", log)
    model.trained = True
    return model


def train_two_stage(model: TwoStreamModel, low, high, labels, hyper: TrainHyper,
                    log: list | None = None) -> TwoStreamModel:
    train_stage1(model, 1, low, labels, hyper, log)
    train_stage1(model, 2, high, labels, hyper, log)
    return train_joint(model, low, high, labels, hyper, log)


def write_log(path, log) -> None:
    """CSV with columns stage, epoch, split, loss, accuracy."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["stage", "epoch", "split", "loss", "accuracy"])
        for stage, epoch, split, loss, acc in log:
            wr.writerow([stage, epoch, split, f"{loss:.10g}", f"{acc:.10g}"])
