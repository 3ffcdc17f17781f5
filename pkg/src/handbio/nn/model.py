"""Two-stream network: a color stream on the smoothed image and a luma stream
on the detail layer, fused by a fully connected layer.

Layer names follow the AlexNet numbering: ``conv1..convK``, then the
backbone ``fc6``/``fc7`` and the new reduction layers ``fc8`` onward.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..container import pack_json, read_archive, unpack_json, write_archive
from .layers import (AvgPool1d, Conv2d, DepthConcat, Dropout, Flatten, Linear, MaxPool2d,
                     ReLU, ShapeError, SoftmaxCrossEntropy, StateError)

LUMA = (0.2989, 0.5870, 0.1140)
CLASSES = ("male", "female")


class LoadError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    pool: tuple[int, int] | None = None   # (kernel, stride) of a following max pool


@dataclass(frozen=True)
class StreamSpec:
    in_channels: int
    convs: tuple[ConvSpec, ...]
    backbone_fc: tuple[int, ...]          # fc6, fc7: ReLU + dropout after each
    new_fc: tuple[int, ...]               # fc8...: ReLU + dropout except the last

    def __post_init__(self):
        if len(self.new_fc) < 1:
            raise ValueError("a stream needs at least one new fc layer")


@dataclass(frozen=True)
class TwoStreamConfig:
    input_size: int
    stream1: StreamSpec
    stream2: StreamSpec
    fusion_fc_out: int | None = None      # None: width of the concatenated taps
    pool_kernel: int = 2
    pool_stride: int = 2
    dropout: float = 0.5
    preset: str = "custom"
    dtype: str = "float64"

    @property
    def tap_dims(self):
        return self.stream1.new_fc[-1], self.stream2.new_fc[-1]

    @property
    def fusion_in(self):
        return sum(self.tap_dims)

    @property
    def fusion_out(self):
        return self.fusion_in if self.fusion_fc_out is None else self.fusion_fc_out

    @property
    def pooled_dim(self):
        return (self.fusion_out - self.pool_kernel) // self.pool_stride + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        def stream(s):
            return StreamSpec(s["in_channels"],
                              tuple(ConvSpec(**{**c, "pool": tuple(c["pool"]) if c["pool"] else None})
                                    for c in s["convs"]),
                              tuple(s["backbone_fc"]), tuple(s["new_fc"]))
        return cls(**{**d, "stream1": stream(d["stream1"]), "stream2": stream(d["stream2"])})


_ALEXNET_CONVS = (
    ConvSpec(96, 11, 4, 2, pool=(3, 2)),
    ConvSpec(256, 5, 1, 2, pool=(3, 2)),
    ConvSpec(384, 3, 1, 1),
    ConvSpec(384, 3, 1, 1),
    ConvSpec(256, 3, 1, 1, pool=(3, 2)),
)

_DESK_CONVS = (
    ConvSpec(16, 5, 1, 2, pool=(2, 2)),
    ConvSpec(32, 3, 1, 1, pool=(2, 2)),
)


def paper_config(fusion_fc_out: int | None = 1062) -> TwoStreamConfig:
    """224x224 AlexNet-style streams with fc8/fc9 (2048, 531) and fc8-fc10 (2048, 2048, 531)."""
    return TwoStreamConfig(
        input_size=224,
        stream1=StreamSpec(3, _ALEXNET_CONVS, (4096, 4096), (2048, 531)),
        stream2=StreamSpec(1, _ALEXNET_CONVS, (4096, 4096), (2048, 2048, 531)),
        fusion_fc_out=fusion_fc_out, preset="paper", dtype="float32")


def desk_config(fusion_fc_out: int | None = None) -> TwoStreamConfig:
    """Same topology scaled down to 32x32 inputs and two conv layers per stream."""
    return TwoStreamConfig(
        input_size=32,
        stream1=StreamSpec(3, _DESK_CONVS, (64,), (32, 16)),
        stream2=StreamSpec(1, _DESK_CONVS, (64,), (32, 32, 16)),
        fusion_fc_out=fusion_fc_out, preset="desk", dtype="float64")


def preset_config(name: str) -> TwoStreamConfig:
    if name == "paper":
        return paper_config()
    if name == "desk":
        return desk_config()
    raise ValueError(f"unknown preset {name!r}")


class Stream:
    """Conv stack followed by the fc chain; the output of the last fc is the tap."""

    def __init__(self, spec: StreamSpec, input_size: int, prefix: str, dropout: float,
                 rng: np.random.Generator, dtype):
        self.spec = spec
        self.prefix = prefix
        self.layers = []
        c, h = spec.in_channels, input_size
        for i, cs in enumerate(spec.convs, 1):
            conv = Conv2d(c, cs.out_channels, cs.kernel, cs.stride, cs.pad,
                          name=f"{prefix}.conv{i}", rng=rng, dtype=dtype)
            h = conv.output_shape(h, h)[0]
            self.layers += [conv, ReLU(f"{prefix}.relu{i}")]
            if cs.pool:
                self.layers.append(MaxPool2d(*cs.pool, name=f"{prefix}.pool{i}"))
                h = (h - cs.pool[0]) // cs.pool[1] + 1
            c = cs.out_channels
            if h < 1:
                raise ShapeError(f"{prefix}: conv stack collapses a {input_size}px input")
        self.layers.append(Flatten(f"{prefix}.flatten"))
        d = c * h * h
        first = 8 - len(spec.backbone_fc)
        dims = list(spec.backbone_fc) + list(spec.new_fc)
        for j, out in enumerate(dims):
            idx = first + j
            if j >= len(spec.backbone_fc) and out > d:
                raise ShapeError(f"{prefix}.fc{idx}: reduction layer widens {d} -> {out}")
            fc = Linear(d, out, name=f"{prefix}.fc{idx}", rng=rng, dtype=dtype)
            fc.group = "pretrained" if j < len(spec.backbone_fc) else "new"
            self.layers.append(fc)
            if j < len(dims) - 1:
                self.layers += [ReLU(f"{prefix}.relu_fc{idx}"),
                                Dropout(dropout, f"{prefix}.drop{idx}", rng=rng)]
            d = out
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                layer.group = "pretrained"
        self.out_dim = d

    @property
    def tap_name(self):
        return [l for l in self.layers if isinstance(l, Linear)][-1].name

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def param_layers(self):
        return [l for l in self.layers if l.params]


class TwoStreamModel:
    def __init__(self, config: TwoStreamConfig, seed: int = 0):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        self.stream1 = Stream(config.stream1, config.input_size, "s1", config.dropout, rng, dtype)
        self.stream2 = Stream(config.stream2, config.input_size, "s2", config.dropout, rng, dtype)
        self.concat = DepthConcat("concat")
        self.fusion = Linear(config.fusion_in, config.fusion_out, name="fusion", rng=rng, dtype=dtype)
        self.pool = AvgPool1d(config.pool_kernel, config.pool_stride, name="pool")
        self.head = Linear(config.pooled_dim, 2, name="head", rng=rng, dtype=dtype)
        self.fusion.group = self.head.group = "new"
        self.softmax = SoftmaxCrossEntropy("softmax")
        self.trained = False
        self._taps = None

    # -- parameters -------------------------------------------------------
    def param_layers(self):
        return self.stream1.param_layers() + self.stream2.param_layers() + [self.fusion, self.head]

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.param_layers() for k, v in l.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": l.grads[k] for l in self.param_layers() for k in l.params}

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        bad = [k for k in values if k not in params]
        if bad:
            raise LoadError(f"unknown parameters: {', '.join(bad)}")
        for key, val in values.items():
            if params[key].shape != np.shape(val):
                raise LoadError(f"layer {key}: shape {np.shape(val)} does not match "
                                f"expected {params[key].shape}")
        for layer in self.param_layers():
            for k in layer.params:
                key = f"{layer.name}.{k}"
                if key in values:
                    layer.params[k] = np.array(values[key], dtype=layer.params[k].dtype)

    # -- passes -----------------------------------------------------------
    def forward(self, low, high, train=False):
        """Class probabilities ``(N, 2)`` for NCHW batches."""
        low = np.asarray(low, dtype=self.config.dtype)
        high = np.asarray(high, dtype=self.config.dtype)
        t1 = self.stream1.forward(low, train)
        t2 = self.stream2.forward(high, train)
        fused = self.fusion.forward(self.concat.forward([t1, t2], train), train)
        self._taps = (t1, t2, fused)
        logits = self.head.forward(self.pool.forward(fused, train), train)
        return self.softmax.forward(logits, train)

    def loss(self, labels) -> float:
        return self.softmax.loss(labels)

    def backward(self):
        g = self.softmax.backward()
        g = self.pool.backward(self.head.backward(g))
        g1, g2 = self.concat.backward(self.fusion.backward(g))
        self.stream1.backward(g1)
        self.stream2.backward(g2)


def build_two_stream(config: TwoStreamConfig, seed: int = 0, weights=None) -> TwoStreamModel:
    """Randomly initialised model (Kaiming fan-in, zero bias), optionally loaded from a file.

    ``weights`` may be a trained model file written by :func:`save_model` or a
    backbone file (see :func:`load_backbone`).
    """
    model = TwoStreamModel(config, seed)
    if weights is not None:
        arc = read_archive(weights)
        if "__meta__" in arc and unpack_json(arc["__meta__"]).get("kind") == "two_stream":
            _apply_model_archive(model, arc, weights)
        else:
            load_backbone(model, arc)
    return model


def luma_init_conv1(rgb_weights, axis: int = 2) -> np.ndarray:
    """Collapse the color axis of first-layer filters to one luma channel.

    Default layout is ``(k, k, 3, filters)``; the result keeps the axis with size 1.
    """
    w = np.asarray(rgb_weights)
    if w.shape[axis] != 3:
        raise ShapeError(f"channel axis {axis} has size {w.shape[axis]}, expected 3")
    r, g, b = (np.take(w, i, axis=axis) for i in range(3))
    return np.expand_dims(LUMA[0] * r + LUMA[1] * g + LUMA[2] * b, axis)


def load_backbone(model: TwoStreamModel, source) -> None:
    """Copy backbone weights (``conv1..``, ``fc6``, ``fc7``) into both streams.

    Entries are named ``conv1.W``, ``conv1.b`` ... in this package's layouts
    (conv weights ``(out, in, k, k)``, fc weights ``(in, out)``).  The second
    stream's conv1 receives the luma combination of the color filters.
    """
    arc = read_archive(source) if not isinstance(source, dict) else source
    values = {}
    for key, val in arc.items():
        if key.startswith("__"):
            continue
        values[f"s1.{key}"] = val
        if key == "conv1.W":
            val = luma_init_conv1(val, axis=1)
        values[f"s2.{key}"] = val
    model.set_params(values)


def save_model(model: TwoStreamModel, path) -> None:
    meta = {"kind": "two_stream", "config": model.config.to_dict(), "trained": model.trained}
    entries = {"__meta__": pack_json(meta)}
    entries.update(model.named_params())
    write_archive(path, entries)


def _apply_model_archive(model, arc, path):
    params = {k: v for k, v in arc.items() if not k.startswith("__")}
    missing = sorted(set(model.named_params()) - set(params))
    if missing:
        raise LoadError(f"{path}: missing layers {', '.join(missing)}")
    model.set_params(params)
    model.trained = bool(unpack_json(arc["__meta__"]).get("trained", False))


def load_model(path) -> TwoStreamModel:
    arc = read_archive(path)
    if "__meta__" not in arc:
        raise LoadError(f"{path}: not a two-stream model file")
    meta = unpack_json(arc["__meta__"])
    model = TwoStreamModel(TwoStreamConfig.from_dict(meta["config"]))
    _apply_model_archive(model, arc, path)
    return model


def to_nchw(images) -> np.ndarray:
    """Stack ``(H, W, C)`` or ``(H, W)`` images into an NCHW batch."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[..., None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def _batch(model, low, high):
    low, high = np.asarray(low), np.asarray(high)
    single = low.ndim == 3 and low.shape[-1] == 3
    if single:
        low, high = low[None], high[None]
    if low.shape[-1] == 3:
        low, high = to_nchw(low), to_nchw(high)
    return low, high, single


def forward_features(model: TwoStreamModel, low, high) -> dict[str, np.ndarray]:
    """Tap vectors of a trained model in eval mode.

    Accepts one image pair in ``(H, W, C)`` layout or NCHW batches.  Keys:
    ``fc9_s1``, ``fc10_s2``, ``fusion`` and their concatenation ``concat``.
    """
    if not model.trained:
        raise StateError("model has not been trained; run training or load a trained model")
    low, high, single = _batch(model, low, high)
    model.forward(low, high, train=False)
    t1, t2, fused = model._taps
    taps = {"fc9_s1": t1, "fc10_s2": t2, "fusion": fused}
    taps["concat"] = np.concatenate([t1, t2, fused], axis=1)
    if single:
        taps = {k: v[0] for k, v in taps.items()}
    return taps


def predict_gender(model: TwoStreamModel, low, high):
    """``(class_name, probabilities)`` for one pair, or arrays for a batch."""
    if not model.trained:
        raise StateError("model has not been trained; run training or load a trained model")
    low, high, single = _batch(model, low, high)
    probs = model.forward(low, high, train=False)
    idx = probs.argmax(axis=1)
    if single:
        return CLASSES[int(idx[0])], probs[0]
    return np.array([CLASSES[i] for i in idx]), probs
