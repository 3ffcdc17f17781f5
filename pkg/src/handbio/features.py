"""Local binary pattern texture features."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .container import pack_json, read_archive, unpack_json, write_archive
from .imgproc import ShapeError, _as_gray

SOURCES = ("lbp", "fc9", "fc10", "fusion", "concat")


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class LbpParams:
    neighbors: int = 8
    radius: int = 1
    uniform: bool = True

    def __post_init__(self):
        if self.neighbors != 8:
            raise ValueError("only 8 neighbors are supported")
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")


@dataclass
class FeatureVector:
    values: np.ndarray
    source: str = "lbp"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.source not in SOURCES:
            raise ValueError(f"unknown feature source {self.source!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature vector has non-finite entries")

    def __len__(self):
        return len(self.values)


def _transitions(code: int, bits: int = 8) -> int:
    rot = ((code >> 1) | ((code & 1) << (bits - 1)))
    return bin(code ^ rot).count("1")


def uniform_lookup(bits: int = 8) -> np.ndarray:
    """Map every code to its uniform-pattern bin; non-uniform codes share the last bin.

    Uniform patterns (at most two circular 0/1 transitions) are numbered in
    increasing code order, giving 58 bins plus one catch-all for 8 bits.
    """
    table = np.empty(1 << bits, dtype=np.int64)
    uniform = [c for c in range(1 << bits) if _transitions(c, bits) <= 2]
    table[:] = len(uniform)
    table[uniform] = np.arange(len(uniform))
    return table


_UNIFORM8 = uniform_lookup(8)


def _offsets(params: LbpParams):
    ang = 2 * np.pi * np.arange(params.neighbors) / params.neighbors
    dx = params.radius * np.cos(ang)
    dy = -params.radius * np.sin(ang)   # counter-clockwise with rows growing downward
    dx[np.abs(dx) < 1e-12] = 0.0
    dy[np.abs(dy) < 1e-12] = 0.0
    return dx, dy


def _codes(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, params: LbpParams) -> np.ndarray:
    center = img[ys, xs]
    code = np.zeros(ys.shape, dtype=np.int64)
    h, w = img.shape
    for i, (dx, dy) in enumerate(zip(*_offsets(params))):
        fx, fy = xs + dx, ys + dy
        x0 = np.floor(fx).astype(int)
        y0 = np.floor(fy).astype(int)
        tx, ty = fx - x0, fy - y0
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        c00 = img[y0, x0]
        # difference form: exact for flat patches and unchanged by a constant offset
        diff = ((c00 - center) + tx * (img[y0, x1] - c00) + ty * (img[y1, x0] - c00)
                + tx * ty * (img[y1, x1] - img[y0, x1] - img[y1, x0] + c00))
        code |= (diff >= 0).astype(np.int64) << i
    return code


def lbp_code(img, x: int, y: int, params: LbpParams = LbpParams()) -> int:
    """8-bit LBP code at column ``x``, row ``y``.

    Bit ``i`` is set when the neighbor at angle ``2*pi*i/8`` (east first,
    counter-clockwise) is >= the center; off-grid neighbors are bilinearly
    interpolated.
    """
    arr = _as_gray(img)
    r = params.radius
    h, w = arr.shape
    if not (r <= x < w - r and r <= y < h - r):
        raise DomainError(f"pixel ({x}, {y}) closer than radius {r} to the border")
    return int(_codes(arr, np.array([y]), np.array([x]), params)[0])


def lbp_codes(img, params: LbpParams = LbpParams()) -> np.ndarray:
    """Codes for every pixel at least ``radius`` away from the border."""
    arr = _as_gray(img)
    r = params.radius
    h, w = arr.shape
    if h <= 2 * r + 1 or w <= 2 * r + 1:
        raise ShapeError(f"image {h}x{w} too small for LBP radius {r}")
    ys, xs = np.mgrid[r:h - r, r:w - r]
    return _codes(arr, ys, xs, params)


def lbp_histogram(img, params: LbpParams = LbpParams()) -> FeatureVector:
    codes = lbp_codes(img, params).ravel()
    if params.uniform:
        hist = np.bincount(_UNIFORM8[codes], minlength=59)
    else:
        hist = np.bincount(codes, minlength=256)
    hist = hist.astype(np.float64)
    return FeatureVector(hist / hist.sum(), "lbp")


def write_feature_csv(path, rows) -> None:
    """Rows of ``(image_id, FeatureVector)``; one CSV line each: id, source, values."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for image_id, fv in rows:
            wr.writerow([image_id, fv.source] + [repr(float(v)) for v in fv.values])


def read_feature_csv(path) -> list[tuple[str, FeatureVector]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            out.append((row[0], FeatureVector(np.array([float(v) for v in row[2:]]), row[1])))
    return out


def write_feature_archive(path, ids, vectors: list[FeatureVector]) -> None:
    mat = np.stack([v.values for v in vectors]) if vectors else np.zeros((0, 0))
    sources = sorted({v.source for v in vectors})
    write_archive(path, {"meta": pack_json({"ids": list(ids), "sources": [v.source for v in vectors],
                                            "kinds": sources}),
                         "values": mat})


def read_feature_archive(path):
    arc = read_archive(path)
    meta = unpack_json(arc["meta"])
    vecs = [FeatureVector(row, src) for row, src in zip(arc["values"], meta["sources"])]
    return meta["ids"], vecs
