"""Image preprocessing: guided filtering, detail layer, luma, resizing and SSIM.

Images are float arrays in [0, 1]; single-channel images are 2-D ``(H, W)``
arrays and color images are ``(H, W, 3)``.  Windows that cross the image
border are clipped and normalized by the number of in-bounds pixels.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .container import read_planes, write_planes

LUMA_COEFFS = (0.2989, 0.5870, 0.1140)
PAPER_SIZE = 224


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class GuidedFilterParams:
    radius: int = 10
    regularization: float = 0.01

    def __post_init__(self):
        if self.radius < 1:
            raise ParameterError(f"radius must be >= 1, got {self.radius}")
        if self.regularization < 0:
            raise ParameterError(f"regularization must be >= 0, got {self.regularization}")


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ParameterError(f"window must be odd and >= 3, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ParameterError("k1 and k2 must be positive")


def _as_gray(img, name="img") -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be single-channel, got shape {arr.shape}")
    return arr


@numba.njit(cache=True)
def _clipped_box_mean(img, r):
    """Sliding sums: a running column sum per row step, then a running row sum."""
    h, w = img.shape
    out = np.empty((h, w))
    col = np.zeros(w)
    for i in range(min(r, h)):
        col += img[i]
    for i in range(h):
        if i + r < h:
            col += img[i + r]
        if i - r - 1 >= 0:
            col -= img[i - r - 1]
        ny = min(i + r, h - 1) - max(i - r, 0) + 1
        acc = 0.0
        for j in range(min(r, w)):
            acc += col[j]
        for j in range(w):
            if j + r < w:
                acc += col[j + r]
            if j - r - 1 >= 0:
                acc -= col[j - r - 1]
            out[i, j] = acc / (ny * (min(j + r, w - 1) - max(j - r, 0) + 1))
    return out


def box_mean(img, radius: int) -> np.ndarray:
    """Mean over the clipped ``(2r+1) x (2r+1)`` window around every pixel.

    Uses running sums, so the cost does not depend on ``radius``.
    """
    arr = _as_gray(img)
    if radius < 1:
        raise ParameterError(f"radius must be >= 1, got {radius}")
    if radius >= min(arr.shape):
        raise ParameterError(
            f"degenerate window: radius {radius} >= min image dimension {min(arr.shape)}")
    return _clipped_box_mean(np.ascontiguousarray(arr, dtype=np.float64), radius)


def _guided_gray(p: np.ndarray, guide: np.ndarray, radius: int, reg: float) -> np.ndarray:
    mean_i = box_mean(guide, radius)
    mean_p = box_mean(p, radius)
    cov_ip = box_mean(guide * p, radius) - mean_i * mean_p
    var_i = box_mean(guide * guide, radius) - mean_i * mean_i
    denom = var_i + reg
    # flat windows with no regularization: a = 0 keeps b equal to the window mean
    safe = denom > 0
    a = np.divide(cov_ip, denom, out=np.zeros_like(cov_ip), where=safe)
    b = mean_p - a * mean_i
    return box_mean(a, radius) * guide + box_mean(b, radius)


def guided_filter(inp, guide=None, params: GuidedFilterParams = GuidedFilterParams()) -> np.ndarray:
    """Edge-preserving smoothing with the guided filter.

    Color inputs are filtered per channel, each channel guiding itself; ``guide``
    must then be ``None`` or the input itself.
    """
    arr = np.asarray(inp, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] > 1:
        if guide is not None and np.shape(guide) != arr.shape:
            raise ShapeError(f"guide shape {np.shape(guide)} != input shape {arr.shape}")
        return np.stack([_guided_gray(arr[..., c], arr[..., c], params.radius,
                                      params.regularization)
                         for c in range(arr.shape[2])], axis=2)
    p = _as_gray(arr, "input")
    g = p if guide is None else _as_gray(guide, "guide")
    if g.shape != p.shape:
        raise ShapeError(f"guide shape {g.shape} != input shape {p.shape}")
    return _guided_gray(p, g, params.radius, params.regularization)


def detail_layer(original, smoothed, epsilon: float = 1e-3) -> np.ndarray:
    """High-frequency layer: ``original / (smoothed + epsilon)``."""
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(smoothed, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a / (b + epsilon)


def rgb_to_luma(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected a 3-channel image, got shape {arr.shape}")
    r, g, b = LUMA_COEFFS
    return r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]


def normalize_minmax(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError("empty image")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def _interp_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel center alignment."""
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target size must be positive, got {out_h}x{out_w}")
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    y0, y1, fy = _interp_axis(h, out_h)
    x0, x1, fx = _interp_axis(w, out_w)
    extra = (None,) * (arr.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _valid_mean(img: np.ndarray, win: int) -> np.ndarray:
    sat = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    sat[1:, 1:] = img.cumsum(0).cumsum(1)
    s = sat[win:, win:] - sat[:-win, win:] - sat[win:, :-win] + sat[:-win, :-win]
    return s / (win * win)


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM over all fully contained uniform windows."""
    x = _as_gray(a, "a")
    y = _as_gray(b, "b")
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    win = params.window
    if min(x.shape) < win:
        raise ShapeError(f"images smaller than the {win}x{win} window")
    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    mx, my = _valid_mean(x, win), _valid_mean(y, win)
    # symmetric forms so ssim(a, b) == ssim(b, a) bit for bit
    mxy = mx * my
    msq = mx * mx + my * my
    vx = np.maximum(_valid_mean(x * x, win) - mx * mx, 0.0)
    vy = np.maximum(_valid_mean(y * y, win) - my * my, 0.0)
    cov = _valid_mean(x * y, win) - mxy
    s = ((2 * mxy + c1) * (2 * cov + c2)) / ((msq + c1) * (vx + vy + c2))
    return float(np.clip(s.mean(), -1.0, 1.0))


def select_frames(frames, params: SsimParams = SsimParams(), threshold: float = 0.9) -> list[int]:
    """Indices of frames kept for redundancy removal.

    Frame 0 is always kept; later frames are kept when their SSIM against the
    last kept frame falls below ``threshold``.
    """
    if not -1 < threshold <= 1:
        raise ParameterError(f"threshold must lie in (-1, 1], got {threshold}")
    frames = list(frames)
    if not frames:
        return []
    gray = [rgb_to_luma(f) if np.ndim(f) == 3 and np.shape(f)[2] == 3 else _as_gray(f)
            for f in frames]
    kept = [0]
    for i in range(1, len(gray)):
        if ssim(gray[i], gray[kept[-1]], params) < threshold:
            kept.append(i)
    return kept


def detail_luma(img, gf: GuidedFilterParams = GuidedFilterParams(), epsilon: float = 1e-3):
    """Smoothed image and normalized detail-layer luma at full resolution."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected a 3-channel image, got shape {arr.shape}")
    # overshoot near strong edges would leave [0, 1]
    smooth = np.clip(guided_filter(arr, params=gf), 0.0, 1.0)
    high = normalize_minmax(rgb_to_luma(detail_layer(arr, smooth, epsilon)))
    return smooth, high


def preprocess(img, gf: GuidedFilterParams = GuidedFilterParams(), epsilon: float = 1e-3,
               size: int = PAPER_SIZE):
    """Two network inputs from a color hand image.

    Returns ``(low, high)`` with shapes ``(size, size, 3)`` and ``(size, size, 1)``:
    the guided-filter output and the normalized luma of the detail layer.
    """
    smooth, high = detail_luma(img, gf, epsilon)
    low = np.clip(resize_bilinear(smooth, size, size), 0.0, 1.0)
    high = np.clip(resize_bilinear(high, size, size), 0.0, 1.0)
    return low, high[:, :, None]


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG/JPEG to float RGB in [0, 1]."""
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(path, img) -> None:
    from PIL import Image
    arr = np.asarray(img, dtype=np.float64)
    data = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(path)


def save_pair(path, low, high) -> None:
    write_planes(path, [low, high])


def load_pair(path):
    low, high = read_planes(Path(path))
    return low, high
