"""Dense two-frame optical flow by polynomial expansion (Farneback).

Each frame is locally approximated by ``f(x) ~ x^T A x + b^T x + c`` using a
Gaussian-weighted least-squares fit. For a pure translation ``d`` between two
frames, ``b2 = b1 - 2 A d``, so ``d`` follows from the averaged ``A`` and the
change in ``b``. The estimate is refined coarse-to-fine over an image pyramid,
sampling the second frame's coefficients at the current displacement.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Tensor

FLO_MAGIC = b"PIEH"


class FlowFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FlowParams:
    levels: int = 3
    scale: float = 0.5
    win_size: int = 11
    win_sigma: float = 1.5
    poly_n: int = 7
    poly_sigma: float = 1.5
    iterations: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not 0 < self.scale < 1:
            raise ValueError("scale must lie in (0, 1)")
        if self.win_size < 1 or self.win_size % 2 == 0:
            raise ValueError("win_size must be a positive odd integer")
        if self.poly_n < 3 or self.poly_n % 2 == 0:
            raise ValueError("poly_n must be an odd integer >= 3")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class FlowField:
    """Per-pixel displacement ``data[y, x] = (u, v)`` in pixels."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError(f"flow must have shape (H, W, 2), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("flow contains non-finite values")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def u(self):
        return self.data[..., 0]

    @property
    def v(self):
        return self.data[..., 1]

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width, 2), np.float32))


def to_gray(image):
    """Luma of an RGB image (H, W, 3); uint8 input is rescaled to [0, 1]."""
    img = np.asarray(image)
    scale = 1.0 / 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float64) * scale
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _gauss_taps(n, sigma):
    r = n // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    return t, np.exp(-(t**2) / (2.0 * sigma**2))


def _sep(img, wy, wx):
    out = ndimage.correlate1d(img, wy, axis=0, mode="nearest")
    return ndimage.correlate1d(out, wx, axis=1, mode="nearest")


def polynomial_expansion(frame, neighborhood=7, sigma=1.5):
    """Fit a quadratic to every pixel's Gaussian-weighted neighbourhood.

    Returns ``(A, b, c)`` with shapes (H, W, 2, 2), (H, W, 2) and (H, W);
    coordinates are (x, y) = (column, row) relative to the pixel.
    """
    if neighborhood % 2 == 0 or neighborhood < 3:
        raise ValueError(f"neighborhood must be odd and >= 3, got {neighborhood}")
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("polynomial_expansion expects a single-channel image")
    t, g = _gauss_taps(neighborhood, sigma)
    g1, g2 = g * t, g * t * t

    # basis order: 1, x, y, x^2, y^2, xy
    xs, ys = np.meshgrid(t, t)
    w = np.outer(g, g)
    basis = np.stack([np.ones_like(xs), xs, ys, xs * xs, ys * ys, xs * ys]).reshape(6, -1)
    gram = (basis * w.ravel()) @ basis.T
    ginv = np.linalg.inv(gram)

    moments = np.stack(
        [
            _sep(f, g, g),
            _sep(f, g, g1),
            _sep(f, g1, g),
            _sep(f, g, g2),
            _sep(f, g2, g),
            _sep(f, g1, g1),
        ],
        axis=-1,
    )
    coef = moments @ ginv.T
    h, wd = f.shape
    A = np.empty((h, wd, 2, 2))
    A[..., 0, 0] = coef[..., 3]
    A[..., 1, 1] = coef[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = coef[..., 5] / 2
    b = coef[..., 1:3].copy()
    c = coef[..., 0].copy()
    return A, b, c


def resize_image(img, shape):
    """Bilinear resize with pixel-centre alignment."""
    h, w = img.shape[:2]
    H, W = shape
    if (h, w) == (H, W):
        return img.copy()
    ry = (np.arange(H) + 0.5) * (h / H) - 0.5
    rx = (np.arange(W) + 0.5) * (w / W) - 0.5
    yy, xx = np.meshgrid(ry, rx, indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(img[..., k], [yy, xx], order=1, mode="nearest") for k in range(img.shape[2])],
        axis=-1,
    )


def _pyramid(img, levels, scale):
    out = [img]
    h, w = img.shape
    for lvl in range(1, levels):
        s = scale**lvl
        sigma = (1.0 / s - 1.0) * 0.5
        blurred = ndimage.gaussian_filter(img, sigma, mode="nearest", truncate=3.0)
        size = (max(1, int(round(h * s))), max(1, int(round(w * s))))
        out.append(resize_image(blurred, size))
    return out


def _refine(exp1, exp2, flow, params, taps):
    A1, b1 = exp1
    A2, b2 = exp2
    h, w = b1.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + flow[..., 1], xx + flow[..., 0]]

    def warp(ch):
        return ndimage.map_coordinates(ch, coords, order=1, mode="nearest")

    a11 = (A1[..., 0, 0] + warp(A2[..., 0, 0])) * 0.5
    a12 = (A1[..., 0, 1] + warp(A2[..., 0, 1])) * 0.5
    a22 = (A1[..., 1, 1] + warp(A2[..., 1, 1])) * 0.5
    db1 = -0.5 * (warp(b2[..., 0]) - b1[..., 0]) + a11 * flow[..., 0] + a12 * flow[..., 1]
    db2 = -0.5 * (warp(b2[..., 1]) - b1[..., 1]) + a12 * flow[..., 0] + a22 * flow[..., 1]

    # normal equations of A d = db, aggregated over the averaging window
    g11 = _sep(a11 * a11 + a12 * a12, taps, taps)
    g12 = _sep(a11 * a12 + a12 * a22, taps, taps)
    g22 = _sep(a12 * a12 + a22 * a22, taps, taps)
    h1 = _sep(a11 * db1 + a12 * db2, taps, taps)
    h2 = _sep(a12 * db1 + a22 * db2, taps, taps)

    det = g11 * g22 - g12 * g12
    scale = np.maximum(g11 + g22, 1e-30)
    ok = det > 1e-9 * scale * scale
    safe = np.where(ok, det, 1.0)
    out = flow.copy()
    out[..., 0] = np.where(ok, (g22 * h1 - g12 * h2) / safe, flow[..., 0])
    out[..., 1] = np.where(ok, (g11 * h2 - g12 * h1) / safe, flow[..., 1])
    return out


def farneback_flow(prev, nxt, params=None):
    """Dense flow from ``prev`` to ``nxt`` (grayscale, values in [0, 1])."""
    params = params or FlowParams()
    p = np.asarray(prev, dtype=np.float64)
    q = np.asarray(nxt, dtype=np.float64)
    if p.ndim != 2 or p.shape != q.shape:
        raise ValueError(f"frames must be equal-sized grayscale images, got {p.shape} and {q.shape}")
    _, taps = _gauss_taps(params.win_size, params.win_sigma)
    taps = taps / taps.sum()
    pyr1 = _pyramid(p, params.levels, params.scale)
    pyr2 = _pyramid(q, params.levels, params.scale)

    flow = None
    for lvl in reversed(range(params.levels)):
        f1, f2 = pyr1[lvl], pyr2[lvl]
        h, w = f1.shape
        if flow is None:
            flow = np.zeros((h, w, 2))
        else:
            ph, pw = flow.shape[:2]
            flow = resize_image(flow, (h, w))
            flow[..., 0] *= w / pw
            flow[..., 1] *= h / ph
        A1, b1, _ = polynomial_expansion(f1, params.poly_n, params.poly_sigma)
        A2, b2, _ = polynomial_expansion(f2, params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            flow = _refine((A1, b1), (A2, b2), flow, params, taps)
    return FlowField(flow.astype(np.float32))


def normalize_flow(flow, divisor=20.0):
    """Scale flow by ``1/divisor``, clamp to [-1, 1], return a [2, H, W] Tensor."""
    if divisor <= 0:
        raise ValueError("divisor must be positive")
    data = np.clip(flow.data / np.float32(divisor), -1.0, 1.0)
    return Tensor(data.transpose(2, 0, 1))


def write_flo(flow, path):
    data = np.ascontiguousarray(flow.data, dtype="<f4")
    if not np.isfinite(data).all():
        raise ValueError("refusing to write non-finite flow")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(data.tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: not a .flo file (magic {blob[:4]!r})")
    w, h = struct.unpack("<II", blob[4:12])
    need = 12 + 8 * w * h
    if len(blob) < need:
        raise FlowFormatError(f"{path}: truncated payload ({len(blob)} of {need} bytes)")
    data = np.frombuffer(blob, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(data.astype(np.float32))
