"""Image containers, PPM I/O and the differentiable bilinear sampler.

Images are plain ``float64`` numpy arrays of shape ``(H, W, C)`` with
intensities in [0, 1]. Pixel centers sit at integer coordinates with
``(0, 0)`` at the top-left pixel, x to the right and y downward.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np


class PPMError(ValueError):
    """Base class for PPM parse failures."""


class PPMHeaderError(PPMError):
    pass


class PPMMaxvalError(PPMError):
    pass


class PPMTruncatedError(PPMError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    m = _TOKEN.match(buf, pos)
    if m is None:
        raise PPMHeaderError("unexpected end of PPM header")
    return m.group(1), m.end()


def load_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P6 PPM (maxval 255) into an ``(H, W, 3)`` array of byte/255."""
    with open(path, "rb") as fh:
        buf = fh.read()

    magic, pos = _header_token(buf, 0)
    if magic != b"P6":
        raise PPMHeaderError(f"not a P6 file (magic {magic!r})")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _header_token(buf, pos)
        if not tok.isdigit():
            raise PPMHeaderError(f"bad {name} token {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PPMHeaderError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise PPMMaxvalError(f"unsupported maxval {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMHeaderError("missing whitespace after maxval")
    pos += 1

    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise PPMTruncatedError(f"expected {need} payload bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return data.astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-half-up to bytes, clamped to [0, 255]."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_ppm(img: np.ndarray, path: str | os.PathLike) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"save_ppm needs an (H, W, 3) image, got shape {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(quantize(img).tobytes())


def clip01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


@dataclass
class SamplingGrid:
    """Source coordinates (in source pixel units) for every output pixel."""

    src_x: np.ndarray
    src_y: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not (self.src_x.shape == self.src_y.shape == self.mask.shape) or self.src_x.ndim != 2:
            raise ValueError("grid arrays must share one 2-D shape")

    @property
    def out_height(self) -> int:
        return self.src_x.shape[0]

    @property
    def out_width(self) -> int:
        return self.src_x.shape[1]

    @classmethod
    def identity(cls, height: int, width: int) -> "SamplingGrid":
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        return cls(xs, ys, np.ones((height, width), dtype=bool))


def _corners(n: int, coord: np.ndarray):
    """Clamp to [0, n-1] and return (lower index, upper index, frac, inside)."""
    c = np.clip(coord, 0.0, n - 1)
    inside = (coord > 0.0) & (coord < n - 1)
    i0 = np.minimum(np.floor(c).astype(np.intp), max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, c - i0, inside


def _check_grid(grid: SamplingGrid):
    sel = grid.mask
    if np.isnan(grid.src_x[sel]).any() or np.isnan(grid.src_y[sel]).any():
        raise ValueError("NaN coordinate in sampling grid")


def bilinear_sample(src: np.ndarray, grid: SamplingGrid) -> np.ndarray:
    """Bilinear lookup of ``src`` at the grid coordinates; masked-out pixels are 0."""
    _check_grid(grid)
    h, w, c = src.shape
    out = np.zeros((grid.out_height, grid.out_width, c))
    sel = grid.mask
    x0, x1, fx, _ = _corners(w, grid.src_x[sel])
    y0, y1, fy, _ = _corners(h, grid.src_y[sel])
    flat = src.reshape(-1, c)
    fx = fx[:, None]
    fy = fy[:, None]
    top = flat.take(y0 * w + x0, axis=0) * (1.0 - fx) + flat.take(y0 * w + x1, axis=0) * fx
    bot = flat.take(y1 * w + x0, axis=0) * (1.0 - fx) + flat.take(y1 * w + x1, axis=0) * fx
    out[sel] = top * (1.0 - fy) + bot * fy
    return out


def scatter_terms(src_shape, grid: SamplingGrid, cotangent: np.ndarray):
    """Flat source indices and weights whose ``bincount`` is the source cotangent.

    Exposed so several pullbacks can be summed with one fixed-order bincount.
    ``cotangent`` is output-shaped.
    """
    h, w, c = src_shape
    sel = grid.mask
    x0, x1, fx, _ = _corners(w, grid.src_x[sel])
    y0, y1, fy, _ = _corners(h, grid.src_y[sel])
    g = cotangent[sel]
    chan = np.arange(c)
    gx, hx = (1.0 - fx)[:, None], fx[:, None]
    gy, hy = (1.0 - fy)[:, None], fy[:, None]
    idx = np.concatenate([
        ((y0 * w + x0)[:, None] * c + chan).ravel(),
        ((y0 * w + x1)[:, None] * c + chan).ravel(),
        ((y1 * w + x0)[:, None] * c + chan).ravel(),
        ((y1 * w + x1)[:, None] * c + chan).ravel(),
    ])
    wts = np.concatenate([(g * (gx * gy)).ravel(), (g * (hx * gy)).ravel(),
                          (g * (gx * hy)).ravel(), (g * (hx * hy)).ravel()])
    return idx, wts


def bilinear_sample_vjp(src_shape, grid: SamplingGrid, cotangent: np.ndarray, src: np.ndarray | None = None):
    """Pull an output cotangent back through :func:`bilinear_sample`.

    Returns ``(d_src, d_src_x, d_src_y)``. The coordinate cotangents need the
    source values and are ``None`` when ``src`` is not given. Coordinates that
    were clamped get zero coordinate gradient.
    """
    h, w, c = src_shape
    idx, wts = scatter_terms(src_shape, grid, cotangent)
    d_src = np.bincount(idx, weights=wts, minlength=h * w * c).reshape(h, w, c)
    if src is None:
        return d_src, None, None

    sel = grid.mask
    x0, x1, fx, in_x = _corners(w, grid.src_x[sel])
    y0, y1, fy, in_y = _corners(h, grid.src_y[sel])
    g = cotangent[sel]
    gx, hx = (1.0 - fx)[:, None], fx[:, None]
    gy, hy = (1.0 - fy)[:, None], fy[:, None]
    v00, v01, v10, v11 = src[y0, x0], src[y0, x1], src[y1, x0], src[y1, x1]
    dfx = ((v01 - v00) * gy + (v11 - v10) * hy) * g
    dfy = ((v10 - v00) * gx + (v11 - v01) * hx) * g
    d_x = np.zeros(grid.src_x.shape)
    d_y = np.zeros(grid.src_y.shape)
    d_x[sel] = np.where(in_x, dfx.sum(axis=1), 0.0)
    d_y[sel] = np.where(in_y, dfy.sum(axis=1), 0.0)
    return d_src, d_x, d_y


def composite(base: np.ndarray, overlay: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Overlay pixels where ``mask`` is true, base pixels elsewhere."""
    if base.shape != overlay.shape or base.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch: base {base.shape}, overlay {overlay.shape}, mask {mask.shape}")
    return np.where(mask[..., None], overlay, base)


def composite_vjp(mask: np.ndarray, cotangent: np.ndarray):
    """Return ``(d_base, d_overlay)``."""
    m = mask[..., None]
    return np.where(m, 0.0, cotangent), np.where(m, cotangent, 0.0)


def smooth_texture(rng: np.random.Generator, size: int, coarse: int = 6,
                   lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    """Random ``coarse x coarse`` color lattice, bilinearly upsampled to ``size x size``."""
    lattice = lo + (hi - lo) * rng.random((coarse, coarse, 3))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) * (coarse - 1) / (size - 1)
    return bilinear_sample(lattice, SamplingGrid(xs, ys, np.ones((size, size), dtype=bool)))
