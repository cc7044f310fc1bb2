"""Sticker bending, pitch rotation, placement and template alignment.

The flat sticker lives in normalized units: x in [-1, 1] across its width and
y in [-aspect, aspect] down its height. Bending wraps it around the parabolic
cylinder z = a*x**2 while keeping arc length, pitch rotates the bent surface
about its horizontal midline, and the result is projected orthographically
onto the face image. Every stage is realized as an inverse sampling grid, so
rendering is two bilinear lookups and a masked composite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .image import SamplingGrid, _corners, bilinear_sample, composite, scatter_terms

FACE_SIZE = 600
TEMPLATE_SIZE = 112


@dataclass(frozen=True)
class StickerSpec:
    tex_height: int = 400
    tex_width: int = 900
    half_width: float = 1.0

    def __post_init__(self):
        if not self.tex_width > self.tex_height > 0:
            raise ValueError("sticker must be wider than tall")

    @property
    def aspect(self) -> float:
        """Normalized half-height."""
        return self.half_width * self.tex_height / self.tex_width

    def to_texel(self, x, y):
        col = (np.asarray(x) / self.half_width + 1.0) * self.tex_width / 2.0 - 0.5
        row = (np.asarray(y) / self.aspect + 1.0) * self.tex_height / 2.0 - 0.5
        return col, row

    def from_texel(self, col, row):
        x = ((np.asarray(col) + 0.5) * 2.0 / self.tex_width - 1.0) * self.half_width
        y = ((np.asarray(row) + 0.5) * 2.0 / self.tex_height - 1.0) * self.aspect
        return x, y


@dataclass(frozen=True)
class BendPitchParams:
    """One draw of the transformation parameters.

    ``a`` is the parabola rate in normalized sticker units, ``phi`` the pitch
    angle. Placement maps the projected sticker plane into face pixels;
    the template affine maps face pixels to template pixels about the two
    image centers.
    """

    a: float = 0.4
    phi: float = math.radians(20.0)
    place_scale: float = 150.0
    place_theta: float = 0.0
    place_tx: float = 299.5
    place_ty: float = 130.0
    tmpl_scale: float = TEMPLATE_SIZE / FACE_SIZE
    tmpl_theta: float = 0.0
    tmpl_tx: float = 0.0
    tmpl_ty: float = 0.0

    def __post_init__(self):
        if not self.a >= 0:
            raise ValueError(f"parabola rate must be >= 0, got {self.a}")
        if not abs(self.phi) < math.pi / 2:
            raise ValueError(f"|phi| must be < pi/2, got {self.phi}")
        if not (self.place_scale > 0 and self.tmpl_scale > 0):
            raise ValueError("scales must be positive")

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.names()], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "BendPitchParams":
        return cls(**{n: float(v) for n, v in zip(cls.names(), values)})

    def with_(self, **kw) -> "BendPitchParams":
        return replace(self, **kw)


def arclen(a: float, t):
    """Signed arc length of z = a*x**2 from 0 to t."""
    t = np.asarray(t, dtype=np.float64)
    if a == 0:
        return t.copy() if t.ndim else float(t)
    at = np.abs(t)
    s = 0.5 * at * np.sqrt(1.0 + 4.0 * a * a * at * at) + np.arcsinh(2.0 * a * at) / (4.0 * a)
    s = np.sign(t) * s
    return s if s.ndim else float(s)


def arclen_inverse(a: float, s, tol: float = 1e-14, max_iter: int = 100):
    """Coordinate whose arc length from the vertex is ``s``.

    arclen is odd and convex on t >= 0 with slope >= 1, so Newton started at
    the upper end of the bracket [0, |s|] decreases monotonically onto the
    root without leaving the bracket.
    """
    s = np.asarray(s, dtype=np.float64)
    if a == 0:
        return s.copy() if s.ndim else float(s)
    target = np.abs(s)
    t = target.copy()
    for _ in range(max_iter):
        f = arclen(a, t) - target
        step = f / np.sqrt(1.0 + 4.0 * a * a * t * t)
        t = np.clip(t - step, 0.0, target)
        if np.all(np.abs(step) <= tol * np.maximum(1.0, target)):
            break
    out = np.sign(s) * t
    return out if out.ndim else float(out)


def _placement_coords(spec: StickerSpec, p: BendPitchParams, fx: np.ndarray, fy: np.ndarray):
    """Face pixel coordinates -> normalized sticker coordinates (x, y)."""
    dx = fx - p.place_tx
    dy = fy - p.place_ty
    c, s = math.cos(p.place_theta), math.sin(p.place_theta)
    u = (c * dx + s * dy) / p.place_scale
    v = (-s * dx + c * dy) / p.place_scale
    x = arclen(p.a, u)
    depth = p.a * u * u
    y = (v + depth * math.sin(p.phi)) / math.cos(p.phi)
    return x, y


def forward_place(spec: StickerSpec, p: BendPitchParams, x, y):
    """Normalized sticker point -> face pixel coordinates (bend, pitch, place)."""
    u = arclen_inverse(p.a, x)
    depth = p.a * np.asarray(u) ** 2
    v = np.asarray(y) * math.cos(p.phi) - depth * math.sin(p.phi)
    c, s = math.cos(p.place_theta), math.sin(p.place_theta)
    fx = p.place_tx + p.place_scale * (c * u - s * v)
    fy = p.place_ty + p.place_scale * (s * u + c * v)
    return fx, fy


def _grid_from_face_coords(spec, p, fx, fy) -> SamplingGrid:
    x, y = _placement_coords(spec, p, fx, fy)
    mask = (np.abs(x) <= spec.half_width) & (np.abs(y) <= spec.aspect)
    col, row = spec.to_texel(x, y)
    return SamplingGrid(np.where(mask, col, 0.0), np.where(mask, row, 0.0), mask)


def build_placement_grid(spec: StickerSpec, p: BendPitchParams, face_h: int, face_w: int) -> SamplingGrid:
    """Inverse grid from face pixels into sticker texels, masked to the footprint."""
    fy, fx = np.mgrid[0:face_h, 0:face_w].astype(np.float64)
    return _grid_from_face_coords(spec, p, fx, fy)


def footprint_bbox(spec: StickerSpec, p: BendPitchParams, face_h: int, face_w: int, pad: int = 2):
    """Conservative face-pixel bounding box ``(r0, r1, c0, c1)`` of the sticker footprint."""
    umax = arclen_inverse(p.a, spec.half_width)
    dmax = p.a * umax * umax * math.sin(p.phi)
    vext = spec.aspect * math.cos(p.phi)
    vlo, vhi = -vext - max(dmax, 0.0), vext + max(-dmax, 0.0)
    us = np.array([-umax, umax, -umax, umax])
    vs = np.array([vlo, vlo, vhi, vhi])
    c, s = math.cos(p.place_theta), math.sin(p.place_theta)
    fx = p.place_tx + p.place_scale * (c * us - s * vs)
    fy = p.place_ty + p.place_scale * (s * us + c * vs)
    r0 = max(int(math.floor(fy.min())) - pad, 0)
    r1 = min(int(math.ceil(fy.max())) + pad + 1, face_h)
    c0 = max(int(math.floor(fx.min())) - pad, 0)
    c1 = min(int(math.ceil(fx.max())) + pad + 1, face_w)
    return r0, max(r1, r0), c0, max(c1, c0)


def build_template_grid(p: BendPitchParams, face_h: int, face_w: int,
                        tmpl_h: int = TEMPLATE_SIZE, tmpl_w: int = TEMPLATE_SIZE) -> SamplingGrid:
    """Inverse of ``T = s*R(theta)*(F - c_face) + c_tmpl + t`` on every template pixel."""
    ty, tx = np.mgrid[0:tmpl_h, 0:tmpl_w].astype(np.float64)
    dx = tx - (tmpl_w - 1) / 2.0 - p.tmpl_tx
    dy = ty - (tmpl_h - 1) / 2.0 - p.tmpl_ty
    c, s = math.cos(p.tmpl_theta), math.sin(p.tmpl_theta)
    fx = (c * dx + s * dy) / p.tmpl_scale + (face_w - 1) / 2.0
    fy = (-s * dx + c * dy) / p.tmpl_scale + (face_h - 1) / 2.0
    return SamplingGrid(fx, fy, np.ones((tmpl_h, tmpl_w), dtype=bool))


def template_forward(p: BendPitchParams, face_h: int, face_w: int, fx, fy,
                     tmpl_h: int = TEMPLATE_SIZE, tmpl_w: int = TEMPLATE_SIZE):
    dx = np.asarray(fx) - (face_w - 1) / 2.0
    dy = np.asarray(fy) - (face_h - 1) / 2.0
    c, s = math.cos(p.tmpl_theta), math.sin(p.tmpl_theta)
    tx = p.tmpl_scale * (c * dx - s * dy) + (tmpl_w - 1) / 2.0 + p.tmpl_tx
    ty = p.tmpl_scale * (s * dx + c * dy) + (tmpl_h - 1) / 2.0 + p.tmpl_ty
    return tx, ty


def to_template(face: np.ndarray, p: BendPitchParams, tmpl_size: int = TEMPLATE_SIZE) -> np.ndarray:
    """Warp a face image to the recognition template (no sticker)."""
    return bilinear_sample(face, build_template_grid(p, face.shape[0], face.shape[1], tmpl_size, tmpl_size))


class RenderPlan:
    """Grids for one parameter draw, reusable for the forward pass and its VJP.

    The composite is defined at face resolution, but only the face pixels
    that the template warp actually reads are evaluated: the template
    output is identical to compositing the whole face first
    (:meth:`composite_face`) and warping afterwards.
    """

    def __init__(self, spec: StickerSpec, p: BendPitchParams, face_h: int, face_w: int,
                 tmpl_size: int = TEMPLATE_SIZE):
        self.spec = spec
        self.params = p
        self.face_shape = (face_h, face_w)
        self.tmpl_size = tmpl_size
        self.bbox = footprint_bbox(spec, p, face_h, face_w)
        self.tmpl_grid = build_template_grid(p, face_h, face_w, tmpl_size, tmpl_size)

        x0, x1, fx, _ = _corners(face_w, self.tmpl_grid.src_x.ravel())
        y0, y1, fy, _ = _corners(face_h, self.tmpl_grid.src_y.ravel())
        # four face taps per template pixel, flattened tap-major within each pixel
        self._taps = np.stack([y0 * face_w + x0, y0 * face_w + x1,
                               y1 * face_w + x0, y1 * face_w + x1], axis=1).ravel()
        self._fx = fx[:, None]
        self._fy = fy[:, None]
        self._weights = np.stack([(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy),
                                  (1.0 - fx) * fy, fx * fy], axis=1)

        rows, cols = np.divmod(self._taps, face_w)
        r0, r1, c0, c1 = self.bbox
        cand = np.flatnonzero((rows >= r0) & (rows < r1) & (cols >= c0) & (cols < c1))
        grid = _grid_from_face_coords(spec, p, cols[cand][None, :].astype(np.float64),
                                      rows[cand][None, :].astype(np.float64))
        keep = grid.mask[0]
        # taps that land on the sticker read the composite's sticker value
        self._covered = cand[keep]
        self._sticker_grid = SamplingGrid(grid.src_x[:, keep], grid.src_y[:, keep], grid.mask[:, keep])

    def full_mask(self) -> np.ndarray:
        """Sticker footprint over the whole face image."""
        r0, r1, c0, c1 = self.bbox
        fy, fx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
        m = np.zeros(self.face_shape, dtype=bool)
        m[r0:r1, c0:c1] = _grid_from_face_coords(self.spec, self.params, fx, fy).mask
        return m

    def _check(self, sticker, face):
        if sticker.shape[:2] != (self.spec.tex_height, self.spec.tex_width):
            raise ValueError(f"sticker shape {sticker.shape} does not match {self.spec}")
        if face.shape[:2] != self.face_shape or face.shape[2] != sticker.shape[2]:
            raise ValueError(f"face shape {face.shape} does not match plan {self.face_shape}")

    def composite_face(self, sticker: np.ndarray, face: np.ndarray) -> np.ndarray:
        """Full-resolution face with the sticker composited in."""
        self._check(sticker, face)
        r0, r1, c0, c1 = self.bbox
        fy, fx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
        grid = _grid_from_face_coords(self.spec, self.params, fx, fy)
        out = face.copy()
        out[r0:r1, c0:c1] = composite(face[r0:r1, c0:c1], bilinear_sample(sticker, grid), grid.mask)
        return out

    def forward(self, sticker: np.ndarray, face: np.ndarray) -> np.ndarray:
        self._check(sticker, face)
        c = face.shape[2]
        vals = face.reshape(-1, c).take(self._taps, axis=0)
        vals[self._covered] = bilinear_sample(sticker, self._sticker_grid)[0]
        vals = vals.reshape(-1, 4, c)
        fx, fy = self._fx, self._fy
        top = vals[:, 0] * (1.0 - fx) + vals[:, 1] * fx
        bot = vals[:, 2] * (1.0 - fx) + vals[:, 3] * fx
        return (top * (1.0 - fy) + bot * fy).reshape(self.tmpl_size, self.tmpl_size, c)

    def vjp_terms(self, cotangent: np.ndarray):
        """Sticker scatter ``(flat_index, weight)`` for a template-shaped cotangent."""
        c = cotangent.shape[2]
        per_tap = (cotangent.reshape(-1, 1, c) * self._weights[:, :, None]).reshape(-1, c)
        shape = (self.spec.tex_height, self.spec.tex_width, c)
        return scatter_terms(shape, self._sticker_grid, per_tap[self._covered][None])

    def vjp(self, cotangent: np.ndarray) -> np.ndarray:
        """Template-shaped cotangent -> sticker-shaped cotangent."""
        c = cotangent.shape[2]
        idx, wts = self.vjp_terms(cotangent)
        size = self.spec.tex_height * self.spec.tex_width * c
        return np.bincount(idx, weights=wts, minlength=size).reshape(self.spec.tex_height, self.spec.tex_width, c)


def render(sticker: np.ndarray, face: np.ndarray, p: BendPitchParams,
           spec: StickerSpec | None = None, tmpl_size: int = TEMPLATE_SIZE) -> np.ndarray:
    """Sticker + face -> aligned template image."""
    if spec is None:
        spec = StickerSpec(sticker.shape[0], sticker.shape[1])
    return RenderPlan(spec, p, face.shape[0], face.shape[1], tmpl_size).forward(sticker, face)


def render_vjp(sticker: np.ndarray, face: np.ndarray, p: BendPitchParams, cotangent: np.ndarray,
               spec: StickerSpec | None = None) -> np.ndarray:
    if spec is None:
        spec = StickerSpec(sticker.shape[0], sticker.shape[1])
    plan = RenderPlan(spec, p, face.shape[0], face.shape[1], cotangent.shape[0])
    return plan.vjp(cotangent)
