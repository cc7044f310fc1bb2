"""Central finite-difference checks for every hand-written VJP.

Each check contracts an operation's output with a random cotangent ``c``,
giving a scalar ``f(x) = <c, F(x)>``, and compares the VJP-derived gradient
with ``(f(x + h e_i) - f(x - h e_i)) / 2h`` on a set of probed inputs.
The error reported is ``|grad - fd| / max(|grad|, |fd|)`` over the probe
vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import attack, embedder, geometry, image

STEP = 1e-6
SAMPLER_TOL = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    probes: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    f = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(f))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - f) / scale)


def central_difference(f, x: np.ndarray, index, h: float = STEP) -> float:
    xp = x.copy()
    xp[index] += h
    xm = x.copy()
    xm[index] -= h
    return (f(xp) - f(xm)) / (2.0 * h)


def _off_integer(rng, lo, hi, n):
    """Uniform coordinates in (lo, hi) kept 0.05 away from integers (bilinear kinks)."""
    v = rng.uniform(lo, hi, n)
    frac = v - np.floor(v)
    return np.floor(v) + np.clip(frac, 0.05, 0.95)


def check_bilinear(rng) -> CheckResult:
    h, w = rng.integers(4, 9, size=2)
    src = rng.random((h, w, 3))
    gx = _off_integer(rng, 0.0, w - 1.0, h * w).reshape(h, w)
    gy = _off_integer(rng, 0.0, h - 1.0, h * w).reshape(h, w)
    mask = rng.random((h, w)) < 0.8
    cot = rng.standard_normal((h, w, 3))

    def f(s, x=gx, y=gy):
        return float(np.sum(cot * image.bilinear_sample(s, image.SamplingGrid(x, y, mask))))

    d_src, d_x, d_y = image.bilinear_sample_vjp(src.shape, image.SamplingGrid(gx, gy, mask), cot, src)
    ana, num = [], []
    for idx in np.ndindex(src.shape):
        ana.append(d_src[idx])
        num.append(central_difference(f, src, idx))
    for idx in zip(*np.nonzero(mask)):
        ana.append(d_x[idx])
        num.append(central_difference(lambda x: f(src, x, gy), gx, idx))
        ana.append(d_y[idx])
        num.append(central_difference(lambda y: f(src, gx, y), gy, idx))
    return CheckResult("bilinear_sample", relative_error(ana, num), SAMPLER_TOL, len(ana))


def check_composite(rng) -> CheckResult:
    base, over = rng.random((5, 6, 3)), rng.random((5, 6, 3))
    mask = rng.random((5, 6)) < 0.5
    cot = rng.standard_normal((5, 6, 3))
    d_base, d_over = image.composite_vjp(mask, cot)
    ana = np.concatenate([d_base.ravel(), d_over.ravel()])
    num = [central_difference(lambda b: float(np.sum(cot * image.composite(b, over, mask))), base, i)
           for i in np.ndindex(base.shape)]
    num += [central_difference(lambda o: float(np.sum(cot * image.composite(base, o, mask))), over, i)
            for i in np.ndindex(over.shape)]
    return CheckResult("composite", relative_error(ana, num), DEFAULT_TOL, len(ana))


def reduced_setup(scale: str = "reduced"):
    """Sticker spec, face size and base params for the render-chain checks."""
    if scale == "full":
        return geometry.StickerSpec(), 600, geometry.BendPitchParams()
    face = 60
    k = face / 600
    p = geometry.BendPitchParams(place_scale=150 * k, place_tx=(face - 1) / 2, place_ty=130 * k,
                                 tmpl_scale=geometry.TEMPLATE_SIZE / face)
    return geometry.StickerSpec(20, 45), face, p


def _probe_indices(rng, grad: np.ndarray, n: int):
    """Half the probes where the gradient is nonzero, the rest anywhere."""
    flat_nz = np.flatnonzero(grad)
    k = min(n // 2, len(flat_nz))
    picks = list(rng.choice(flat_nz, k, replace=False)) if k else []
    picks += list(rng.choice(grad.size, n - k, replace=False))
    return [np.unravel_index(i, grad.shape) for i in picks]


def check_render(rng, scale: str = "reduced", n_probes: int = 40) -> CheckResult:
    spec, face_n, p = reduced_setup(scale)
    sticker = rng.random((spec.tex_height, spec.tex_width, 3))
    face = rng.random((face_n, face_n, 3))
    plan = geometry.RenderPlan(spec, p, face_n, face_n)
    cot = rng.standard_normal((geometry.TEMPLATE_SIZE, geometry.TEMPLATE_SIZE, 3))
    grad = plan.vjp(cot)

    def f(s):
        return float(np.sum(cot * geometry.render(s, face, p, spec)))

    probes = _probe_indices(rng, grad, n_probes)
    num = [central_difference(f, sticker, i) for i in probes]
    ana = [grad[i] for i in probes]
    return CheckResult("render", relative_error(ana, num), DEFAULT_TOL, len(probes))


def check_tv(rng) -> CheckResult:
    img = rng.random((8, 8, 3))
    g = attack.tv_grad(img)
    num = [central_difference(attack.tv_loss, img, i) for i in np.ndindex(img.shape)]
    return CheckResult("tv_loss", relative_error(g.ravel(), num), DEFAULT_TOL, img.size)


def check_cosine(rng) -> CheckResult:
    u, v = rng.standard_normal(64), rng.standard_normal(64)
    g = embedder.cosine_sim_grad(u, v)
    num = [central_difference(lambda x: embedder.cosine_sim(x, v), u, i) for i in range(64)]
    return CheckResult("cosine_sim", relative_error(g, num), DEFAULT_TOL, 64)


def _relu_pattern(e, img):
    if not isinstance(e, embedder.ToyCNN):
        return None
    return np.concatenate([(pre > 0).ravel() for pre in e.preactivations(img[None])])


def check_embedder(rng, kind: str, n_probes: int = 20) -> CheckResult:
    e = embedder.init_embedder(embedder.EmbedderConfig(kind, 7))
    img = rng.random(e.config.input_shape)
    cot = rng.standard_normal(e.config.dim)
    g = e.vjp(img, cot)
    base_pattern = _relu_pattern(e, img)
    ana, num, skipped = [], [], 0
    while len(ana) < n_probes:
        i = tuple(rng.integers(0, e.config.input_shape))
        if base_pattern is not None:
            # a probe whose +-h perturbation flips any rectifier sits within h of a kink
            xp, xm = img.copy(), img.copy()
            xp[i] += STEP
            xm[i] -= STEP
            if not (np.array_equal(_relu_pattern(e, xp), base_pattern)
                    and np.array_equal(_relu_pattern(e, xm), base_pattern)):
                skipped += 1
                continue
        ana.append(g[i])
        num.append(central_difference(lambda x: float(cot @ e(x)), img, i))
    return CheckResult(f"embedder:{kind}", relative_error(ana, num), DEFAULT_TOL, n_probes, skipped)


def check_total_loss(rng, scale: str = "reduced", n_probes: int = 20, lam: float = 1e-2) -> CheckResult:
    spec, face_n, p = reduced_setup(scale)
    e = embedder.init_embedder(embedder.EmbedderConfig("toy_cnn", 7))
    sticker = rng.random((spec.tex_height, spec.tex_width, 3))
    face = rng.random((face_n, face_n, 3))
    anchor = rng.standard_normal(e.config.dim)
    grad = attack.total_loss_grad(sticker, face, p, anchor, lam, e, spec)

    def f(s):
        return attack.total_loss(s, face, p, anchor, lam, e, spec)[0]

    probes = _probe_indices(rng, grad, n_probes)
    num = [central_difference(f, sticker, i) for i in probes]
    ana = [grad[i] for i in probes]
    return CheckResult("total_loss", relative_error(ana, num), DEFAULT_TOL, len(probes))


def run_all(scale: str = "reduced", seed: int = 0) -> list[CheckResult]:
    if scale not in ("reduced", "full"):
        raise ValueError(f"scale must be 'reduced' or 'full', got {scale!r}")
    rng = np.random.default_rng(seed)
    return [
        check_bilinear(rng),
        check_composite(rng),
        check_render(rng, scale),
        check_tv(rng),
        check_cosine(rng),
        check_embedder(rng, "linear"),
        check_embedder(rng, "toy_cnn"),
        check_total_loss(rng, scale),
    ]


def format_results(results) -> str:
    lines = [f"{'component':<18} {'max_rel_err':>12} {'tol':>8}  probes  status"]
    for r in results:
        err = "nan" if math.isnan(r.error) else f"{r.error:.3e}"
        lines.append(f"{r.name:<18} {err:>12} {r.tolerance:>8.0e}  {r.probes:>6}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
