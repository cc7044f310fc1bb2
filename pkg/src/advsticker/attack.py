"""EOT sticker attack: TV loss, jitter sampling and the two-stage momentum sign loop."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .embedder import Embedder, cosine_sim, cosine_sim_grad
from .geometry import TEMPLATE_SIZE, BendPitchParams, RenderPlan, StickerSpec

log = logging.getLogger(__name__)

TV_EPS2 = 1e-16
LOG_COLUMNS = ("iter", "stage", "loss_sim", "loss_tv", "loss_total", "val_sim")


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


@numba.njit(cache=True)
def _tv_kernel(x, eps2, want_grad):
    h, w, c = x.shape
    g = np.zeros_like(x) if want_grad else np.zeros((1, 1, 1))
    loss = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(c):
                dh = x[i, j, k] - x[i + 1, j, k] if i + 1 < h else 0.0
                dw = x[i, j, k] - x[i, j + 1, k] if j + 1 < w else 0.0
                r2 = dh * dh + dw * dw
                loss += np.sqrt(r2)
                if want_grad:
                    r = np.sqrt(r2 + eps2)
                    gh = dh / r
                    gw = dw / r
                    g[i, j, k] += gh + gw
                    if i + 1 < h:
                        g[i + 1, j, k] -= gh
                    if j + 1 < w:
                        g[i, j + 1, k] -= gw
    return loss, g


def tv_loss(img: np.ndarray) -> float:
    """Isotropic total variation summed over pixels and channels.

    Forward differences that would leave the image count as zero.
    """
    return float(_tv_kernel(np.ascontiguousarray(_as_hwc(img)), TV_EPS2, False)[0])


def tv_loss_and_grad(img: np.ndarray):
    """TV value and its subgradient, each radicand regularized by ``TV_EPS2``."""
    loss, g = _tv_kernel(np.ascontiguousarray(_as_hwc(img)), TV_EPS2, True)
    return float(loss), g.reshape(np.shape(img))


def tv_grad(img: np.ndarray) -> np.ndarray:
    return tv_loss_and_grad(img)[1]


# --- jitter -------------------------------------------------------------------

def default_half_ranges(base: BendPitchParams) -> dict[str, float]:
    return {
        "a": 0.1 * base.a,
        "phi": math.radians(3.0),
        "place_scale": 0.02 * base.place_scale,
        "place_theta": math.radians(2.0),
        "place_tx": 2.0,
        "place_ty": 2.0,
        "tmpl_scale": 0.01 * base.tmpl_scale,
        "tmpl_theta": math.radians(1.0),
        "tmpl_tx": 1.0,
        "tmpl_ty": 1.0,
    }


@dataclass(frozen=True)
class JitterSpec:
    """Uniform jitter ``base +- half`` per transformation parameter."""

    base: BendPitchParams = field(default_factory=BendPitchParams)
    half: dict = None
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.half is None:
            object.__setattr__(self, "half", default_half_ranges(self.base))
        unknown = set(self.half) - set(BendPitchParams.names())
        if unknown:
            raise ValueError(f"unknown jitter parameters {sorted(unknown)}")
        if any(v < 0 for v in self.half.values()):
            raise ValueError("jitter half-ranges must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("place_scale", "tmpl_scale"):
            if self.half.get(name, 0.0) >= getattr(self.base, name):
                raise ValueError(f"{name} jitter would allow non-positive scale")

    @classmethod
    def none(cls, base: BendPitchParams | None = None, seed: int = 0) -> "JitterSpec":
        base = base or BendPitchParams()
        return cls(base, {n: 0.0 for n in BendPitchParams.names()}, 1, seed)

    def half_array(self) -> np.ndarray:
        return np.array([self.half.get(n, 0.0) for n in BendPitchParams.names()])


def jitter_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, 1], dtype=np.uint64), counter=0))


_PHI_LIMIT = math.pi / 2 - 1e-6


def sample_jitter(spec: JitterSpec, rng: np.random.Generator) -> list[BendPitchParams]:
    """One EOT batch; advances ``rng``."""
    names = BendPitchParams.names()
    u = rng.random((spec.batch_size, len(names)))
    vals = spec.base.as_array() + spec.half_array() * (2.0 * u - 1.0)
    vals[:, names.index("a")] = np.maximum(vals[:, names.index("a")], 0.0)
    k = names.index("phi")
    vals[:, k] = np.clip(vals[:, k], -_PHI_LIMIT, _PHI_LIMIT)
    return [BendPitchParams.from_array(row) for row in vals]


# --- losses -------------------------------------------------------------------

class AttackProblem:
    """Everything fixed during one attack: face, embedder, anchor and sizes."""

    def __init__(self, face: np.ndarray, embedder: Embedder, anchor: np.ndarray,
                 sticker_spec: StickerSpec | None = None, base: BendPitchParams | None = None,
                 tmpl_size: int = TEMPLATE_SIZE, threads: int = 0):
        self.face = np.asarray(face, dtype=np.float64)
        self.embedder = embedder
        self.anchor = np.asarray(anchor, dtype=np.float64)
        self.sticker_spec = sticker_spec or StickerSpec()
        self.base = base or BendPitchParams()
        self.tmpl_size = tmpl_size
        # 0 or 1 means serial; draws keep their order either way, so results do not depend on it
        self.threads = int(threads)
        if self.threads < 0:
            raise ValueError("threads must be >= 0")
        if not np.any(self.anchor):
            raise ValueError("anchor embedding is the zero vector")
        self._val_plan = self.plan(self.base)

    def plan(self, p: BendPitchParams) -> RenderPlan:
        h, w = self.face.shape[:2]
        return RenderPlan(self.sticker_spec, p, h, w, self.tmpl_size)

    def similarities(self, sticker: np.ndarray, params: list[BendPitchParams], with_grad: bool = True):
        """Per-draw cosine similarities and the draw-averaged sticker gradient."""
        def prepare(p):
            pl = self.plan(p)
            return pl, pl.forward(sticker, self.face)

        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                prepared = list(pool.map(prepare, params))
        else:
            prepared = [prepare(p) for p in params]
        plans = [pl for pl, _ in prepared]
        batch = np.stack([t for _, t in prepared])
        emb, pullback = self.embedder.forward(batch)
        sims = np.array([cosine_sim(e, self.anchor) for e in emb])
        if not with_grad:
            return sims, None
        cot = pullback(np.stack([cosine_sim_grad(e, self.anchor) for e in emb]))
        terms = [pl.vjp_terms(c) for pl, c in zip(plans, cot)]
        idx = np.concatenate([t[0] for t in terms])
        wts = np.concatenate([t[1] for t in terms])
        grad = np.bincount(idx, weights=wts, minlength=sticker.size).reshape(sticker.shape)
        return sims, grad / len(plans)

    def validation_sim(self, sticker: np.ndarray) -> float:
        tmpl = self._val_plan.forward(sticker, self.face)
        return cosine_sim(self.embedder(tmpl), self.anchor)


def total_loss(sticker, face, params: BendPitchParams, anchor, lam: float, embedder: Embedder,
               sticker_spec: StickerSpec | None = None):
    """``cos(embed(render), anchor) + lam * TV(sticker)`` with its breakdown."""
    problem = AttackProblem(face, embedder, anchor, sticker_spec, params)
    sim = problem.validation_sim(sticker)
    tv = tv_loss(sticker)
    return sim + lam * tv, {"sim": sim, "tv": tv}


def total_loss_grad(sticker, face, params: BendPitchParams, anchor, lam: float, embedder: Embedder,
                    sticker_spec: StickerSpec | None = None) -> np.ndarray:
    problem = AttackProblem(face, embedder, anchor, sticker_spec, params)
    _, g = problem.similarities(sticker, [params])
    return g + lam * tv_grad(sticker)


# --- optimizer ----------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    step: float
    momentum: float
    min_iters: int


@dataclass(frozen=True)
class AttackConfig:
    lambda_tv: float = 1e-4
    stage1: StageConfig = StageConfig(5 / 255, 0.9, 100)
    stage2: StageConfig = StageConfig(1 / 255, 0.995, 200)
    window: int = 100
    max_iters: int = 2000
    init_sticker: str = "gray"
    init_seed: int = 0

    def __post_init__(self):
        for st in (self.stage1, self.stage2):
            if not st.step > 0 or not 0 <= st.momentum < 1:
                raise ValueError(f"bad stage settings {st}")
            if self.window > st.min_iters:
                raise ValueError("window must not exceed a stage's min_iters")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.init_sticker not in ("gray", "random"):
            raise ValueError(f"unknown init_sticker {self.init_sticker!r}")

    def stage(self, k: int) -> StageConfig:
        return self.stage1 if k == 1 else self.stage2


@dataclass
class AttackState:
    sticker: np.ndarray
    momentum: np.ndarray
    stage: int = 1
    iter: int = 0
    val_history: list = field(default_factory=list)
    stage_start_iter: int = 0


def initial_sticker(cfg: AttackConfig, spec: StickerSpec) -> np.ndarray:
    shape = (spec.tex_height, spec.tex_width, 3)
    if cfg.init_sticker == "gray":
        return np.full(shape, 0.5)
    return jitter_rng(cfg.init_seed).random(shape)


def initial_state(cfg: AttackConfig, spec: StickerSpec) -> AttackState:
    sticker = initial_sticker(cfg, spec)
    return AttackState(sticker, np.zeros_like(sticker))


@numba.njit(cache=True)
def _momentum_sign_update(sticker, momentum, g, mu, inv_l1, step):
    """m <- mu*m + g/|g|_1 ; x <- clip01(x - step*sign(m)), one pass over the sticker."""
    x = sticker.ravel()
    m_in = momentum.ravel()
    gr = g.ravel()
    x_out = np.empty_like(x)
    m_out = np.empty_like(m_in)
    for i in range(x.size):
        m = mu * m_in[i] + gr[i] * inv_l1
        m_out[i] = m
        v = x[i]
        if m > 0.0:
            v -= step
        elif m < 0.0:
            v += step
        x_out[i] = min(1.0, max(0.0, v))
    return x_out.reshape(sticker.shape), m_out.reshape(momentum.shape)


def attack_step(state: AttackState, cfg: AttackConfig, problem: AttackProblem, jitter: JitterSpec,
                rng: np.random.Generator):
    """One momentum sign step; returns the new state and its log row."""
    stage = cfg.stage(state.stage)
    params = sample_jitter(jitter, rng)
    sims, g_sim = problem.similarities(state.sticker, params)
    if cfg.lambda_tv:
        tv, g_tv = tv_loss_and_grad(state.sticker)
        g = g_sim
        g += cfg.lambda_tv * g_tv
    else:
        tv, g = tv_loss(state.sticker), g_sim
    l1 = np.abs(g).sum()
    if not np.isfinite(l1):
        raise FloatingPointError(f"non-finite gradient at iteration {state.iter}")

    if l1 == 0:
        log.info("zero gradient at iteration %d; normalization skipped", state.iter)
    sticker, momentum = _momentum_sign_update(state.sticker, state.momentum, g, stage.momentum,
                                              1.0 / l1 if l1 > 0 else 0.0, stage.step)

    val = problem.validation_sim(sticker)
    loss_sim = float(sims.mean())
    row = {
        "iter": state.iter + 1,
        "stage": state.stage,
        "loss_sim": loss_sim,
        "loss_tv": tv,
        "loss_total": loss_sim + cfg.lambda_tv * tv,
        "val_sim": val,
    }
    new = replace(state, sticker=sticker, momentum=momentum, iter=state.iter + 1,
                  val_history=state.val_history + [val])
    return new, row


def ols_slope(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    x = np.arange(len(v), dtype=np.float64)
    xc = x - x.mean()
    return float(np.dot(xc, v - v.mean()) / np.dot(xc, xc))


def slope_check(history, window: int = 100) -> str:
    """``"advance"`` when the least-squares slope of the last ``window`` values is >= 0."""
    if window < 2 or len(history) < window:
        raise ValueError(f"need at least {window} validation values, have {len(history)}")
    return "advance" if ols_slope(history[-window:]) >= 0 else "continue"


@dataclass
class AttackResult:
    sticker: np.ndarray
    log: list
    reason: str
    stage2_start: int | None


def run_attack(cfg: AttackConfig, problem: AttackProblem, jitter: JitterSpec,
               state: AttackState | None = None, callback=None) -> AttackResult:
    """Two-stage schedule: stage 1 until the slope rule fires, then stage 2 until it fires again."""
    if state is None:
        state = initial_state(cfg, problem.sticker_spec)
    rng = jitter_rng(jitter.seed)
    rows = []
    stage2_start = None
    reason = "max_iters"
    while state.iter < cfg.max_iters:
        state, row = attack_step(state, cfg, problem, jitter, rng)
        rows.append(row)
        if callback is not None:
            callback(state, row)
        if state.iter - state.stage_start_iter >= cfg.stage(state.stage).min_iters:
            if slope_check(state.val_history, cfg.window) == "advance":
                if state.stage == 1:
                    log.info("stage 2 from iteration %d", state.iter)
                    stage2_start = state.iter
                    state = replace(state, stage=2, stage_start_iter=state.iter,
                                    momentum=np.zeros_like(state.momentum))
                else:
                    reason = "slope"
                    break
    return AttackResult(state.sticker, rows, reason, stage2_start)


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["iter"], r["stage"]] + ["%.9g" % r[k] for k in LOG_COLUMNS[2:]])
