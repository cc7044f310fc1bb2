"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Unknown or repeated keys
are errors, missing keys take the defaults below. Angles are in degrees.
Jitter half-ranges left unset follow the base values (``a`` +- 10%,
placement scale +- 2%, template scale +- 1%).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .attack import AttackConfig, JitterSpec, StageConfig, default_half_ranges
from .embedder import KINDS, EmbedderConfig
from .geometry import TEMPLATE_SIZE, BendPitchParams, StickerSpec


class ConfigError(ValueError):
    pass


_ANGLES = {"phi", "place_theta", "tmpl_theta"}


@dataclass(frozen=True)
class RunConfig:
    # optimizer
    lambda_tv: float = 1e-4
    stage1_step: float = 5 / 255
    stage1_momentum: float = 0.9
    stage1_min_iters: int = 100
    stage2_step: float = 1 / 255
    stage2_momentum: float = 0.995
    stage2_min_iters: int = 200
    window: int = 100
    max_iters: int = 2000
    init_sticker: str = "gray"
    init_seed: int = 0
    # transformation base values
    a: float = 0.4
    phi_deg: float = 20.0
    place_scale: float = 150.0
    place_theta_deg: float = 0.0
    place_tx: float = 299.5
    place_ty: float = 130.0
    tmpl_scale: float = TEMPLATE_SIZE / 600
    tmpl_theta_deg: float = 0.0
    tmpl_tx: float = 0.0
    tmpl_ty: float = 0.0
    # EOT jitter; None means "derived from the base value"
    batch_size: int = 8
    jitter_seed: int = 0
    jitter_a: float | None = None
    jitter_phi_deg: float = 3.0
    jitter_place_scale: float | None = None
    jitter_place_theta_deg: float = 2.0
    jitter_place_tx: float = 2.0
    jitter_place_ty: float = 2.0
    jitter_tmpl_scale: float | None = None
    jitter_tmpl_theta_deg: float = 1.0
    jitter_tmpl_tx: float = 1.0
    jitter_tmpl_ty: float = 1.0
    # embedder
    embedder_kind: str = "toy_cnn"
    embedder_seed: int = 1
    embed_dim: int = 64
    anchor: str = "clean"
    # images
    sticker_height: int = 400
    sticker_width: int = 900
    face_path: str = ""
    face_seed: int = 0
    face_size: int = 600
    hat_gray: float = 64 / 255
    # evaluation
    gallery_size: int = 1000
    gallery_seed: int = 0
    threshold: float = 0.328
    eval_embedders: str = ""

    def __post_init__(self):
        if self.embedder_kind not in KINDS:
            raise ConfigError(f"embedder_kind must be one of {KINDS}")
        if self.anchor not in ("clean", "prototype"):
            raise ConfigError("anchor must be 'clean' or 'prototype'")
        try:
            self.attack_config()
            self.jitter_spec()
            self.sticker_spec()
            self.eval_embedder_configs()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def base_params(self) -> BendPitchParams:
        return BendPitchParams(
            a=self.a, phi=math.radians(self.phi_deg), place_scale=self.place_scale,
            place_theta=math.radians(self.place_theta_deg), place_tx=self.place_tx, place_ty=self.place_ty,
            tmpl_scale=self.tmpl_scale, tmpl_theta=math.radians(self.tmpl_theta_deg),
            tmpl_tx=self.tmpl_tx, tmpl_ty=self.tmpl_ty,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            lambda_tv=self.lambda_tv,
            stage1=StageConfig(self.stage1_step, self.stage1_momentum, self.stage1_min_iters),
            stage2=StageConfig(self.stage2_step, self.stage2_momentum, self.stage2_min_iters),
            window=self.window, max_iters=self.max_iters,
            init_sticker=self.init_sticker, init_seed=self.init_seed,
        )

    def jitter_spec(self) -> JitterSpec:
        base = self.base_params()
        half = default_half_ranges(base)
        for name in BendPitchParams.names():
            key = f"jitter_{name}_deg" if name in _ANGLES else f"jitter_{name}"
            value = getattr(self, key)
            if value is not None:
                half[name] = math.radians(value) if name in _ANGLES else value
        return JitterSpec(base, half, self.batch_size, self.jitter_seed)

    def sticker_spec(self) -> StickerSpec:
        return StickerSpec(self.sticker_height, self.sticker_width)

    def embedder_config(self) -> EmbedderConfig:
        return EmbedderConfig(self.embedder_kind, self.embedder_seed, self.embed_dim)

    def eval_embedder_configs(self) -> list[EmbedderConfig]:
        """``eval_embedders`` as configs, e.g. ``toy_cnn:1,toy_cnn:2,linear:1``."""
        if not self.eval_embedders.strip():
            return [self.embedder_config()]
        out = []
        for item in self.eval_embedders.split(","):
            kind, _, seed = item.strip().partition(":")
            if kind not in KINDS or not seed.isdigit():
                raise ConfigError(f"bad eval_embedders entry {item!r}")
            out.append(EmbedderConfig(kind, int(seed), self.embed_dim))
        return out


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    ftype = _FIELDS[key].type
    if raw == "" and "None" in ftype:
        return None
    try:
        if ftype.startswith("int"):
            return int(raw)
        if ftype.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ftype}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    """Every key, one per line; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        lines.append(f"{name} = {'' if v is None else repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"
