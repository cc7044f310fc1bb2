"""``advsticker`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .attack import AttackProblem, JitterSpec, jitter_rng, run_attack, sample_jitter, write_log_csv
from .config import ConfigError, RunConfig, dump_config, parse_config
from .embedder import cosine_sim, init_embedder
from .evaluation import hat_face, synthetic_face, transfer_eval, write_reports_csv, write_reports_json
from .geometry import RenderPlan, to_template
from .image import PPMError, load_ppm, save_ppm

log = logging.getLogger("advsticker")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

PROTOTYPE_VIEWS = 16


def threads_from_env() -> int:
    raw = os.environ.get("ADVSTICKER_THREADS", "0").strip() or "0"
    if not raw.isdigit():
        raise ConfigError(f"ADVSTICKER_THREADS must be a non-negative integer, got {raw!r}")
    return int(raw)


def _load_run_config(path):
    if path is None:
        return RunConfig(), ""
    text = Path(path).read_text()
    return parse_config(text), text


def _face(cfg: RunConfig, synthetic_seed):
    """Returns (face image, description)."""
    if synthetic_seed is not None:
        return synthetic_face(synthetic_seed, cfg.face_size), f"synthetic:{synthetic_seed}"
    if cfg.face_path:
        face = load_ppm(cfg.face_path)
        return face, cfg.face_path
    return synthetic_face(cfg.face_seed, cfg.face_size), f"synthetic:{cfg.face_seed}"


def _anchor(cfg: RunConfig, e, face):
    base = cfg.base_params()
    if cfg.anchor == "clean":
        return e(to_template(face, base))
    # mean embedding over jittered alignments of the clean photo
    spec = JitterSpec(base, cfg.jitter_spec().half, PROTOTYPE_VIEWS, cfg.jitter_seed + 1)
    views = np.stack([to_template(face, p) for p in sample_jitter(spec, jitter_rng(spec.seed))])
    return e.forward(views)[0].mean(axis=0)


def build_problem(cfg: RunConfig, face, threads: int = 0) -> AttackProblem:
    """The attack problem for ``face`` wearing the plain hat, as ``attack`` sets it up."""
    base = cfg.base_params()
    spec = cfg.sticker_spec()
    hat = hat_face(face, base, spec, cfg.hat_gray)
    e = init_embedder(cfg.embedder_config())
    return AttackProblem(hat, e, _anchor(cfg, e, face), spec, base, threads=threads)


def cmd_attack(args) -> int:
    cfg, text = _load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    face, face_desc = _face(cfg, args.synthetic_face)
    problem = build_problem(cfg, face, threads_from_env())
    e, anchor, hat, base = problem.embedder, problem.anchor, problem.face, problem.base
    log.info("config:\n%s", text or "(defaults)")

    def progress(state, row):
        if row["iter"] % 50 == 0:
            log.info("iter %d stage %d val_sim %.4f", row["iter"], row["stage"], row["val_sim"])

    result = run_attack(cfg.attack_config(), problem, cfg.jitter_spec(), callback=progress)
    if not np.all(np.isfinite(result.sticker)):
        raise FloatingPointError("non-finite sticker")

    save_ppm(result.sticker, out / "sticker.ppm")
    write_log_csv(result.log, out / "loss_log.csv")
    manifest = {
        "command": "attack",
        "config_text": text,
        "config": dump_config(cfg),
        "face": face_desc,
        "anchor": cfg.anchor,
        "embedder": e.label,
        "seeds": {"embedder": cfg.embedder_seed, "jitter": cfg.jitter_seed, "init": cfg.init_seed,
                  "face": args.synthetic_face if args.synthetic_face is not None else cfg.face_seed},
        "termination": result.reason,
        "iterations": len(result.log),
        "stage2_start": result.stage2_start,
        "baseline_val_sim": cosine_sim(anchor, e(to_template(hat, base))),
        "final_val_sim": result.log[-1]["val_sim"] if result.log else None,
        "outputs": ["sticker.ppm", "loss_log.csv"],
    }
    _write_json(manifest, out / "manifest.json")
    print(f"{result.reason} after {len(result.log)} iterations; sticker written to {out / 'sticker.ppm'}")
    return 0


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_sticker(path, cfg: RunConfig):
    if path is None:
        raise ConfigError("--sticker is required")
    sticker = load_ppm(path)
    if sticker.shape[:2] != (cfg.sticker_height, cfg.sticker_width):
        raise ConfigError(f"sticker is {sticker.shape[1]}x{sticker.shape[0]}, config expects "
                          f"{cfg.sticker_width}x{cfg.sticker_height}")
    return sticker


def cmd_eval(args) -> int:
    cfg, _ = _load_run_config(args.config)
    sticker = _load_sticker(args.sticker, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    face, _ = _face(cfg, args.synthetic_face)
    base = cfg.base_params()
    hat = hat_face(face, base, cfg.sticker_spec(), cfg.hat_gray)
    embedders = [init_embedder(c) for c in cfg.eval_embedder_configs()]
    source = f"{cfg.embedder_kind}:{cfg.embedder_seed}"
    reports = transfer_eval(sticker, (face, hat), base, embedders, source, cfg.gallery_seed,
                            cfg.gallery_size, cfg.threshold, cfg.sticker_spec())
    if not all(np.isfinite([r.final_sim, r.baseline_sim]).all() for r in reports):
        raise FloatingPointError("non-finite similarity")
    write_reports_csv(reports, out / "report.csv")
    write_reports_json(reports, out / "report.json")
    for r in reports:
        print(f"{r.embedder:<12} baseline {r.baseline_sim:+.4f} final {r.final_sim:+.4f} drop {r.drop:+.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.scale)
    print(gradcheck.format_results(results))
    return 0 if all(r.passed for r in results) else EXIT_GRADCHECK


def cmd_render(args) -> int:
    cfg, _ = _load_run_config(args.config)
    sticker = _load_sticker(args.sticker, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    face, _ = _face(cfg, args.synthetic_face)
    base = cfg.base_params()
    plan = RenderPlan(cfg.sticker_spec(), base, face.shape[0], face.shape[1])
    composited = plan.composite_face(sticker, face)
    save_ppm(composited, out / "face.ppm")
    save_ppm(plan.forward(sticker, face), out / "template.ppm")
    print(f"wrote {out / 'face.ppm'} and {out / 'template.ppm'}")
    return 0


COMMANDS = {"attack": cmd_attack, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "render": cmd_render}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advsticker", description="Adversarial hat-sticker toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value run configuration")
    parser.add_argument("--sticker", help="sticker PPM (eval, render)")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--synthetic-face", type=int, metavar="SEED", help="use a seeded synthetic face")
    parser.add_argument("--scale", choices=("reduced", "full"), default="reduced", help="gradcheck size")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, PPMError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
