"""Attack metrics against an anchor identity and a synthetic gallery.

The "faces" here are smooth random low-frequency textures, not photographs.
The embedders are not face models either, so similarity drops measured with
them say nothing about real recognition systems.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .embedder import Embedder, cosine_sim
from .geometry import FACE_SIZE, BendPitchParams, RenderPlan, StickerSpec, to_template
from .image import smooth_texture

DEFAULT_THRESHOLD = 0.328
HAT_GRAY = 64 / 255  # dark gray that an 8-bit PPM stores exactly
REPORT_COLUMNS = ("embedder", "is_source", "baseline_sim", "final_sim", "drop", "top1_gallery_sim",
                  "threshold", "recognized_baseline", "recognized_final")


def _stream(seed: int, salt: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, salt], dtype=np.uint64), counter=0))


def synthetic_face(seed: int, size: int = FACE_SIZE) -> np.ndarray:
    return smooth_texture(_stream(seed, 2), size)


def hat_face(face: np.ndarray, params: BendPitchParams, spec: StickerSpec | None = None,
             gray: float = HAT_GRAY) -> np.ndarray:
    """The face wearing a plain dark-gray sticker at ``params``."""
    spec = spec or StickerSpec()
    plain = np.full((spec.tex_height, spec.tex_width, face.shape[2]), gray)
    return RenderPlan(spec, params, face.shape[0], face.shape[1]).composite_face(plain, face)


@dataclass
class Gallery:
    labels: list
    embeddings: np.ndarray
    seed: int

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("gallery labels must be unique")

    def __len__(self):
        return len(self.labels)

    def top1(self, e: np.ndarray) -> float:
        return max(cosine_sim(e, g) for g in self.embeddings)


def build_gallery(embedder: Embedder, n: int = 1000, seed: int = 0, chunk: int = 50) -> Gallery:
    if n < 1:
        raise ValueError("gallery needs at least one identity")
    rng = _stream(seed, 3)
    size = embedder.config.input_shape[0]
    embs = []
    for start in range(0, n, chunk):
        imgs = np.stack([smooth_texture(rng, size) for _ in range(min(chunk, n - start))])
        embs.append(embedder.forward(imgs)[0])
    return Gallery([f"id{i:04d}" for i in range(n)], np.concatenate(embs), seed)


@dataclass
class AttackReport:
    baseline_sim: float
    final_sim: float
    drop: float
    top1_gallery_sim: float
    threshold: float
    recognized_baseline: bool
    recognized_final: bool
    embedder: str = ""
    is_source: bool = False


def evaluate(sticker, face_clean, face_hat_plain, params: BendPitchParams, embedder: Embedder,
             gallery: Gallery, threshold: float = DEFAULT_THRESHOLD,
             spec: StickerSpec | None = None, is_source: bool = False) -> AttackReport:
    spec = spec or StickerSpec(sticker.shape[0], sticker.shape[1])
    if face_clean.shape != face_hat_plain.shape:
        raise ValueError("clean and hat faces differ in shape")
    anchor = embedder(to_template(face_clean, params, embedder.config.input_shape[0]))
    baseline = cosine_sim(anchor, embedder(to_template(face_hat_plain, params, embedder.config.input_shape[0])))
    plan = RenderPlan(spec, params, face_hat_plain.shape[0], face_hat_plain.shape[1], embedder.config.input_shape[0])
    e_final = embedder(plan.forward(sticker, face_hat_plain))
    final = cosine_sim(anchor, e_final)
    return AttackReport(
        baseline_sim=baseline,
        final_sim=final,
        drop=baseline - final,
        top1_gallery_sim=gallery.top1(e_final),
        threshold=threshold,
        recognized_baseline=baseline >= threshold,
        recognized_final=final >= threshold,
        embedder=embedder.label,
        is_source=is_source,
    )


def transfer_eval(sticker, faces, params: BendPitchParams, embedders: list, source: str,
                  gallery_seed: int = 0, gallery_size: int = 1000,
                  threshold: float = DEFAULT_THRESHOLD, spec: StickerSpec | None = None) -> list:
    """Evaluate one sticker against every embedder, in the given order.

    ``faces`` is ``(face_clean, face_hat_plain)``; ``source`` is the label of
    the embedder the sticker was optimized against.
    """
    face_clean, face_hat = faces
    reports = []
    for e in embedders:
        gallery = build_gallery(e, gallery_size, gallery_seed)
        reports.append(evaluate(sticker, face_clean, face_hat, params, e, gallery, threshold, spec,
                                is_source=(e.label == source)))
    return reports


def write_reports_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.embedder, int(r.is_source), "%.9g" % r.baseline_sim, "%.9g" % r.final_sim,
                        "%.9g" % r.drop, "%.9g" % r.top1_gallery_sim, "%.9g" % r.threshold,
                        int(r.recognized_baseline), int(r.recognized_final)])


def write_reports_json(reports, path) -> None:
    with open(path, "w") as fh:
        json.dump({"reports": [asdict(r) for r in reports]}, fh, indent=2, sort_keys=True)
        fh.write("\n")
