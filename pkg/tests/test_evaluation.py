import json

import numpy as np
import pytest

from advsticker.embedder import EmbedderConfig, cosine_sim, init_embedder
from advsticker.evaluation import (
    HAT_GRAY,
    REPORT_COLUMNS,
    build_gallery,
    evaluate,
    hat_face,
    synthetic_face,
    transfer_eval,
    write_reports_csv,
    write_reports_json,
)
from advsticker.geometry import BendPitchParams, RenderPlan, StickerSpec, render, to_template

P = BendPitchParams()


@pytest.fixture(scope="module")
def setup():
    face = synthetic_face(4)
    hat = hat_face(face, P)
    e = init_embedder(EmbedderConfig("toy_cnn", 1))
    return face, hat, e, build_gallery(e, 30, seed=2)


def test_synthetic_face_is_deterministic_and_in_range():
    a, b = synthetic_face(3), synthetic_face(3)
    assert a.shape == (600, 600, 3) and np.array_equal(a, b)
    assert 0 <= a.min() and a.max() <= 1
    assert not np.array_equal(a, synthetic_face(4))


def test_hat_face_paints_the_footprint_gray(setup):
    face, hat, _, _ = setup
    mask = RenderPlan(StickerSpec(), P, 600, 600).full_mask()
    assert np.allclose(hat[mask], HAT_GRAY, atol=1e-15)
    assert np.array_equal(hat[~mask], face[~mask])


def test_gallery_size_and_determinism(setup):
    _, _, e, _ = setup
    one = build_gallery(e, 1, seed=0)
    assert len(one) == 1
    g1, g2 = build_gallery(e, 5, seed=1), build_gallery(e, 5, seed=1)
    assert np.array_equal(g1.embeddings, g2.embeddings) and len(set(g1.labels)) == 5
    assert np.all(np.linalg.norm(g1.embeddings, axis=1) > 0)
    with pytest.raises(ValueError):
        build_gallery(e, 0)


def test_gallery_chunking_does_not_change_embeddings(setup):
    _, _, e, _ = setup
    assert np.allclose(build_gallery(e, 7, 3, chunk=2).embeddings, build_gallery(e, 7, 3, chunk=50).embeddings,
                       atol=1e-13)


def test_null_attack_has_zero_drop(setup):
    face, hat, e, gallery = setup
    sticker = np.full((400, 900, 3), HAT_GRAY)
    r = evaluate(sticker, face, hat, P, e, gallery)
    assert abs(r.drop) < 1e-12
    assert r.drop == r.baseline_sim - r.final_sim


def test_report_definitions(setup, rng):
    face, hat, e, gallery = setup
    sticker = rng.random((400, 900, 3))
    r = evaluate(sticker, face, hat, P, e, gallery)
    anchor = e(to_template(face, P))
    final = e(render(sticker, hat, P))
    assert r.final_sim == cosine_sim(anchor, final)
    assert r.baseline_sim == cosine_sim(anchor, e(to_template(hat, P)))
    assert r.drop == r.baseline_sim - r.final_sim
    assert all(r.top1_gallery_sim >= cosine_sim(final, g) for g in gallery.embeddings)
    assert r.top1_gallery_sim in [cosine_sim(final, g) for g in gallery.embeddings]
    assert r.recognized_final == (r.final_sim >= r.threshold)


def test_threshold_flips_recognition(setup):
    face, hat, e, gallery = setup
    sticker = np.full((400, 900, 3), 0.5)
    lo = evaluate(sticker, face, hat, P, e, gallery, threshold=0.328)
    hi = evaluate(sticker, face, hat, P, e, gallery, threshold=0.823)
    if 0.328 <= lo.final_sim < 0.823:
        assert lo.recognized_final and not hi.recognized_final
    assert hi.threshold == 0.823


def test_transfer_preserves_order_and_self_transfer(setup, rng):
    face, hat, e, _ = setup
    sticker = rng.random((400, 900, 3))
    embedders = [init_embedder(EmbedderConfig("linear", 1)), e, init_embedder(EmbedderConfig("toy_cnn", 2))]
    reports = transfer_eval(sticker, (face, hat), P, embedders, "toy_cnn:1", gallery_seed=2, gallery_size=30)
    assert [r.embedder for r in reports] == ["linear:1", "toy_cnn:1", "toy_cnn:2"]
    assert [r.is_source for r in reports] == [False, True, False]
    single = evaluate(sticker, face, hat, P, e, build_gallery(e, 30, 2), is_source=True)
    assert reports[1] == single


def test_shape_mismatch(setup):
    face, _, e, gallery = setup
    with pytest.raises(ValueError):
        evaluate(np.zeros((400, 900, 3)), face, face[:100], P, e, gallery)


def test_report_writers(setup, tmp_path, rng):
    face, hat, e, gallery = setup
    reports = [evaluate(rng.random((400, 900, 3)), face, hat, P, e, gallery, is_source=True)]
    write_reports_csv(reports, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS) and len(lines) == 2
    assert lines[1].startswith("toy_cnn:1,1,")
    write_reports_json(reports, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["reports"][0]["drop"] == reports[0].drop
