import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advsticker import gradcheck
from advsticker.embedder import (
    EmbedderConfig,
    LinearEmbedder,
    cosine_sim,
    cosine_sim_grad,
    dump_weights,
    embed,
    embed_vjp,
    init_embedder,
    load_weights,
    uniform_stream,
)

MASK64 = 2**64 - 1


def philox4x64_10(counter, key):
    """Reference Philox4x64-10 block, written from the published constants."""
    ctr, key = list(counter), list(key)
    for _ in range(10):
        p0 = 0xD2E7470EE14C6C93 * ctr[0]
        p1 = 0xCA5A826395121157 * ctr[2]
        ctr = [(p1 >> 64) ^ ctr[1] ^ key[0], p1 & MASK64, (p0 >> 64) ^ ctr[3] ^ key[1], p0 & MASK64]
        key = [(key[0] + 0x9E3779B97F4A7C15) & MASK64, (key[1] + 0xBB67AE8584CAA73B) & MASK64]
    return ctr


def test_weight_stream_matches_reference_philox():
    # blocks are produced for counter values 1, 2, ... under key (seed, 0)
    raw = philox4x64_10([1, 0, 0, 0], [7, 0]) + philox4x64_10([2, 0, 0, 0], [7, 0])
    expected = np.array([(r >> 11) * 2.0**-53 for r in raw])
    assert np.array_equal(uniform_stream(7, 8), expected)


def test_weight_stream_golden_values():
    raw = [5599841837815857887, 15655913098571550255, 2880178291573394738, 573812481542357666]
    assert uniform_stream(1, 4).tolist() == [(r >> 11) * 2.0**-53 for r in raw]


@pytest.mark.parametrize("kind", ["toy_cnn", "linear"])
def test_same_seed_identical_weights_and_different_seeds_differ(kind, rng):
    a = init_embedder(EmbedderConfig(kind, 1))
    b = init_embedder(EmbedderConfig(kind, 1))
    c = init_embedder(EmbedderConfig(kind, 2))
    assert all(np.array_equal(x, y) for x, y in zip(a.weights(), b.weights()))
    img = rng.random((112, 112, 3))
    assert np.array_equal(a(img), b(img))
    assert not np.allclose(a(img), c(img))


def test_weight_scale_is_inverse_sqrt_fan_in():
    e = init_embedder(EmbedderConfig("linear", 3))
    w = e.weights()[0]
    bound = np.sqrt(3.0) / np.sqrt(112 * 112 * 3)
    assert np.abs(w).max() <= bound
    assert np.std(w) == pytest.approx(1 / np.sqrt(112 * 112 * 3), rel=0.01)


def test_linear_matches_direct_matmul(rng):
    e = init_embedder(EmbedderConfig("linear", 4))
    w = e.weights()[0]
    img = rng.random((112, 112, 3))
    direct = np.array([sum(float(row[i]) * float(v) for i, v in enumerate(img.ravel())) for row in w[:4]])
    assert np.allclose(e(img)[:4], direct, rtol=1e-10, atol=1e-12)
    assert np.allclose(e(img), w @ img.ravel(), rtol=1e-12, atol=1e-14)


def test_linear_zero_and_homogeneity(rng):
    e = init_embedder(EmbedderConfig("linear", 1))
    assert not np.any(e(np.zeros((112, 112, 3))))
    img = rng.random((112, 112, 3))
    assert np.allclose(e(2.5 * img), 2.5 * e(img), rtol=1e-12)


def test_toy_cnn_embeddings_are_informative(rng):
    """Unrelated images must not all collapse onto one direction."""
    e = init_embedder(EmbedderConfig("toy_cnn", 1))
    sims = [cosine_sim(e(rng.random((112, 112, 3))), e(rng.random((112, 112, 3)) ** 2)) for _ in range(4)]
    assert max(sims) < 0.99


def test_embed_wrappers_and_batch_consistency(rng):
    e = init_embedder(EmbedderConfig("toy_cnn", 2))
    imgs = rng.random((3, 112, 112, 3))
    out, pullback = e.forward(imgs)
    for i in range(3):
        assert np.allclose(out[i], embed(e, imgs[i]), atol=1e-13)
    cot = rng.standard_normal((3, 64))
    batch_grad = pullback(cot)
    assert np.allclose(batch_grad[1], embed_vjp(e, imgs[1], cot[1]), atol=1e-13)


def test_shape_mismatch_and_unknown_kind():
    with pytest.raises(ValueError):
        init_embedder(EmbedderConfig("resnet", 1))
    with pytest.raises(ValueError):
        init_embedder(EmbedderConfig("linear", 1))(np.zeros((64, 64, 3)))


@pytest.mark.parametrize("kind", ["linear", "toy_cnn"])
def test_embedder_fd_oracle(kind, rng):
    r = gradcheck.check_embedder(rng, kind)
    assert r.error < 1e-4 and r.probes == 20


def test_linear_vjp_is_transpose(rng):
    e = init_embedder(EmbedderConfig("linear", 5))
    cot = rng.standard_normal(64)
    g = e.vjp(rng.random((112, 112, 3)), cot)
    assert np.allclose(g.ravel(), e.weights()[0].T @ cot, atol=1e-14)


def test_cosine_examples():
    u = np.array([1.0, 2.0, -3.0])
    assert cosine_sim(u, u) == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim(u, -u) == pytest.approx(-1.0, abs=1e-15)
    assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    with pytest.raises(ValueError):
        cosine_sim(np.zeros(3), u)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_scale_invariance(seed, alpha, beta):
    r = np.random.default_rng(seed)
    u, v = r.standard_normal(16), r.standard_normal(16)
    assert abs(cosine_sim(alpha * u, beta * v) - cosine_sim(u, v)) < 1e-12


def test_cosine_grad_formula_and_fd(rng):
    u, v = rng.standard_normal(8), rng.standard_normal(8)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    assert np.allclose(cosine_sim_grad(u, v), v / (nu * nv) - (u @ v) * u / (nu**3 * nv), atol=1e-15)
    # the gradient is orthogonal to u (scale invariance)
    assert abs(cosine_sim_grad(u, v) @ u) < 1e-12
    assert gradcheck.check_cosine(rng).error < 1e-4


@pytest.mark.parametrize("kind", ["toy_cnn", "linear"])
def test_weight_dump_roundtrip(kind, tmp_path):
    e = init_embedder(EmbedderConfig(kind, 9, 64))
    dump_weights(e, tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:4] == b"ADVE" and len(raw) == 16 + 8 * sum(w.size for w in e.weights())
    cfg, flat = load_weights(tmp_path / "w.bin")
    assert (cfg.kind, cfg.seed, cfg.dim) == (kind, 9, 64)
    assert np.array_equal(flat, np.concatenate([w.ravel() for w in e.weights()]))


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope" + bytes(20))
    with pytest.raises(ValueError):
        load_weights(tmp_path / "x.bin")


def test_linear_class_exported():
    assert isinstance(init_embedder(EmbedderConfig("linear", 1)), LinearEmbedder)
