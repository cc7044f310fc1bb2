import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advsticker.config import ConfigError, RunConfig, dump_config, load_config, parse_config


def test_empty_config_is_all_defaults():
    assert parse_config("# nothing here\n\n") == RunConfig()


def test_values_comments_and_types():
    cfg = parse_config("lambda_tv = 0  # no smoothing\nmax_iters=7\nanchor = prototype\nphi_deg = 10\n")
    assert cfg.lambda_tv == 0.0 and cfg.max_iters == 7 and cfg.anchor == "prototype"
    assert cfg.base_params().phi == pytest.approx(math.radians(10))


@pytest.mark.parametrize("text", [
    "bogus = 1",
    "max_iters = 1\nmax_iters = 2",
    "max_iters = lots",
    "just words",
    "embedder_kind = resnet",
    "anchor = centroid",
    "window = 500",
    "stage1_momentum = 1.0",
    "eval_embedders = toy_cnn:x",
    "sticker_height = 1000",
])
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_derived_jitter_ranges_follow_base():
    cfg = parse_config("a = 0.5\nplace_scale = 100\n")
    half = cfg.jitter_spec().half
    assert half["a"] == pytest.approx(0.05)
    assert half["place_scale"] == pytest.approx(2.0)
    assert half["phi"] == pytest.approx(math.radians(3))
    assert parse_config("jitter_a = 0.0").jitter_spec().half["a"] == 0.0


def test_eval_embedders_list():
    cfg = parse_config("eval_embedders = toy_cnn:1, toy_cnn:2,linear:1\nembed_dim = 32")
    got = [(c.kind, c.seed, c.dim) for c in cfg.eval_embedder_configs()]
    assert got == [("toy_cnn", 1, 32), ("toy_cnn", 2, 32), ("linear", 1, 32)]
    assert [c.seed for c in RunConfig().eval_embedder_configs()] == [1]


def test_dump_roundtrip_of_defaults(tmp_path):
    cfg = RunConfig()
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    (tmp_path / "c.cfg").write_text(text)
    assert load_config(tmp_path / "c.cfg") == cfg


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(-40, 40), st.integers(1, 5000), st.floats(1e-6, 1),
       st.sampled_from(["gray", "random"]), st.one_of(st.none(), st.floats(0, 0.2)))
def test_dump_roundtrip_property(a, phi, iters, lam, init, ja):
    cfg = RunConfig(a=a, phi_deg=phi, max_iters=iters, lambda_tv=lam, init_sticker=init, jitter_a=ja)
    assert parse_config(dump_config(cfg)) == cfg
