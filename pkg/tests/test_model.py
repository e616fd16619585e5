import json

import numpy as np
import pytest

from sdeep.model import (
    S2_GROUPS,
    ConfigError,
    ModelConfig,
    _param_shapes,
    build_model,
    count_params,
    default_grid,
    preset,
)


def small(**kw):
    base = dict(conv_widths=[4, 3], kernel_lens=[3, 3], d_a=3, head_widths=[5], num_classes=3,
                num_timesteps=10, dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(**base).validate()


def test_preset_resolves_grid_row():
    cfg = preset("Sdeep-B-Multi-ii")
    assert (cfg.extraction, cfg.attention_mode, cfg.strategy) == ("B", "multi", "ii")
    with pytest.raises(ConfigError, match="unknown architecture"):
        preset("Sdeep-Z")


def test_validation_errors():
    with pytest.raises(ConfigError):
        ModelConfig(channel_groups=[[0, 1], [1, 2, 3, 4, 5]]).validate()
    with pytest.raises(ConfigError):
        ModelConfig(kernel_lens=[8, 9, 9]).validate()
    with pytest.raises(ConfigError):
        ModelConfig(extraction="C", common_stages=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(attention_mode="soft").validate()


def test_sharing_maps_per_extraction():
    a, b, c = (small(extraction=e, common_stages=1) for e in "ABC")
    assert a.sharing_maps() == [tuple(range(6))] * 2
    assert b.sharing_maps() == [(0, 0, 0, 1, 1, 1)] * 2
    assert c.sharing_maps() == [(0, 0, 0, 1, 1, 1), (0,) * 6]


def test_strategy_strides():
    assert small(strategy="i").output_len() == 3  # 10 -> 5 -> 3
    assert small(strategy="ii").output_len() == 10


def test_config_json_round_trip_and_unknown_keys():
    cfg = preset("Sdeep-C-Multi-ii", num_classes=4)
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({**cfg.to_dict(), "depth": 3})


@pytest.mark.parametrize("cfg", default_grid(), ids=lambda c: c.name)
def test_count_params_matches_built_tensors(cfg):
    model = build_model(cfg, seed=0)
    assert count_params(cfg) == model.num_params() == sum(int(np.prod(s)) for s, _, _ in _param_shapes(cfg).values())


def test_default_grid_ordering():
    counts = {c.name: count_params(c) for c in default_grid()}
    assert counts["Sdeep-B-Multi-ii"] < counts["Sdeep-C-Multi-ii"] < counts["Sdeep-A-Multi-i"]


@pytest.mark.parametrize("mode", ["none", "single", "multi"])
def test_forward_shapes(mode):
    cfg = small(attention_mode=mode)
    model = build_model(cfg, seed=1)
    x = np.random.default_rng(0).random((7, 10, 6))
    out = model.forward(x)
    assert out.main.shape == (7, 3)
    np.testing.assert_allclose(out.main.data.sum(axis=1), 1.0, atol=1e-12)
    assert (out.aux is not None) == (mode == "multi")
    assert (out.alphas is None) == (mode == "none")


def test_forward_rejects_wrong_input_shape():
    model = build_model(small(), seed=0)
    with pytest.raises(ValueError):
        model.forward(np.zeros((2, 9, 6)))


def test_build_is_seed_deterministic_and_biases_zero():
    cfg = small()
    a, b, c = build_model(cfg, 5), build_model(cfg, 5), build_model(cfg, 6)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
        if name.endswith("bias") or name == "attention.b":
            assert not a.params[name].data.any()
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_dropout_only_with_rng():
    model = build_model(small(dropout_rate=0.5), seed=0)
    x = np.random.default_rng(0).random((4, 10, 6))
    np.testing.assert_array_equal(model.forward(x).main.data, model.forward(x).main.data)
    assert not np.allclose(model.forward(x, rng=np.random.default_rng(1)).main.data, model.forward(x).main.data)


def test_predict_proba_batches_consistently():
    model = build_model(small(), seed=0)
    x = np.random.default_rng(0).random((11, 10, 6))
    p1, a1 = model.predict_proba(x, batch_size=3)
    p2, a2 = model.predict_proba(x, batch_size=100)
    np.testing.assert_allclose(p1, p2, atol=1e-14)
    np.testing.assert_allclose(a1, a2, atol=1e-14)


def test_paper_groups_partition_six_channels():
    assert sorted(c for g in S2_GROUPS for c in g) == list(range(6))
