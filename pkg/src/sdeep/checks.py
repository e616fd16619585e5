"""Finite-difference gradient suite over every layer type and a toy full model."""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Dict, Iterable, Tuple

import numpy as np

from . import tensor as T
from .gradcheck import check_params
from .layers import AttentionParams, ConvBlockSpec, channel_attention, conv_temporal, dense
from .model import Model, ModelConfig, build_model
from .tensor import Tensor
from .training import multi_head_loss

STEP = 1e-5


def toy_config(attention_mode: str = "multi", extraction: str = "B", strategy: str = "ii") -> ModelConfig:
    """B=4, T=12, 3 classes, narrow layers; no dropout so the loss is deterministic."""
    return ModelConfig(
        name=f"toy-{extraction}-{attention_mode}-{strategy}",
        extraction=extraction,
        strategy=strategy,
        attention_mode=attention_mode,
        channel_groups=[[0, 1], [2, 3]],
        conv_widths=[4, 3, 2] if extraction != "C" else [4, 3, 2, 2],
        kernel_lens=[3, 3, 3] if extraction != "C" else [3, 3, 3, 3],
        d_a=4,
        head_widths=[5],
        num_classes=3,
        num_channels=4,
        num_timesteps=12,
        dropout_rate=0.0,
    ).validate()


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _case_conv(rng, stride: int, padding: str) -> Tuple[Callable[[], Tensor], Dict[str, Tensor]]:
    spec = ConvBlockSpec(kernel_len=3, in_features=2, out_features=3, sharing_map=(0, 1, 0),
                         stride=stride, padding=padding)
    x = _param(rng, 2, 3, 7, 2)
    w = _param(rng, 2, 3, 2, 3)
    b = _param(rng, 2, 3)
    probe = Tensor(rng.normal(size=(2, 3, spec.output_len(7), 3)))
    return (lambda: T.sum_(T.mul(conv_temporal(x, spec, w, b), probe))), {"x": x, "weight": w, "bias": b}


def _case_dense(rng, activation: str):
    x = _param(rng, 5, 4)
    W = _param(rng, 4, 3)
    b = _param(rng, 3)
    probe = Tensor(rng.normal(size=(5, 3)))
    return (lambda: T.sum_(T.mul(dense(x, W, b, activation), probe))), {"x": x, "W": W, "b": b}


def _case_attention(rng):
    h = _param(rng, 3, 4, 5)
    p = AttentionParams(_param(rng, 6, 5, scale=0.5), _param(rng, 6), _param(rng, 6))
    probe_a = Tensor(rng.normal(size=(3, 4)))
    probe_p = Tensor(rng.normal(size=(3, 5)))

    def loss():
        out = channel_attention(h, p)
        return T.add(T.sum_(T.mul(out.alphas, probe_a)), T.sum_(T.mul(out.pooled, probe_p)))

    return loss, {"h": h, "W": p.W, "b": p.b, "u": p.u}


def _case_softmax_ce(rng):
    z = _param(rng, 6, 4)
    za = _param(rng, 6, 4)
    y = rng.integers(0, 4, size=6)
    return (lambda: multi_head_loss(T.softmax(z), T.softmax(za), y, 0.5)), {"logits": z, "aux_logits": za}


def _case_dropout(rng):
    x = _param(rng, 4, 6)
    mask = (rng.random((4, 6)) < 0.8) / 0.8
    probe = Tensor(rng.normal(size=(4, 6)))
    return (lambda: T.sum_(T.mul(T.dropout(x, mask), probe))), {"x": x}


def _case_model(rng, cfg: ModelConfig):
    model: Model = build_model(cfg, seed=int(rng.integers(1 << 31)))
    # zero-initialised biases put ReLU inputs exactly on the kink; move off it
    for name, p in model.parameters().items():
        if name.endswith("bias") or name == "attention.b":
            p.assign_(rng.normal(scale=0.5, size=p.shape))
    x = rng.random((5, cfg.num_timesteps, cfg.num_channels))
    y = rng.integers(0, cfg.num_classes, size=5)
    lam = 0.5 if cfg.attention_mode == "multi" else 0.0

    def loss():
        out = model.forward(x)
        return multi_head_loss(out.main, out.aux, y, lam)

    return loss, model.parameters()


CASES = OrderedDict(
    [
        ("conv_same_stride1", lambda rng: _case_conv(rng, 1, "same")),
        ("conv_same_stride2", lambda rng: _case_conv(rng, 2, "same")),
        ("conv_valid_stride1", lambda rng: _case_conv(rng, 1, "valid")),
        ("conv_valid_stride2", lambda rng: _case_conv(rng, 2, "valid")),
        ("dense_none", lambda rng: _case_dense(rng, "none")),
        ("dense_relu", lambda rng: _case_dense(rng, "relu")),
        ("dense_tanh", lambda rng: _case_dense(rng, "tanh")),
        ("channel_attention", _case_attention),
        ("softmax_multi_head_loss", _case_softmax_ce),
        ("dropout", _case_dropout),
        ("model_B_multi_ii", lambda rng: _case_model(rng, toy_config("multi", "B", "ii"))),
        ("model_A_single_i", lambda rng: _case_model(rng, toy_config("single", "A", "i"))),
        ("model_C_multi_ii", lambda rng: _case_model(rng, toy_config("multi", "C", "ii"))),
        ("model_A_none_ii", lambda rng: _case_model(rng, toy_config("none", "A", "ii"))),
    ]
)


def gradient_suite(seeds: Iterable[int] = range(20), cases=None, step: float = STEP) -> Dict[str, float]:
    """Max relative error per case over ``seeds`` (all coordinates checked)."""
    worst: Dict[str, float] = {}
    for name in cases or CASES:
        build = CASES[name]
        for seed in seeds:
            loss, params = build(np.random.default_rng(seed))
            errs = check_params(loss, params, step)
            worst[name] = max(worst.get(name, 0.0), max(errs.values()))
    return worst
