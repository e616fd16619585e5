"""Declarative model configs, the model factory and closed-form parameter counts."""

from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .layers import (
    AttentionParams,
    ConvBlockSpec,
    channel_attention,
    conv_temporal,
    dense,
    dropout_mask,
    glorot_uniform,
)
from .tensor import ShapeError, Tensor

S2_CHANNELS = ("B2", "B3", "B4", "B8", "NDVI", "NDWI")
S2_GROUPS = ((0, 1, 2), (3, 4, 5))

STRATEGY_STRIDE = {"i": 2, "ii": 1}


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass
class ModelConfig:
    extraction: str = "B"  # A | B | C
    strategy: str = "ii"  # i | ii
    attention_mode: str = "multi"  # single | multi | none
    channel_groups: List[List[int]] = field(default_factory=lambda: [list(g) for g in S2_GROUPS])
    conv_widths: List[int] = field(default_factory=lambda: [128, 64, 32])
    kernel_lens: List[int] = field(default_factory=lambda: [9, 9, 9])
    common_stages: int = 1  # trailing stages shared by all channels; extraction C only
    d_a: int = 64
    head_widths: List[int] = field(default_factory=lambda: [256])
    num_classes: int = 11
    num_channels: int = 6
    num_timesteps: int = 21
    dropout_rate: float = 0.2
    name: str = ""

    # -- validation -----------------------------------------------------------
    def validate(self) -> "ModelConfig":
        if self.extraction not in ("A", "B", "C"):
            raise ConfigError(f"extraction must be A, B or C, got {self.extraction!r}")
        if self.strategy not in STRATEGY_STRIDE:
            raise ConfigError(f"strategy must be 'i' or 'ii', got {self.strategy!r}")
        if self.attention_mode not in ("single", "multi", "none"):
            raise ConfigError(f"attention_mode must be single, multi or none, got {self.attention_mode!r}")
        if self.num_channels < 1 or self.num_timesteps < 1 or self.num_classes < 1:
            raise ConfigError("num_channels, num_timesteps and num_classes must be positive")
        flat = sorted(c for g in self.channel_groups for c in g)
        if flat != list(range(self.num_channels)) or any(len(g) == 0 for g in self.channel_groups):
            raise ConfigError(
                f"channel_groups {self.channel_groups} is not a partition of 0..{self.num_channels - 1}"
            )
        if not self.conv_widths or len(self.conv_widths) != len(self.kernel_lens):
            raise ConfigError("conv_widths and kernel_lens must be non-empty and of equal length")
        if any(w < 1 for w in self.conv_widths) or any(k < 1 or k % 2 == 0 for k in self.kernel_lens):
            raise ConfigError("conv widths must be positive and kernel lengths odd positive")
        if self.extraction == "C" and not 1 <= self.common_stages < len(self.conv_widths):
            raise ConfigError(
                f"extraction C needs 1 <= common_stages < {len(self.conv_widths)}, got {self.common_stages}"
            )
        if self.d_a < 1 or any(w < 1 for w in self.head_widths):
            raise ConfigError("d_a and head widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.n_feat() == 0:
            raise ConfigError("series too short: per-channel feature length is 0")
        return self

    # -- derived structure ----------------------------------------------------
    @property
    def stride(self) -> int:
        return STRATEGY_STRIDE[self.strategy]

    def group_of(self) -> List[int]:
        owner = [0] * self.num_channels
        for gi, group in enumerate(sorted(self.channel_groups, key=min)):
            for c in group:
                owner[c] = gi
        return owner

    def sharing_maps(self) -> List[Tuple[int, ...]]:
        n = len(self.conv_widths)
        ident = tuple(range(self.num_channels))
        grouped = tuple(self.group_of())
        if self.extraction == "A":
            return [ident] * n
        if self.extraction == "B":
            return [grouped] * n
        split = n - self.common_stages
        return [grouped] * split + [(0,) * self.num_channels] * self.common_stages

    def conv_specs(self) -> List[ConvBlockSpec]:
        specs = []
        f_in = 1
        for width, k, smap in zip(self.conv_widths, self.kernel_lens, self.sharing_maps()):
            specs.append(ConvBlockSpec(k, f_in, width, smap, stride=self.stride, padding="same"))
            f_in = width
        return specs

    def output_len(self) -> int:
        t = self.num_timesteps
        for spec in self.conv_specs():
            t = spec.output_len(t)
        return t

    def n_feat(self) -> int:
        return self.output_len() * self.conv_widths[-1]

    def head_inputs(self) -> Dict[str, int]:
        n_feat = self.n_feat()
        heads = {"main": n_feat * self.num_channels}
        if self.attention_mode == "multi":
            heads["aux"] = n_feat
        return heads

    # -- serialisation --------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.channel_groups = [list(map(int, g)) for g in cfg.channel_groups]
        cfg.conv_widths = [int(w) for w in cfg.conv_widths]
        cfg.kernel_lens = [int(k) for k in cfg.kernel_lens]
        cfg.head_widths = [int(w) for w in cfg.head_widths]
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


class ModelOutput(NamedTuple):
    main: Tensor  # class probabilities (N, num_classes)
    aux: Optional[Tensor]  # auxiliary-head probabilities, multi mode only
    alphas: Optional[Tensor]  # (N, B) channel weights unless attention_mode == none


class Model:
    """A built classifier: ordered named parameters plus the forward wiring."""

    def __init__(self, cfg: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.params = params
        self._specs = cfg.conv_specs()

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if list(state) != list(self.params):
            raise ValueError("state dict parameter names do not match the model")
        for k, p in self.params.items():
            p.assign_(state[k])

    def _head(self, prefix: str, x: Tensor, rng) -> Tensor:
        depth = len(self.cfg.head_widths)
        for j in range(depth):
            x = dense(x, self.params[f"{prefix}.dense{j}.weight"], self.params[f"{prefix}.dense{j}.bias"], "relu")
            mask = dropout_mask(rng, x.shape, self.cfg.dropout_rate)
            if mask is not None:
                x = T.dropout(x, mask)
        logits = dense(x, self.params[f"{prefix}.dense{depth}.weight"], self.params[f"{prefix}.dense{depth}.bias"])
        return T.softmax(logits)

    def features(self, x) -> Tensor:
        """Per-channel flattened conv features h, shape (N, B, n_feat)."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        cfg = self.cfg
        if data.ndim != 3 or data.shape[1:] != (cfg.num_timesteps, cfg.num_channels):
            raise ShapeError(
                f"model expects input (N, {cfg.num_timesteps}, {cfg.num_channels}), got {data.shape}"
            )
        h = x if isinstance(x, Tensor) else Tensor(data)
        h = T.reshape(T.transpose(h, (0, 2, 1)), (data.shape[0], cfg.num_channels, cfg.num_timesteps, 1))
        for s, spec in enumerate(self._specs):
            h = T.relu(conv_temporal(h, spec, self.params[f"conv{s}.weight"], self.params[f"conv{s}.bias"]))
        return T.reshape(h, (data.shape[0], cfg.num_channels, cfg.n_feat()))

    def forward(self, x, rng: Optional[np.random.Generator] = None) -> ModelOutput:
        """Map a batch (N, T, B) to head probabilities and channel weights.

        Dropout masks are drawn from ``rng``; pass None for inference.
        """
        cfg = self.cfg
        h = self.features(x)
        n = h.shape[0]
        flat = lambda t: T.reshape(t, (n, cfg.num_channels * cfg.n_feat()))  # noqa: E731
        if cfg.attention_mode == "none":
            return ModelOutput(self._head("main", flat(h), rng), None, None)
        att = channel_attention(h, self.attention_params())
        if cfg.attention_mode == "single":
            return ModelOutput(self._head("main", flat(att.weighted), rng), None, att.alphas)
        main = self._head("main", flat(h), rng)
        aux = self._head("aux", att.pooled, rng)
        return ModelOutput(main, aux, att.alphas)

    __call__ = forward

    def attention_params(self) -> AttentionParams:
        return AttentionParams(self.params["attention.W"], self.params["attention.b"], self.params["attention.u"])

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Main-head probabilities and alphas for a whole array, batched, no graph kept."""
        probs, alphas = [], []
        for start in range(0, len(x), batch_size):
            out = self.forward(np.asarray(x[start : start + batch_size]))
            probs.append(out.main.data)
            if out.alphas is not None:
                alphas.append(out.alphas.data)
        return np.concatenate(probs), (np.concatenate(alphas) if alphas else None)


def _param_shapes(cfg: ModelConfig) -> "OrderedDict[str, Tuple[Tuple[int, ...], int, int]]":
    """name -> (shape, fan_in, fan_out); fan of -1 marks a zero-initialised bias."""
    shapes: "OrderedDict[str, Tuple[Tuple[int, ...], int, int]]" = OrderedDict()
    for s, spec in enumerate(cfg.conv_specs()):
        k, fi, fo = spec.kernel_len, spec.in_features, spec.out_features
        shapes[f"conv{s}.weight"] = ((spec.num_banks, fo, fi, k), fi * k, fo * k)
        shapes[f"conv{s}.bias"] = ((spec.num_banks, fo), -1, -1)
    n_feat = cfg.n_feat()
    if cfg.attention_mode != "none":
        shapes["attention.W"] = ((cfg.d_a, n_feat), n_feat, cfg.d_a)
        shapes["attention.b"] = ((cfg.d_a,), -1, -1)
        shapes["attention.u"] = ((cfg.d_a,), cfg.d_a, 1)
    for head, width_in in cfg.head_inputs().items():
        dims = [width_in] + list(cfg.head_widths) + [cfg.num_classes]
        for j in range(len(dims) - 1):
            shapes[f"{head}.dense{j}.weight"] = ((dims[j], dims[j + 1]), dims[j], dims[j + 1])
            shapes[f"{head}.dense{j}.bias"] = ((dims[j + 1],), -1, -1)
    return shapes


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, (shape, fan_in, fan_out) in _param_shapes(cfg).items():
        if fan_in < 0:
            data = np.zeros(shape)
        else:
            data = glorot_uniform(rng, shape, fan_in, fan_out)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(cfg, params)


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter total for ``cfg``."""
    cfg.validate()
    total = sum(spec.param_count() for spec in cfg.conv_specs())
    if cfg.attention_mode != "none":
        total += cfg.d_a * cfg.n_feat() + 2 * cfg.d_a
    for width_in in cfg.head_inputs().values():
        dims = [width_in] + list(cfg.head_widths) + [cfg.num_classes]
        total += sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    return total


def default_grid(num_channels: int = 6, num_timesteps: int = 21, num_classes: int = 11,
                 channel_groups: Optional[Sequence[Sequence[int]]] = None) -> List[ModelConfig]:
    """The Sdeep model grid plus a no-attention baseline, at this package's default widths."""
    groups = [list(g) for g in (channel_groups if channel_groups is not None else S2_GROUPS)]
    multi_scale = dict(strategy="i", conv_widths=[64, 128], kernel_lens=[7, 7])
    full_scale = dict(strategy="ii", conv_widths=[128, 64, 32], kernel_lens=[9, 9, 9])
    rows = [
        ("Sdeep-A-Multi-i", "A", "multi", multi_scale),
        ("Sdeep-A-Single-i", "A", "single", multi_scale),
        ("Sdeep-B-Multi-ii", "B", "multi", full_scale),
        # C: the full group-shared chain followed by one stage common to all channels
        ("Sdeep-C-Multi-ii", "C", "multi",
         dict(strategy="ii", conv_widths=[128, 64, 32, 32], kernel_lens=[9, 9, 9, 9], common_stages=1)),
        ("Baseline-A-None-ii", "A", "none", full_scale),
    ]
    grid = []
    for name, extraction, mode, conv in rows:
        cfg = ModelConfig(
            name=name,
            extraction=extraction,
            attention_mode=mode,
            channel_groups=[list(g) for g in groups],
            num_channels=num_channels,
            num_timesteps=num_timesteps,
            num_classes=num_classes,
            **{k: (list(v) if isinstance(v, list) else v) for k, v in conv.items()},
        )
        grid.append(cfg.validate())
    return grid


def preset(name: str, **overrides) -> ModelConfig:
    """Grid config called ``name`` with selected fields replaced."""
    grid_kw = {k: overrides[k] for k in ("num_channels", "num_timesteps", "num_classes", "channel_groups")
               if k in overrides}
    for cfg in default_grid(**grid_kw):
        if cfg.name == name:
            rest = {k: v for k, v in overrides.items() if k not in grid_kw}
            return dataclasses.replace(cfg, **rest).validate()
    names = ", ".join(c.name for c in default_grid())
    raise ConfigError(f"unknown architecture preset {name!r}; choose one of: {names}")
