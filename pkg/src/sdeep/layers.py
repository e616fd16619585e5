"""Layer building blocks: shared temporal convolutions, dense layers, channel attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ConvBlockSpec:
    """One temporal convolution stage.

    ``sharing_map[c]`` is the index of the weight bank used for channel ``c``.
    """

    kernel_len: int
    in_features: int
    out_features: int
    sharing_map: Tuple[int, ...]
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel_len < 1:
            raise ValueError(f"kernel_len must be >= 1, got {self.kernel_len}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError("feature counts must be positive")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.padding == "same" and self.kernel_len % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel, got {self.kernel_len}")
        banks = sorted(set(self.sharing_map))
        if not self.sharing_map or banks != list(range(len(banks))):
            raise ValueError(f"sharing_map must use banks 0..n-1 without gaps, got {self.sharing_map}")

    @property
    def num_banks(self) -> int:
        return len(set(self.sharing_map))

    @property
    def num_channels(self) -> int:
        return len(self.sharing_map)

    def output_len(self, t: int) -> int:
        if self.padding == "same":
            return -(-t // self.stride)
        if t < self.kernel_len:
            return 0
        return (t - self.kernel_len) // self.stride + 1

    def param_count(self) -> int:
        return self.num_banks * (self.out_features * self.in_features * self.kernel_len + self.out_features)


class AttentionParams(NamedTuple):
    """Additive attention parameters: W (d_a, n_feat), b (d_a,), u (d_a,)."""

    W: Tensor
    b: Tensor
    u: Tensor

    def check(self) -> None:
        d_a = self.W.shape[0] if self.W.ndim == 2 else -1
        if self.W.ndim != 2 or self.b.shape != (d_a,) or self.u.shape != (d_a,) or d_a < 1:
            raise ShapeError(
                f"attention params inconsistent: W{self.W.shape}, b{self.b.shape}, u{self.u.shape}"
            )


class AttentionOutput(NamedTuple):
    alphas: Tensor  # (N, B)
    weighted: Tensor  # (N, B, n_feat)
    pooled: Tensor  # (N, n_feat)


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def conv_temporal(x: Tensor, spec: ConvBlockSpec, weight: Tensor, bias: Tensor) -> Tensor:
    """Convolve each channel of ``x`` (N, B, T, F_in) with its mapped bank."""
    if x.ndim != 4:
        raise ShapeError(f"conv_temporal: expected (N, B, T, F_in) input, got {x.shape}")
    if x.shape[1] != spec.num_channels:
        raise ShapeError(f"conv_temporal: input has {x.shape[1]} channels, spec maps {spec.num_channels}")
    if weight.shape[0] < spec.num_banks:
        raise ShapeError(f"conv_temporal: sharing map needs {spec.num_banks} banks, got {weight.shape[0]}")
    expected = (spec.out_features, spec.in_features, spec.kernel_len)
    if weight.shape[1:] != expected:
        raise ShapeError(f"conv_temporal: bank shape {weight.shape[1:]} != {expected}")
    return T.conv_temporal(x, weight, bias, spec.sharing_map, stride=spec.stride, padding=spec.padding)


_ACTIVATIONS = {"none": None, "relu": T.relu, "tanh": T.tanh}


def dense(x: Tensor, W: Tensor, b: Tensor, activation: str = "none") -> Tensor:
    """activation(x @ W + b) row-wise."""
    try:
        act = _ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: x{x.shape} @ W{W.shape} + b{b.shape} do not agree")
    out = T.add(T.matmul(x, W), b)
    return act(out) if act is not None else out


def channel_attention(h: Tensor, p: AttentionParams) -> AttentionOutput:
    """Sigmoid-gated additive attention over channels.

    ``h`` is (N, B, n_feat).  Each channel gets an independent weight in
    (0, 1); weights are not normalised across channels.
    """
    p.check()
    if h.ndim != 3:
        raise ShapeError(f"channel_attention: expected (N, B, n_feat) features, got {h.shape}")
    if h.shape[-1] != p.W.shape[1]:
        raise ShapeError(f"channel_attention: feature length {h.shape[-1]} != W columns {p.W.shape[1]}")
    hidden = T.tanh(T.add(T.matmul(h, T.transpose(p.W, (1, 0))), p.b))  # (N, B, d_a)
    alphas = T.sigmoid(T.matmul(hidden, p.u))  # (N, B)
    weighted = T.mul(T.reshape(alphas, alphas.shape + (1,)), h)
    pooled = T.sum_(weighted, axis=1)
    return AttentionOutput(alphas, weighted, pooled)


def dropout_mask(rng: Optional[np.random.Generator], shape: Tuple[int, ...], rate: float) -> Optional[np.ndarray]:
    """Inverted-dropout multipliers, or None when dropout is inactive."""
    if rng is None or rate <= 0.0:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep
