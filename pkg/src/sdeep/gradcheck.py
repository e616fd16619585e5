"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, backward


def _scalar(out: Tensor) -> float:
    if not isinstance(out, Tensor) or out.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ShapeError(f"finite_diff_check: function must return a scalar tensor, got {shape}")
    return float(out.data.reshape(()))


def relative_error(autodiff: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |n|) over all coordinates."""
    if autodiff.size == 0:
        return 0.0
    return float(np.max(np.abs(autodiff - numeric) / np.maximum(1.0, np.abs(numeric))))


def numeric_grad(
    f: Callable[[], Tensor],
    param: Tensor,
    step: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central differences of the zero-argument closure ``f`` w.r.t. ``param``.

    ``param.data`` is perturbed in place (without bumping its version) and
    restored.  Only ``coords`` (flat indices) are evaluated when given; the
    rest of the returned array is NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = _scalar(f())
        flat[i] = orig - step
        lo = _scalar(f())
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(param.shape)


def finite_diff_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``point``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64), requires_grad=True)
    out = f(x)
    _scalar(out)
    backward(out)
    auto = x.grad.copy()
    num = numeric_grad(lambda: f(x), x, step)
    return relative_error(auto, num)


def check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Per-parameter max relative error of autodiff vs central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values each call.
    With ``max_coords`` set, each tensor is probed at that many random flat
    coordinates drawn from ``rng``.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    _scalar(loss)
    backward(loss)
    auto = {name: p.grad.copy() for name, p in params.items()}
    errors = {}
    rng = rng if rng is not None else np.random.default_rng(0)
    for name, p in params.items():
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        num = numeric_grad(loss_fn, p, step, coords)
        mask = ~np.isnan(num)
        errors[name] = relative_error(auto[name][mask], num[mask])
    return errors
