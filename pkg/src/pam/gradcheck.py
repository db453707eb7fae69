"""Central finite-difference checking of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    """Raised when the checked function produces a non-finite value."""

    def __init__(self, msg: str, input_index: int, coordinate: tuple):
        super().__init__(msg)
        self.input_index = input_index
        self.coordinate = coordinate


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               per_input: bool = False):
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``f`` is re-evaluated after perturbing each coordinate of every tensor in
    ``inputs`` in place. Returns the maximum over coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``; with
    ``per_input`` a list with one maximum per input is returned instead.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs double-precision inputs")
        t.requires_grad = True
        t.grad = None

    out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check: function must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: non-finite output at the unperturbed point", -1, ())
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    errors = []
    for ti, t in enumerate(inputs):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = float(f().data)
            flat[idx] = orig - step
            fm = float(f().data)
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                coord = np.unravel_index(idx, t.shape)
                raise NonFiniteError(
                    f"grad_check: non-finite value perturbing input {ti} at {coord}", ti, coord)
            numeric.reshape(-1)[idx] = (fp - fm) / (2 * step)
        err = relative_error(analytic[ti], numeric)
        errors.append(float(err.max()) if err.size else 0.0)
        t.grad = None
    return errors if per_input else max(errors)
