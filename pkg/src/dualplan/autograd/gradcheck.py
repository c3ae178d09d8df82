"""Central finite-difference gradient checking (float64 only)."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_grad(fn, arrays, index: int, step: float = 1e-5) -> np.ndarray:
    """d fn / d arrays[index] by central differences; ``fn`` maps ndarrays to a float."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = target[i]
        target[i] = orig + step
        fp = fn(*base)
        target[i] = orig - step
        fm = fn(*base)
        target[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) taken jointly over the whole array.

    ``floor`` turns the measure into an absolute error for gradients that
    vanish identically (e.g. key biases under softmax shift invariance).
    """
    denom = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / denom


def check(fn, arrays, step: float = 1e-5) -> list[float]:
    """Compare autograd against finite differences for a scalar ``fn`` of tensors.

    ``fn`` receives one :class:`Tensor` per array and returns a scalar tensor.
    Returns the relative error for each input.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()

    def scalar(*arrs):
        return float(fn(*[Tensor(a) for a in arrs]).data)

    errs = []
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errs.append(relative_error(analytic, numeric_grad(scalar, arrays, i, step)))
    return errs


def check_module(module, loss_fn, step: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of every parameter of ``module`` (float64).

    ``loss_fn()`` must rebuild the forward pass from the module's current
    parameter values and return a scalar tensor.
    """
    module.zero_grad()
    loss_fn().backward()
    errs = {}
    for name, p in module.named_parameters():
        if p.frozen:
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(loss_fn().data)
            flat[j] = orig - step
            fm = float(loss_fn().data)
            flat[j] = orig
            num.reshape(-1)[j] = (fp - fm) / (2.0 * step)
        errs[name] = relative_error(analytic, num)
    module.zero_grad()
    return errs
