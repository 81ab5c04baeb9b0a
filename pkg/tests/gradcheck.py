"""Shared finite-difference gradient checking helpers."""

import numpy as np

from denserecon.autodiff import Tensor


def finite_diff(fn, x: np.ndarray, coords, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar fn at the given flat coordinates."""
    grads = np.zeros(len(coords))
    flat = x.reshape(-1)
    for n, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + eps
        hi = fn(x)
        flat[c] = orig - eps
        lo = fn(x)
        flat[c] = orig
        grads[n] = (hi - lo) / (2 * eps)
    return grads


def check_gradient(fn_tensor, x: np.ndarray, n_coords: int = 20, rtol: float = 1e-4,
                   seed: int = 0):
    """Compare reverse-mode gradient of a scalar graph against central FD."""
    rng = np.random.default_rng(seed)
    t = Tensor(x.copy(), requires_grad=True)
    out = fn_tensor(t)
    out.backward()
    analytic = t.grad.reshape(-1)
    coords = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
    numeric = finite_diff(lambda arr: fn_tensor(Tensor(arr)).item(), x.copy(), coords)
    for c, num in zip(coords, numeric):
        ana = analytic[c]
        denom = max(abs(num), abs(ana), 1e-8)
        assert abs(num - ana) / denom < rtol, f"coord {c}: {ana} vs {num}"


def check_param_gradient(make_loss, param, n_coords: int = 20, rtol: float = 1e-4,
                         seed: int = 0):
    """FD-check d(loss)/d(param) for a ParamStore-owned tensor.

    ``make_loss()`` must rebuild the scalar loss graph from scratch using
    the current ``param.data``.
    """
    rng = np.random.default_rng(seed)
    param.zero_grad()
    loss = make_loss()
    loss.backward()
    analytic = param.grad.reshape(-1)
    coords = rng.choice(param.data.size, size=min(n_coords, param.data.size),
                        replace=False)

    def scalar(arr):
        param.data = arr.reshape(param.data.shape)
        return make_loss().item()

    base = param.data.copy()
    numeric = finite_diff(scalar, base.reshape(-1), coords)
    param.data = base
    for c, num in zip(coords, numeric):
        ana = analytic[c]
        denom = max(abs(num), abs(ana), 1e-8)
        assert abs(num - ana) / denom < rtol, f"coord {c}: {ana} vs {num}"
