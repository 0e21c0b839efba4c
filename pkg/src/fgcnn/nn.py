"""Shared dense kernels: affine maps, activations, batch norm, Adam, and
finite-difference gradient checking.

Plain numpy arrays are the only numeric carrier. Training runs float32 by
default; gradient checks run the same code at float64.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np


class NumericError(RuntimeError):
    """A kernel produced or received non-finite values, or training diverged."""


_DTYPES = {"f32": np.float32, "f64": np.float64}

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def as_dtype(precision: str) -> np.dtype:
    if precision not in _DTYPES:
        raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(_DTYPES)}")
    return np.dtype(_DTYPES[precision])


def check_finite(name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))
        coord = tuple(int(i) for i in bad[0])
        raise NumericError(f"{name}: non-finite value at coordinate {coord}")


# ---------------------------------------------------------------------------
# affine

def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b


def affine_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Gradients (dx, dw, db) for y = x @ w + b."""
    dx = grad @ w.T
    dw = x.T @ grad
    db = grad.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# activations

def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_grad_from_output(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(x.dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch form: never exponentiates a large positive argument.
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad_from_output(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


# ---------------------------------------------------------------------------
# batch normalization (2-D inputs; callers reshape)

@dataclass
class BnState:
    """Running statistics for one batch-norm site."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM


def init_bn_state(dim: int, dtype) -> BnState:
    return BnState(mean=np.zeros(dim, dtype=dtype), var=np.ones(dim, dtype=dtype))


def batchnorm_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray, state: BnState,
                      mode: str = "train"):
    """Normalize columns of x [n, d] to zero mean / unit variance, then scale and shift.

    Train mode uses in-batch statistics and returns an updated running-stat
    state; infer mode normalizes with the running statistics. Returns
    (out, cache, new_state); cache is None in infer mode.
    """
    if x.ndim != 2:
        raise ValueError(f"batchnorm expects 2-D input, got shape {x.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs batch size >= 2")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv_std
        out = xhat * g + b
        m = state.momentum
        new_state = BnState(
            mean=(m * state.mean + (1.0 - m) * mu).astype(x.dtype),
            var=(m * state.var + (1.0 - m) * var).astype(x.dtype),
            momentum=m,
        )
        return out, (xhat, inv_std, g), new_state
    if mode == "infer":
        xhat = (x - state.mean) / np.sqrt(state.var + BN_EPS)
        return xhat * g + b, None, state
    raise ValueError(f"unknown batchnorm mode {mode!r}")


def batchnorm_backward(grad: np.ndarray, cache):
    """Gradients (dx, dg, db) for train-mode batchnorm."""
    xhat, inv_std, g = cache
    n = grad.shape[0]
    dg = (grad * xhat).sum(axis=0)
    db = grad.sum(axis=0)
    dxhat = grad * g
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dg, db


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3


def adam_init(param: np.ndarray, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(m=np.zeros_like(param), v=np.zeros_like(param),
                     t=0, beta1=beta1, beta2=beta2, eps=eps, lr=lr)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState):
    """One bias-corrected Adam update. Pure: returns (new_param, new_state)."""
    if param.shape != grad.shape:
        raise ValueError(f"adam shape mismatch: param{param.shape} grad{grad.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, replace(state, m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# finite-difference gradient checking

def grad_check(f: Callable[[dict], tuple[float, dict]], params: dict,
               eps: float = 1e-5, max_coords_per_param: Optional[int] = None,
               rng: Optional[np.random.Generator] = None,
               skip: Optional[Callable[[str, tuple, float], bool]] = None) -> float:
    """Compare analytic gradients of f against central differences.

    f maps the params dict to (scalar loss, {name: grad array}) and must be
    deterministic. Coordinates may be subsampled per parameter via
    max_coords_per_param; skip(name, index, value) can exclude coordinates
    sitting on a kink. Returns the worst relative error
    |a - n| / max(|a|, |n|, 1e-8).
    """
    loss0, grads = f(params)
    if not np.isfinite(loss0):
        raise NumericError(f"grad_check: loss is non-finite at the base point ({loss0})")
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for name in sorted(params):
        p = params[name]
        if name not in grads:
            raise KeyError(f"grad_check: analytic gradient missing for {name!r}")
        check_finite(f"grad[{name}]", grads[name])
        n_coords = p.size
        if max_coords_per_param is not None and n_coords > max_coords_per_param:
            flat = rng.choice(n_coords, size=max_coords_per_param, replace=False)
        else:
            flat = np.arange(n_coords)
        for fi in flat:
            idx = np.unravel_index(fi, p.shape)
            v = p[idx]
            if skip is not None and skip(name, idx, float(v)):
                continue
            p[idx] = v + eps
            lp, _ = f(params)
            p[idx] = v - eps
            lm, _ = f(params)
            p[idx] = v
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"grad_check: non-finite loss perturbing {name}{idx}")
            numeric = (lp - lm) / (2.0 * eps)
            analytic = float(grads[name][idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
