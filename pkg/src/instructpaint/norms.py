"""Feature-map normalizations and spectral weight normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, matmul, tsqrt

VAR_EPS = 1e-5  # variance epsilon shared by all normalizations


def instance_norm(x, gamma=None, beta=None, eps=VAR_EPS):
    """Normalize [B, C, H, W] to zero mean / unit variance per channel map,
    then optionally apply a per-channel affine (gamma, beta)."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    xhat = xc / tsqrt(var + eps)
    if gamma is not None:
        g = gamma if isinstance(gamma, Tensor) else Tensor(np.asarray(gamma, dtype=x.dtype))
        xhat = xhat * g.reshape((1, -1, 1, 1))
    if beta is not None:
        b = beta if isinstance(beta, Tensor) else Tensor(np.asarray(beta, dtype=x.dtype))
        xhat = xhat + b.reshape((1, -1, 1, 1))
    return xhat


def adain(content, style_mean, style_std, eps=VAR_EPS):
    """Restyle [B, C, H, W] so each channel has the given mean and std.

    style_mean/style_std: [C] or [B, C]; std must be positive.
    """
    std_vals = style_std.data if isinstance(style_std, Tensor) else np.asarray(style_std)
    if np.any(std_vals <= 0):
        raise ValueError("adain: style_std must be positive per channel")
    m = style_mean if isinstance(style_mean, Tensor) else Tensor(np.asarray(style_mean, dtype=content.dtype))
    s = style_std if isinstance(style_std, Tensor) else Tensor(np.asarray(style_std, dtype=content.dtype))
    shape = (1, -1, 1, 1) if m.ndim == 1 else (m.shape[0], m.shape[1], 1, 1)
    xhat = instance_norm(content, eps=eps)
    return xhat * s.reshape(shape) + m.reshape(shape)


@dataclass
class SpectralState:
    """Power-iteration state for one normalized matrix (left vector u)."""

    u: np.ndarray
    n_power_iters: int = 1

    @classmethod
    def init(cls, rows, rng, dtype=np.float32, n_power_iters=1):
        u = rng.standard_normal(rows).astype(dtype)
        u /= np.linalg.norm(u) + 1e-12
        return cls(u=u, n_power_iters=n_power_iters)


def _power_iterate(w, u, n_iters):
    v = None
    for _ in range(n_iters):
        v = w.T @ u
        v /= np.linalg.norm(v) + 1e-12
        u = w @ v
        u /= np.linalg.norm(u) + 1e-12
    return u, v


def spectral_normalize(w, state, n_iters=None, update=True):
    """Divide a 2-D weight by its power-iteration largest singular value.

    Returns (w_sn, state', sigma). `w` may be a Tensor (sigma joins the graph
    with u, v treated as constants) or a plain array. Near-zero matrices are
    returned unchanged with sigma = 1. Non-2-D input is an error; reshape
    convolution kernels to [out, in*kh*kw] first.
    """
    is_tensor = isinstance(w, Tensor)
    wd = w.data if is_tensor else np.asarray(w)
    if wd.ndim != 2:
        raise ValueError(f"spectral_normalize: expected a 2-D matrix, got shape {wd.shape}")
    if np.linalg.norm(wd) < 1e-12:
        sigma = 1.0
        return (w, state, sigma)
    n = state.n_power_iters if n_iters is None else n_iters
    u, v = _power_iterate(wd, state.u.astype(wd.dtype), max(n, 1))
    new_state = SpectralState(u=u if update else state.u, n_power_iters=state.n_power_iters)
    if is_tensor:
        ut = Tensor(u)
        vt = Tensor(v)
        sigma = matmul(ut, matmul(w, vt))  # scalar tensor, grads flow into w
        w_sn = w / sigma
        return w_sn, new_state, float(sigma.data)
    sigma = float(u @ (wd @ v))
    return wd / sigma, new_state, sigma
