"""Differentiable bilinear sampling with zero padding and validity masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SampledImage:
    values: np.ndarray  # (H, W, C); invalid pixels hold 0
    valid: np.ndarray  # (H, W) bool


def _as_channels(src: np.ndarray) -> np.ndarray:
    src = np.asarray(src, dtype=float)
    return src[..., None] if src.ndim == 2 else src


def _corners(src_shape, u, v, valid_in):
    h, w = src_shape[:2]
    if h < 2 or w < 2:
        raise ValueError("bilinear sampling needs a source of at least 2x2")
    valid = np.asarray(valid_in, dtype=bool) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    # Lower corner is floor(), clamped so the far edge reuses the last cell with weight 1.
    u0 = np.clip(np.floor(np.where(valid, u, 0.0)), 0, w - 2).astype(np.intp)
    v0 = np.clip(np.floor(np.where(valid, v, 0.0)), 0, h - 2).astype(np.intp)
    fu = np.where(valid, u - u0, 0.0)
    fv = np.where(valid, v - v0, 0.0)
    return valid, u0, v0, fu, fv


def bilinear_weights(fu: np.ndarray, fv: np.ndarray):
    """Area weights of the four corners (00, 01, 10, 11) as (row, col) offsets."""
    return (1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv


def bilinear_sample(src: np.ndarray, u: np.ndarray, v: np.ndarray, valid_in=True) -> SampledImage:
    """Sample ``src`` at continuous coordinates ``(u, v)`` = (column, row).

    A sample is valid iff ``valid_in`` holds and all four neighbours lie inside
    the source. Integer coordinates reproduce the source value exactly.
    """
    src = _as_channels(src)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    valid, u0, v0, fu, fv = _corners(src.shape, u, v, np.broadcast_to(valid_in, u.shape))
    w00, w01, w10, w11 = bilinear_weights(fu[..., None], fv[..., None])
    out = (
        w00 * src[v0, u0]
        + w01 * src[v0, u0 + 1]
        + w10 * src[v0 + 1, u0]
        + w11 * src[v0 + 1, u0 + 1]
    )
    out = np.where(valid[..., None], out, 0.0)
    return SampledImage(out, valid)


def bilinear_sample_vjp(src: np.ndarray, u: np.ndarray, v: np.ndarray, upstream: np.ndarray, valid_in=True):
    """Reverse-mode derivative of :func:`bilinear_sample`.

    Returns ``(grad_src, grad_u, grad_v)``. The coordinate derivative is the
    right-hand limit at lattice points (left-hand on the far source edge).
    """
    src = _as_channels(src)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    upstream = _as_channels(upstream)
    h, w, c = src.shape
    valid, u0, v0, fu, fv = _corners(src.shape, u, v, np.broadcast_to(valid_in, u.shape))
    g = np.where(valid[..., None], upstream, 0.0)

    s00 = src[v0, u0]
    s01 = src[v0, u0 + 1]
    s10 = src[v0 + 1, u0]
    s11 = src[v0 + 1, u0 + 1]
    fu3 = fu[..., None]
    fv3 = fv[..., None]
    grad_u = np.sum(g * ((1 - fv3) * (s01 - s00) + fv3 * (s11 - s10)), axis=-1)
    grad_v = np.sum(g * ((1 - fu3) * (s10 - s00) + fu3 * (s11 - s01)), axis=-1)

    # Scatter with bincount: fixed summation order, so the result is deterministic.
    w00, w01, w10, w11 = bilinear_weights(fu3, fv3)
    grad_src = np.zeros((h * w, c))
    for dv, du, wt in ((0, 0, w00), (0, 1, w01), (1, 0, w10), (1, 1, w11)):
        idx = ((v0 + dv) * w + (u0 + du)).ravel()
        contrib = (wt * g).reshape(-1, c)
        for ch in range(c):
            grad_src[:, ch] += np.bincount(idx, weights=contrib[:, ch], minlength=h * w)
    return grad_src.reshape(h, w, c), grad_u, grad_v
