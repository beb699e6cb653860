"""Depth and normal evaluation metrics, ground-truth normals and naive normal baselines.

Depth metrics follow the standard monocular protocol: optional median scale
correction (ratio of medians), clamping to ``[1e-3, cap]``, then

* ``abs_rel = mean(|p - g| / g)``, ``sq_rel = mean((p - g)^2 / g)``
* ``rmse = sqrt(mean((p - g)^2))``, ``rmse_log = sqrt(mean((ln p - ln g)^2))``
* ``delta_k`` = fraction of pixels with ``max(p/g, g/p) < 1.25**k``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .camera import CameraIntrinsics
from .consistency import FALLBACK_NORMAL, EdgeWeights, _border_index, depth_to_normal

DEPTH_FIELDS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta_1", "delta_2", "delta_3")
NORMAL_FIELDS = ("mean_deg", "median_deg", "pct_11_25", "pct_22_5", "pct_30")
MIN_DEPTH = 1e-3
UNIT_TOL = 1e-3


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta_1: float
    delta_2: float
    delta_3: float

    def as_dict(self) -> dict:
        return asdict(self)

    def row(self) -> list[float]:
        return [getattr(self, k) for k in DEPTH_FIELDS]


@dataclass(frozen=True)
class NormalMetrics:
    mean_deg: float
    median_deg: float
    pct_11_25: float
    pct_22_5: float
    pct_30: float

    def as_dict(self) -> dict:
        return asdict(self)

    def row(self) -> list[float]:
        return [getattr(self, k) for k in NORMAL_FIELDS]


def _mask(shape, valid_mask):
    if valid_mask is None:
        return np.ones(shape, dtype=bool)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if valid_mask.shape != shape:
        raise ValueError(f"mask shape {valid_mask.shape} does not match {shape}")
    return valid_mask


def depth_metrics(pred, gt, cap: float = 80.0, scale_correct: bool = False,
                  valid_mask=None) -> DepthMetrics:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    valid = _mask(gt.shape, valid_mask) & np.isfinite(gt) & (gt > 0) & np.isfinite(pred)
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    p, g = pred[valid], gt[valid]
    if scale_correct:
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, MIN_DEPTH, cap)
    g = np.clip(g, MIN_DEPTH, cap)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta_1=float(np.mean(ratio < 1.25)),
        delta_2=float(np.mean(ratio < 1.25**2)),
        delta_3=float(np.mean(ratio < 1.25**3)),
    )


def angular_error_deg(pred, gt) -> np.ndarray:
    dots = np.sum(np.asarray(pred, dtype=float) * np.asarray(gt, dtype=float), axis=-1)
    return np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))


def normal_metrics(pred, gt, valid_mask=None) -> NormalMetrics:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError("normal maps must have matching shapes ending in 3")
    valid = _mask(gt.shape[:-1], valid_mask)
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    p, g = pred[valid], gt[valid]
    for name, x in (("prediction", p), ("ground truth", g)):
        dev = np.abs(np.linalg.norm(x, axis=-1) - 1.0)
        if not np.all(dev <= UNIT_TOL):
            raise ValueError(f"{name} normals are not unit length (max deviation {np.nanmax(dev):.3g})")
    ang = angular_error_deg(p, g)
    return NormalMetrics(
        mean_deg=float(np.mean(ang)),
        median_deg=float(np.median(ang)),
        pct_11_25=float(np.mean(ang < 11.25)),
        pct_22_5=float(np.mean(ang < 22.5)),
        pct_30=float(np.mean(ang < 30.0)),
    )


def gt_normals_from_depth(gt_depth, K: CameraIntrinsics, valid_mask=None):
    """Ground-truth normals from depth with uniform weights.

    Returns ``(normals, valid)``. A pixel is valid when its depth and every
    depth in the stencil that produced its normal are valid.
    """
    depth = np.asarray(gt_depth, dtype=float)
    h, w = depth.shape
    ok = _mask(depth.shape, valid_mask) & np.isfinite(depth) & (depth > 0)
    filled = np.where(ok, depth, 1.0)
    res = depth_to_normal(filled, K, EdgeWeights.uniform(h, w))
    stencil = np.ones((h - 2, w - 2), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            stencil &= ok[1 + dr : h - 1 + dr, 1 + dc : w - 1 + dc]
    rr, cc = _border_index(h, w)
    valid = ok & stencil[rr, cc] & ~res.degenerate
    normals = np.where(valid[..., None], res.normals, np.nan)
    return normals, valid


@dataclass
class Baseline:
    normals: np.ndarray
    degenerate: bool = False


def _mean_normal(gt, valid_mask=None) -> Baseline:
    gt = np.asarray(gt, dtype=float)
    valid = _mask(gt.shape[:-1], valid_mask) & np.all(np.isfinite(gt), axis=-1)
    m = gt[valid].sum(axis=0) if valid.any() else np.zeros(3)
    norm = np.linalg.norm(m)
    if norm < 1e-9 * max(int(valid.sum()), 1):
        return Baseline(np.broadcast_to(FALLBACK_NORMAL, gt.shape).copy(), True)
    return Baseline(np.broadcast_to(m / norm, gt.shape).copy())


def predefined_scene(height: int, width: int) -> np.ndarray:
    """Four triangles cut by the image diagonals: bottom faces up, left faces
    right, right faces left, top faces the camera (camera frame, y down)."""
    b, a = np.mgrid[0:height, 0:width].astype(float)
    a = (a + 0.5) / width - 0.5
    b = (b + 0.5) / height - 0.5
    out = np.empty((height, width, 3))
    out[:] = (1.0, 0.0, 0.0)  # left region
    out[a > 0] = (-1.0, 0.0, 0.0)
    out[b >= np.abs(a)] = (0.0, -1.0, 0.0)
    out[-b >= np.abs(a)] = (0.0, 0.0, -1.0)
    return out


def baseline_normals(kind: str, gt=None, size=None, valid_mask=None) -> Baseline:
    """Naive normal predictions: ``gt_mean`` or ``predefined_scene``."""
    if kind == "gt_mean":
        if gt is None:
            raise ValueError("gt_mean needs ground-truth normals")
        return _mean_normal(gt, valid_mask)
    if kind == "predefined_scene":
        if size is None:
            if gt is None:
                raise ValueError("predefined_scene needs a size or a ground-truth map")
            size = np.shape(gt)[:2]
        return Baseline(predefined_scene(*size))
    raise ValueError(f"unknown baseline {kind!r}; choose gt_mean or predefined_scene")
