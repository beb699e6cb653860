"""Edge-aware depth-to-normal and normal-to-depth layers with their VJPs.

Both layers work on the 8-neighbourhood. Offsets are ``(d_row, d_col)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics

NEIGHBOR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
_OFFSET_INDEX = {o: k for k, o in enumerate(NEIGHBOR_OFFSETS)}

# Each pair is 2D-perpendicular and the second offset is the first rotated a
# quarter turn, so every cross product faces the camera (-z) on a
# fronto-parallel plane.
NEIGHBOR_PAIRS = (
    ((0, -1), (1, 0)),
    ((1, -1), (1, 1)),
    ((0, 1), (-1, 0)),
    ((-1, 1), (-1, -1)),
)

DEGENERATE_NORM = 1e-12
EPS_RAY = 1e-6
FALLBACK_NORMAL = np.array([0.0, 0.0, -1.0])


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    return image if image.ndim == 2 else image.mean(axis=-1)


@dataclass
class EdgeWeights:
    """Per-pixel weights toward each of the 8 neighbours.

    ``weights[k, r, c]`` couples pixel ``(r, c)`` with ``(r, c) + NEIGHBOR_OFFSETS[k]``;
    it is 0 where that neighbour falls outside the image (see ``inside``).
    """

    weights: np.ndarray  # (8, H, W)
    inside: np.ndarray  # (8, H, W) bool
    alpha: float

    def of(self, offset) -> np.ndarray:
        return self.weights[_OFFSET_INDEX[tuple(offset)]]

    @classmethod
    def uniform(cls, height: int, width: int) -> "EdgeWeights":
        return edge_weights(np.zeros((height, width)), 0.0)


def _pair_slices(height: int, width: int, offset):
    """Slices selecting pixels ``j`` and their neighbours ``j + offset`` (both in bounds)."""
    dr, dc = offset
    rj = slice(max(0, -dr), height - max(0, dr))
    cj = slice(max(0, -dc), width - max(0, dc))
    ri = slice(max(0, dr), height + min(0, dr))
    ci = slice(max(0, dc), width + min(0, dc))
    return (rj, cj), (ri, ci)


def edge_weights(image: np.ndarray, alpha: float = 0.1) -> EdgeWeights:
    """``w = exp(-alpha * |I(neighbour) - I(centre)|)`` on grayscale intensities."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    gray = to_gray(image)
    h, w = gray.shape
    weights = np.zeros((8, h, w))
    inside = np.zeros((8, h, w), dtype=bool)
    for k, off in enumerate(NEIGHBOR_OFFSETS):
        sj, si = _pair_slices(h, w, off)
        inside[k][sj] = True
        weights[k][sj] = np.exp(-alpha * np.abs(gray[si] - gray[sj]))
    return EdgeWeights(weights, inside, float(alpha))


@dataclass
class NormalResult:
    normals: np.ndarray  # (H, W, 3) unit vectors
    degenerate: np.ndarray  # (H, W) bool
    raw: np.ndarray  # unnormalised interior sums, (H-2, W-2, 3)


def _interior(offset, height, width):
    dr, dc = offset
    return slice(1 + dr, height - 1 + dr), slice(1 + dc, width - 1 + dc)


def _border_index(height: int, width: int):
    rows = np.clip(np.arange(height) - 1, 0, height - 3)
    cols = np.clip(np.arange(width) - 1, 0, width - 3)
    return np.meshgrid(rows, cols, indexing="ij")


def depth_to_normal(depth: np.ndarray, K: CameraIntrinsics, weights: EdgeWeights | None = None) -> NormalResult:
    """Normals as the normalised sum of weighted cross products over 4 neighbour pairs.

    Border pixels copy the nearest interior normal. Where the sum vanishes the
    normal falls back to ``(0, 0, -1)`` and the pixel is flagged degenerate.
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    if h < 3 or w < 3:
        raise ValueError("depth_to_normal needs at least a 3x3 depth map")
    K.check_shape(depth.shape)
    if weights is None:
        weights = EdgeWeights.uniform(h, w)
    phi = depth[..., None] * K.rays()
    centre = phi[1:-1, 1:-1]
    n = np.zeros_like(centre)
    for o0, o1 in NEIGHBOR_PAIRS:
        a = weights.of(o0)[1:-1, 1:-1, None] * (phi[_interior(o0, h, w)] - centre)
        b = weights.of(o1)[1:-1, 1:-1, None] * (phi[_interior(o1, h, w)] - centre)
        n += np.cross(a, b)
    norm = np.linalg.norm(n, axis=-1)
    degen = ~(norm >= DEGENERATE_NORM)
    unit = np.where(degen[..., None], FALLBACK_NORMAL, n / np.where(degen, 1.0, norm)[..., None])
    rr, cc = _border_index(h, w)
    return NormalResult(unit[rr, cc], degen[rr, cc], n)


def depth_to_normal_vjp(
    depth: np.ndarray,
    K: CameraIntrinsics,
    weights: EdgeWeights | None,
    upstream: np.ndarray,
    result: NormalResult | None = None,
) -> np.ndarray:
    """Gradient of ``sum(upstream * normals)`` with respect to depth."""
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    if weights is None:
        weights = EdgeWeights.uniform(h, w)
    if result is None:
        result = depth_to_normal(depth, K, weights)
    rays = K.rays()
    phi = depth[..., None] * rays
    centre = phi[1:-1, 1:-1]

    rr, cc = _border_index(h, w)
    g_int = np.zeros((h - 2, w - 2, 3))
    np.add.at(g_int, (rr, cc), upstream)

    n = result.raw
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    degen = ~(norm[..., 0] >= DEGENERATE_NORM)
    safe = np.where(degen[..., None], 1.0, norm)
    unit = n / safe
    gn = (g_int - unit * np.sum(unit * g_int, axis=-1, keepdims=True)) / safe
    gn[degen] = 0.0

    gphi = np.zeros_like(phi)
    for o0, o1 in NEIGHBOR_PAIRS:
        w0 = weights.of(o0)[1:-1, 1:-1, None]
        w1 = weights.of(o1)[1:-1, 1:-1, None]
        a = w0 * (phi[_interior(o0, h, w)] - centre)
        b = w1 * (phi[_interior(o1, h, w)] - centre)
        ga = w0 * np.cross(b, gn)
        gb = w1 * np.cross(gn, a)
        gphi[_interior(o0, h, w)] += ga
        gphi[_interior(o1, h, w)] += gb
        gphi[1:-1, 1:-1] -= ga + gb
    return np.sum(gphi * rays, axis=-1)


@dataclass
class DepthResult:
    depth: np.ndarray
    weight_sum: np.ndarray  # sum of weights of the votes that were kept


def _plane_votes(depth, normals, K, weights, eps_ray):
    """Yield, per neighbour offset, the slices and planar depth votes ``D_e(j | i)``."""
    h, w = depth.shape
    K.check_shape(depth.shape)
    rays = K.rays()
    num = np.sum(normals * rays, axis=-1) * depth  # N(i) . phi(i)
    for k, off in enumerate(NEIGHBOR_OFFSETS):
        sj, si = _pair_slices(h, w, off)
        den = np.sum(normals[si] * rays[sj], axis=-1)
        keep = np.abs(den) >= eps_ray
        safe = np.where(keep, den, 1.0)
        wt = np.where(keep, weights.weights[k][sj], 0.0)
        yield sj, si, num[si], safe, wt, rays


def normal_to_depth(
    depth: np.ndarray,
    normals: np.ndarray,
    K: CameraIntrinsics,
    weights: EdgeWeights | None = None,
    eps_ray: float = EPS_RAY,
) -> DepthResult:
    """Re-estimate depth by intersecting each pixel's ray with its neighbours' tangent planes.

    The vote of neighbour ``i`` for pixel ``j`` is the depth at which the ray of
    ``j`` meets the plane through ``phi(i)`` with normal ``N(i)``:
    ``(N(i) . phi(i)) / (N(i) . K^-1 h(j))``. Votes are fused with normalised
    edge weights; grazing votes are dropped, and a pixel with no votes keeps
    its input depth.
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    if weights is None:
        weights = EdgeWeights.uniform(h, w)
    acc = np.zeros((h, w))
    wsum = np.zeros((h, w))
    for sj, si, num_i, den, wt, _ in _plane_votes(depth, normals, K, weights, eps_ray):
        acc[sj] += wt * num_i / den
        wsum[sj] += wt
    has = wsum > 0
    out = np.where(has, acc / np.where(has, wsum, 1.0), depth)
    return DepthResult(out, wsum)


def normal_to_depth_vjp(
    depth: np.ndarray,
    normals: np.ndarray,
    K: CameraIntrinsics,
    weights: EdgeWeights | None,
    upstream: np.ndarray,
    eps_ray: float = EPS_RAY,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * D_n)`` with respect to ``(depth, normals)``."""
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    if weights is None:
        weights = EdgeWeights.uniform(h, w)
    wsum = np.zeros((h, w))
    for sj, _, _, _, wt, _ in _plane_votes(depth, normals, K, weights, eps_ray):
        wsum[sj] += wt
    has = wsum > 0
    grad_depth = np.where(has, 0.0, upstream)
    gj = np.where(has, upstream / np.where(has, wsum, 1.0), 0.0)

    g_num = np.zeros((h, w))
    grad_normals = np.zeros_like(normals, dtype=float)
    for sj, si, num_i, den, wt, rays in _plane_votes(depth, normals, K, weights, eps_ray):
        t = gj[sj] * wt
        g_num[si] += t / den
        g_den = -t * num_i / den**2
        grad_normals[si] += g_den[..., None] * rays[sj]
    rays = K.rays()
    grad_depth = grad_depth + g_num * np.sum(normals * rays, axis=-1)
    grad_normals += g_num[..., None] * depth[..., None] * rays
    return grad_depth, grad_normals
