"""Pinhole camera model, SE(3) pose algebra and the perspective warp.

Conventions: pixel coordinates are ``(u, v) = (column, row)`` with the origin
at the centre of the top-left pixel; the camera looks down ``+z`` and depth is
the z-component of the camera-frame point. Poses map target-camera points
into the source camera: ``X_s = R @ X_t + t``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

EPS_Z = 1e-6
_SMALL_ANGLE_SQ = 1e-2


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def halved(self) -> "CameraIntrinsics":
        """Intrinsics after a 2x2 area-mean downsample.

        A coarse pixel centre ``u'`` covers fine centres ``2u'`` and ``2u'+1``,
        so ``u' = (u - 0.5) / 2``. Trailing odd rows/columns are dropped.
        """
        return CameraIntrinsics(
            fx=self.fx / 2.0,
            fy=self.fy / 2.0,
            cx=max((self.cx - 0.5) / 2.0, 0.0),
            cy=max((self.cy - 0.5) / 2.0, 0.0),
            width=self.width // 2,
            height=self.height // 2,
        )

    def rays(self) -> np.ndarray:
        """``K^-1 h(x)`` for every pixel, shape (H, W, 3), z-component 1. Read-only."""
        return _ray_grid(self)

    def check_shape(self, shape) -> None:
        if tuple(shape[:2]) != (self.height, self.width):
            raise ValueError(
                f"field of shape {tuple(shape[:2])} does not match {self.height}x{self.width} intrinsics"
            )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )

    @classmethod
    def default(cls, height: int = 128, width: int = 416) -> "CameraIntrinsics":
        """KITTI-like intrinsics scaled to the requested image size."""
        return cls(
            fx=0.58 * width,
            fy=1.92 * height,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            width=width,
            height=height,
        )


@functools.lru_cache(maxsize=32)
def _ray_grid(K: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0 : K.height, 0 : K.width].astype(float)
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    rays.setflags(write=False)
    return rays


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


_GENERATORS = np.stack([hat(e) for e in np.eye(3)])


def _coefficients(s: float):
    """A, B, C and their derivatives with respect to ``s = theta**2``.

    A = sin(t)/t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3.
    """
    if s < _SMALL_ANGLE_SQ:
        a = 1 - s / 6 + s**2 / 120 - s**3 / 5040 + s**4 / 362880
        b = 0.5 - s / 24 + s**2 / 720 - s**3 / 40320 + s**4 / 3628800
        c = 1 / 6 - s / 120 + s**2 / 5040 - s**3 / 362880 + s**4 / 39916800
        da = -1 / 6 + s / 60 - s**2 / 1680 + s**3 / 90720
        db = -1 / 24 + s / 360 - s**2 / 13440 + s**3 / 907200
        dc = -1 / 120 + s / 2520 - s**2 / 120960 + s**3 / 9979200
        return a, b, c, da, db, dc
    theta = np.sqrt(s)
    cos = np.cos(theta)
    a = np.sin(theta) / theta
    b = (1 - cos) / s
    c = (1 - a) / s
    return a, b, c, (cos - a) / (2 * s), (a - 2 * b) / (2 * s), (b - 3 * c) / (2 * s)


@dataclass(frozen=True)
class PoseSE3:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @property
    def twist(self) -> np.ndarray:
        return se3_log(self)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        return PoseSE3(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def to_list(self) -> list[float]:
        """Row-major 3x4 ``[R|t]`` as 12 numbers."""
        return [float(x) for x in np.hstack([self.rotation, self.translation[:, None]]).ravel()]

    @classmethod
    def from_list(cls, values) -> "PoseSE3":
        m = np.asarray(values, dtype=float).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


def se3_exp(twist) -> PoseSE3:
    """Exponential map of a twist ``(omega, v)`` via the Rodrigues closed form."""
    twist = np.asarray(twist, dtype=float)
    w, v = twist[:3], twist[3:]
    a, b, c, *_ = _coefficients(float(w @ w))
    W = hat(w)
    W2 = W @ W
    rot = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return PoseSE3(rot, V @ v)


def se3_exp_jacobian(twist) -> tuple[PoseSE3, np.ndarray, np.ndarray]:
    """Pose plus derivatives ``dR/dxi`` (6, 3, 3) and ``dt/dxi`` (6, 3)."""
    twist = np.asarray(twist, dtype=float)
    w, v = twist[:3], twist[3:]
    a, b, c, da, db, dc = _coefficients(float(w @ w))
    W = hat(w)
    W2 = W @ W
    rot = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    d_rot = np.zeros((6, 3, 3))
    d_t = np.zeros((6, 3))
    for k in range(3):
        E = _GENERATORS[k]
        dW2 = E @ W + W @ E
        d_rot[k] = 2 * w[k] * (da * W + db * W2) + a * E + b * dW2
        dV = 2 * w[k] * (db * W + dc * W2) + b * E + c * dW2
        d_t[k] = dV @ v
    d_t[3:] = V.T
    return PoseSE3(rot, V @ v), d_rot, d_t


def twist_vjp(twist, grad_rotation: np.ndarray, grad_translation: np.ndarray) -> np.ndarray:
    """Pull ``dL/dR`` and ``dL/dt`` back to ``dL/dxi``."""
    _, d_rot, d_t = se3_exp_jacobian(twist)
    return np.einsum("kij,ij->k", d_rot, grad_rotation) + d_t @ grad_translation


def se3_log(pose: PoseSE3) -> np.ndarray:
    """Inverse of :func:`se3_exp` for rotation angles below pi."""
    R = pose.rotation
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos))
    if theta * theta < _SMALL_ANGLE_SQ:
        s = theta * theta
        w = vee(R - R.T) / 2.0 * (1 + s / 6 + 7 * s**2 / 360 + 31 * s**3 / 15120)
    elif theta > np.pi - 1e-3:
        # sin(theta) ~ 0: recover the axis from the symmetric part
        S = (R + R.T) / 2.0 - cos * np.eye(3)
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
        if axis @ vee(R - R.T) < 0:
            axis = -axis
        w = theta * axis / np.linalg.norm(axis)
    else:
        w = theta / (2.0 * np.sin(theta)) * vee(R - R.T)
    s = float(w @ w)
    a, b, *_ = _coefficients(s)
    W = hat(w)
    if s < _SMALL_ANGLE_SQ:
        d = 1 / 12 + s / 720 + s**2 / 30240 + s**3 / 1209600
    else:
        d = (1 - a / (2 * b)) / s
    v_inv = np.eye(3) - 0.5 * W + d * (W @ W)
    return np.concatenate([w, v_inv @ pose.translation])


def backproject(x, d: float, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel ``x = (u, v)`` at depth ``d`` to a camera-frame point."""
    if not d > 0:
        raise ValueError(f"depth must be positive, got {d}")
    u, v = x
    return d * (K.inverse @ np.array([u, v, 1.0]))


def project(p, K: CameraIntrinsics) -> tuple[np.ndarray, float]:
    p = np.asarray(p, dtype=float)
    q = K.matrix @ p
    return q[:2] / q[2], float(q[2])


def backproject_field(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Point field ``D(x) K^-1 h(x)`` of shape (H, W, 3)."""
    K.check_shape(np.shape(depth))
    return depth[..., None] * K.rays()


def warp_coords(x_t, d_t: float, pose: PoseSE3, K: CameraIntrinsics, eps_z: float = EPS_Z):
    """Warp one target pixel into the source view.

    Returns ``(x_s, z_s, valid)``; points with ``z_s <= eps_z`` are flagged
    invalid rather than raising.
    """
    q = pose.apply(backproject(x_t, d_t, K))
    z = float(q[2])
    if z <= eps_z:
        return np.full(2, np.nan), z, False
    if _is_identity(pose):
        return np.asarray(x_t, dtype=float).copy(), float(d_t), True
    return np.array([K.fx * q[0] / z + K.cx, K.fy * q[1] / z + K.cy]), z, True


def _is_identity(pose: PoseSE3) -> bool:
    return bool(np.array_equal(pose.rotation, np.eye(3)) and not pose.translation.any())


@dataclass
class WarpResult:
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    valid: np.ndarray
    points: np.ndarray  # target-frame points, (H, W, 3)
    transformed: np.ndarray  # source-frame points, (H, W, 3)


def warp_field(depth: np.ndarray, pose: PoseSE3, K: CameraIntrinsics, eps_z: float = EPS_Z) -> WarpResult:
    """Vectorised perspective warp of a whole depth map."""
    pts = backproject_field(depth, K)
    q = pts @ pose.rotation.T + pose.translation
    z = q[..., 2]
    valid = z > eps_z
    safe_z = np.where(valid, z, 1.0)
    if _is_identity(pose):
        # The exact answer is the pixel grid; the generic path is off by a few ulp.
        rows, cols = np.mgrid[0 : depth.shape[0], 0 : depth.shape[1]].astype(float)
        u = np.where(valid, cols, 0.0)
        v = np.where(valid, rows, 0.0)
    else:
        u = np.where(valid, K.fx * q[..., 0] / safe_z + K.cx, 0.0)
        v = np.where(valid, K.fy * q[..., 1] / safe_z + K.cy, 0.0)
    return WarpResult(u, v, z, valid, pts, q)


def warp_field_vjp(
    depth: np.ndarray,
    pose: PoseSE3,
    K: CameraIntrinsics,
    grad_u: np.ndarray,
    grad_v: np.ndarray,
    warp: WarpResult | None = None,
):
    """Reverse-mode derivative of :func:`warp_field`.

    Returns ``(grad_depth, grad_rotation, grad_translation)``; invalid pixels
    contribute nothing.
    """
    if warp is None:
        warp = warp_field(depth, pose, K)
    q = warp.transformed
    valid = warp.valid
    z = np.where(valid, warp.z, 1.0)
    gu = np.where(valid, grad_u, 0.0)
    gv = np.where(valid, grad_v, 0.0)
    gq = np.stack(
        [K.fx * gu / z, K.fy * gv / z, -(K.fx * q[..., 0] * gu + K.fy * q[..., 1] * gv) / z**2],
        axis=-1,
    )
    rays = K.rays()
    grad_depth = np.einsum("hwi,hwi->hw", gq, rays @ pose.rotation.T)
    flat_q = gq.reshape(-1, 3)
    grad_rotation = flat_q.T @ warp.points.reshape(-1, 3)
    grad_translation = flat_q.sum(axis=0)
    return grad_depth, grad_rotation, grad_translation
