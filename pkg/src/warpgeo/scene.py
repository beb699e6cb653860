"""Synthetic piecewise-planar scenes with exact depth, normals and poses.

Poses in a :class:`SceneSpec` are world-to-camera transforms. The relative
pose used for warping is ``T_source ∘ T_target^-1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, PoseSE3
from .losses import Observation

MIN_DEPTH = 0.1
MAX_DEPTH = 80.0


@dataclass
class Texture:
    """``base + sum_k amp_k sin(2 pi (ka a + kb b) + phase_k + c * channel_shift)``
    over plane-local coordinates ``(a, b)`` in scene units."""

    base: float = 0.5
    waves: list = field(default_factory=list)  # [ka, kb, phase, amp]
    channel_shift: float = 2.1

    def __call__(self, a: np.ndarray, b: np.ndarray, channels: int) -> np.ndarray:
        out = np.full(a.shape + (channels,), self.base, dtype=float)
        for ka, kb, phase, amp in self.waves:
            arg = 2 * np.pi * (ka * a + kb * b) + phase
            for c in range(channels):
                out[..., c] += amp * np.sin(arg + c * self.channel_shift)
        return out

    def to_dict(self) -> dict:
        return {"base": self.base, "waves": [list(map(float, w)) for w in self.waves],
                "channel_shift": self.channel_shift}

    @classmethod
    def from_dict(cls, d: dict) -> "Texture":
        return cls(float(d["base"]), [list(w) for w in d.get("waves", [])],
                   float(d.get("channel_shift", 2.1)))


def sine_texture(fx: float, depth: float, wavelengths_px=(20.0, 29.0, 45.0), amplitude: float = 0.3,
                 base: float = 0.5, seed: int = 0) -> Texture:
    """Sum of sinusoids whose wavelengths are given in pixels at ``depth``."""
    rng = np.random.default_rng(seed)
    footprint = depth / fx
    waves = []
    for lam in wavelengths_px:
        ang = rng.uniform(0, np.pi)
        k = 1.0 / (lam * footprint)
        waves.append([k * np.cos(ang), k * np.sin(ang), rng.uniform(0, 2 * np.pi),
                      amplitude / len(wavelengths_px)])
    return Texture(base, waves)


def low_texture(fx: float, depth: float, base: float = 0.5, seed: int = 0) -> Texture:
    """Nearly constant texture: one faint, long-wavelength ripple."""
    return sine_texture(fx, depth, wavelengths_px=(60.0,), amplitude=0.01, base=base, seed=seed)


@dataclass
class Plane:
    """World-frame plane ``normal . X = offset`` with an optional world-space extent
    ``[xmin, xmax, ymin, ymax]`` restricting where it exists."""

    normal: np.ndarray
    offset: float
    texture: Texture = field(default_factory=Texture)
    extent: list | None = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        ref = np.array([0.0, 1.0, 0.0]) if abs(self.normal[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(ref, self.normal)
        e1 /= np.linalg.norm(e1)
        return e1, np.cross(self.normal, e1)

    def to_dict(self) -> dict:
        return {"normal": self.normal.tolist(), "offset": self.offset,
                "texture": self.texture.to_dict(), "extent": self.extent}

    @classmethod
    def from_dict(cls, d: dict) -> "Plane":
        return cls(np.asarray(d["normal"]), float(d["offset"]), Texture.from_dict(d["texture"]),
                   d.get("extent"))


@dataclass
class SceneSpec:
    planes: list
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics.default)
    target_pose: PoseSE3 = field(default_factory=PoseSE3.identity)
    source_poses: list = field(default_factory=list)
    noise: float = 0.0
    seed: int = 0
    channels: int = 3

    def relative_poses(self) -> list[PoseSE3]:
        inv = self.target_pose.inverse()
        return [p.compose(inv) for p in self.source_poses]

    def to_dict(self) -> dict:
        return {
            "planes": [p.to_dict() for p in self.planes],
            "camera": self.camera.to_dict(),
            "target_pose": self.target_pose.to_list(),
            "source_poses": [p.to_list() for p in self.source_poses],
            "noise": self.noise,
            "seed": self.seed,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            planes=[Plane.from_dict(p) for p in d["planes"]],
            camera=CameraIntrinsics.from_dict(d["camera"]),
            target_pose=PoseSE3.from_list(d["target_pose"]),
            source_poses=[PoseSE3.from_list(p) for p in d["source_poses"]],
            noise=float(d.get("noise", 0.0)),
            seed=int(d.get("seed", 0)),
            channels=int(d.get("channels", 3)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class View:
    image: np.ndarray  # (H, W, C)
    depth: np.ndarray  # (H, W)
    normals: np.ndarray  # (H, W, 3), camera frame, facing the camera
    hit: np.ndarray  # (H, W) bool


def render_view(spec: SceneSpec, pose: PoseSE3) -> View:
    """Ray-cast every pixel against all planes and keep the nearest hit."""
    K = spec.camera
    rays = K.rays()
    h, w = K.height, K.width
    best = np.full((h, w), np.inf)
    image = np.zeros((h, w, spec.channels))
    normals = np.zeros((h, w, 3))
    cam_centre = -pose.rotation.T @ pose.translation
    for plane in spec.planes:
        n_c = pose.rotation @ plane.normal
        d_c = plane.offset + n_c @ pose.translation
        den = rays @ n_c
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(np.abs(den) > 1e-12, d_c / den, np.inf)
        ok = (z > 0) & np.isfinite(z)
        pts_c = z[..., None] * rays
        pts_w = (pts_c - pose.translation) @ pose.rotation
        if plane.extent is not None:
            x0, x1, y0, y1 = plane.extent
            ok &= (pts_w[..., 0] >= x0) & (pts_w[..., 0] <= x1)
            ok &= (pts_w[..., 1] >= y0) & (pts_w[..., 1] <= y1)
        take = ok & (z < best)
        if not take.any():
            continue
        best = np.where(take, z, best)
        e1, e2 = plane.basis()
        tex = plane.texture(pts_w @ e1, pts_w @ e2, spec.channels)
        image = np.where(take[..., None], tex, image)
        facing = n_c if (plane.normal @ cam_centre - plane.offset) > 0 else -n_c
        normals = np.where(take[..., None], facing, normals)
    hit = np.isfinite(best)
    return View(image, np.where(hit, best, 0.0), normals, hit)


def render(spec: SceneSpec) -> dict:
    """Render the target and every source view.

    Raises ``ValueError`` when a target ray misses all planes or lands outside
    ``(0.1, 80]``.
    """
    target = render_view(spec, spec.target_pose)
    if not target.hit.all():
        raise ValueError(f"invalid scene: {int((~target.hit).sum())} target rays miss every plane")
    if target.depth.min() <= MIN_DEPTH or target.depth.max() > MAX_DEPTH:
        raise ValueError(
            f"invalid scene: target depth range [{target.depth.min():.3g}, {target.depth.max():.3g}]"
            f" outside ({MIN_DEPTH}, {MAX_DEPTH}]"
        )
    sources = [render_view(spec, p) for p in spec.source_poses]
    rng = np.random.default_rng(spec.seed)
    images = [target.image] + [s.image for s in sources]
    if spec.noise > 0:
        images = [im + rng.normal(0.0, spec.noise, im.shape) for im in images]
    return {
        "images": images,
        "depth_gt": target.depth,
        "normal_gt": target.normals,
        "poses": spec.relative_poses(),
        "source_hits": [s.hit for s in sources],
    }


@dataclass
class Sequence:
    """A (source1, target, source2) triplet with ground truth for the target."""

    frames: list  # [source1, target, source2], each (H, W, C)
    poses: list  # relative target->source poses, [source1, source2]
    K: CameraIntrinsics
    depth_gt: np.ndarray
    normal_gt: np.ndarray

    @property
    def target(self) -> np.ndarray:
        return self.frames[1]

    @property
    def sources(self) -> list:
        return [self.frames[0], self.frames[2]]

    def observation(self) -> Observation:
        return Observation(self.target, self.sources, self.K)

    def save(self, out_dir, spec: SceneSpec | None = None) -> dict:
        from . import io

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = ["source_0", "target", "source_1"]
        for name, frame in zip(names, self.frames):
            io.write_pfm(out / f"{name}.pfm", frame)
            io.write_png(out / f"{name}.png", frame)
        io.write_pfm(out / "depth_gt.pfm", self.depth_gt)
        io.write_pfm(out / "normal_gt.pfm", self.normal_gt)
        manifest = {
            "frames": [f"{n}.pfm" for n in names],
            "previews": [f"{n}.png" for n in names],
            "target_index": 1,
            "depth_gt": "depth_gt.pfm",
            "normal_gt": "normal_gt.pfm",
            "intrinsics": self.K.to_dict(),
            "poses": [p.to_list() for p in self.poses],
        }
        if spec is not None:
            spec.save(out / "scene.json")
            manifest["scene"] = "scene.json"
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return manifest

    @classmethod
    def load(cls, scene_dir) -> "Sequence":
        from . import io

        d = Path(scene_dir)
        manifest = json.loads((d / "manifest.json").read_text())
        frames = [np.asarray(io.read_pfm(d / f), dtype=float) for f in manifest["frames"]]
        return cls(
            frames=frames,
            poses=[PoseSE3.from_list(p) for p in manifest["poses"]],
            K=CameraIntrinsics.from_dict(manifest["intrinsics"]),
            depth_gt=np.asarray(io.read_pfm(d / manifest["depth_gt"]), dtype=float),
            normal_gt=np.asarray(io.read_pfm(d / manifest["normal_gt"]), dtype=float),
        )


def make_sequence(spec: SceneSpec) -> Sequence:
    """Render the triplet (source1, target, source2); the spec needs two source poses."""
    if len(spec.source_poses) != 2:
        raise ValueError("a frame triplet needs exactly two source poses")
    out = render(spec)
    target, s1, s2 = out["images"]
    return Sequence([s1, target, s2], out["poses"], spec.camera, out["depth_gt"], out["normal_gt"])


def camera_at(centre, rotation=None) -> PoseSE3:
    """World-to-camera pose of a camera centred at ``centre`` (world frame)."""
    rot = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
    return PoseSE3(rot, -rot @ np.asarray(centre, dtype=float))


def _stereo_sources(depth: float, baseline_frac: float, forward: float = 0.2):
    direction = np.array([1.0, 0.0, forward])
    direction /= np.linalg.norm(direction)
    b = baseline_frac * depth
    return [camera_at(-b * direction), camera_at(b * direction * np.array([1.0, 1.0, -1.0]))]


PRESETS = ("fronto", "slanted", "depth-edge", "low-texture")


def preset(name: str, height: int = 128, width: int = 416, depth: float = 10.0,
           baseline_frac: float = 0.05, tilt_deg: float = 30.0, noise: float = 0.0,
           seed: int = 0) -> SceneSpec:
    """Named scene presets.

    ``fronto``: textured plane at ``depth``. ``slanted``: textured plane through
    ``(0, 0, depth)`` tilted by ``tilt_deg`` about the camera x-axis.
    ``depth-edge``: a near slanted plane on the left, a far plane on the right,
    with a brightness step on the depth step. ``low-texture``: near-constant
    fronto-parallel plane.
    """
    K = CameraIntrinsics.default(height, width)
    sources = _stereo_sources(depth, baseline_frac)
    tilt = np.radians(tilt_deg)
    slanted_normal = np.array([0.0, np.sin(tilt), -np.cos(tilt)])
    if name == "fronto":
        planes = [Plane([0, 0, -1.0], -depth, sine_texture(K.fx, depth, seed=seed))]
    elif name == "slanted":
        planes = [Plane(slanted_normal, -np.cos(tilt) * depth, sine_texture(K.fx, depth, seed=seed))]
    elif name == "depth-edge":
        near = 0.8 * depth
        planes = [
            Plane(slanted_normal, -np.cos(tilt) * near,
                  sine_texture(K.fx, near, base=0.3, amplitude=0.2, seed=seed), [-1e3, 0.0, -1e3, 1e3]),
            Plane([0, 0, -1.0], -1.2 * depth,
                  sine_texture(K.fx, 1.2 * depth, base=0.7, amplitude=0.2, seed=seed + 1)),
        ]
    elif name == "low-texture":
        planes = [Plane([0, 0, -1.0], -depth, low_texture(K.fx, depth, seed=seed))]
    else:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    return SceneSpec(planes, K, PoseSE3.identity(), sources, noise, seed)
