"""Central-difference verification of the hand-written VJPs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_COORDS = 500


def relative_error(analytic, numeric):
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


@dataclass
class DiffVariable:
    """A value with an additive gradient buffer of the same shape."""

    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def accumulate(self, g) -> None:
        g = np.asarray(g, dtype=float)
        if g.shape != self.value.shape:
            raise ValueError(f"gradient shape {g.shape} != value shape {self.value.shape}")
        self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


@dataclass
class VariableCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    n_coords: int
    passed: bool


@dataclass
class GradCheckReport:
    step: float
    tol: float
    checks: list = field(default_factory=list)
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and all(c.passed for c in self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    def table(self, title: str | None = None) -> str:
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'variable':<28}{'coords':>8}{'max rel err':>14}{'tol':>10}  result")
        for c in self.checks:
            lines.append(
                f"{c.name:<28}{c.n_coords:>8}{c.max_rel_error:>14.3e}{self.tol:>10.0e}  "
                f"{'PASS' if c.passed else 'FAIL'}"
            )
        if self.failure:
            lines.append(f"FAILURE: {self.failure}")
        return "\n".join(lines)


def finite_diff_check(f, variables: dict, step: float = 1e-5, tol: float = 1e-4,
                      max_coords: int = MAX_COORDS, seed: int = 0, value_fn=None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f(**variables)`` must return ``(value, grads)`` where ``grads`` maps each
    variable name to an array of that variable's shape. Large variables are
    subsampled to ``max_coords`` coordinates with a fixed seed. ``value_fn``,
    if given, evaluates the objective alone for the perturbed points.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=float, copy=True) for k, v in variables.items()}
    report = GradCheckReport(step, tol)
    value, grads = f(**base)
    if not np.isfinite(value):
        report.failure = "non-finite objective at the base point"
        return report
    if value_fn is None:
        value_fn = lambda **kw: f(**kw)[0]  # noqa: E731
    rng = np.random.default_rng(seed)
    for name, x in base.items():
        g = np.asarray(grads[name], dtype=float)
        if g.shape != x.shape:
            report.failure = f"gradient for {name} has shape {g.shape}, expected {x.shape}"
            return report
        if not np.all(np.isfinite(g)):
            bad = tuple(int(j) for j in np.unravel_index(int(np.argmax(~np.isfinite(g))), g.shape))
            report.failure = f"non-finite analytic gradient for {name} at {bad}"
            return report
        flat = np.arange(x.size)
        if x.size > max_coords:
            flat = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        worst = (0.0, (), 0.0, 0.0)
        for i in flat:
            idx = tuple(int(j) for j in np.unravel_index(int(i), x.shape))
            orig = x[idx]
            x[idx] = orig + step
            fp = value_fn(**base)
            x[idx] = orig - step
            fm = value_fn(**base)
            x[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.failure = f"non-finite objective while perturbing {name}{list(idx)}"
                return report
            num = (fp - fm) / (2 * step)
            err = float(relative_error(g[idx], num))
            if err >= worst[0]:
                worst = (err, idx, float(g[idx]), float(num))
        report.checks.append(
            VariableCheck(name, worst[0], worst[1], worst[2], worst[3], len(flat), worst[0] < tol)
        )
    return report


@dataclass
class SuiteEntry:
    name: str
    tol: float
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def random_scene(height: int = 8, width: int = 12, seed: int = 0, sources: int = 2):
    """Smooth random images, depth, twists and mask logits for gradient checks."""
    from .camera import CameraIntrinsics
    from .losses import Observation

    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(1.2 * width, 1.2 * width, (width - 1) / 2, (height - 1) / 2, width, height)
    rows, cols = np.mgrid[0:height, 0:width].astype(float)

    def image():
        ka, kb = rng.uniform(0.3, 0.8, 2)
        phase = rng.uniform(0, 2 * np.pi, 3)
        return 0.5 + 0.2 * np.stack([np.sin(ka * cols + kb * rows + p) for p in phase], axis=-1)

    obs = Observation(image(), [image() for _ in range(sources)], K)
    depth = 5.0 + rng.uniform(-0.5, 0.5, (height, width))
    twists = rng.normal(0.0, 0.02, (sources, 6))
    logits = rng.normal(0.0, 1.0, (sources, height, width))
    return obs, depth, twists, logits, rng


def _off_kinks(target, rng, margin, tries: int = 1000):
    """A perturbed copy of ``target`` whose L1 residuals and gradient residuals
    all stay ``margin`` away from zero, so central differences never straddle a kink."""
    for _ in range(tries):
        hat = target + rng.normal(0.0, 0.05, target.shape)
        e = target - hat
        gaps = [np.abs(e), np.abs(np.diff(e, axis=0)), np.abs(np.diff(e, axis=1))]
        if min(float(g.min()) for g in gaps) > margin:
            return hat
    raise RuntimeError("could not draw a kink-free perturbation")


def run_suite(height: int = 8, width: int = 12, seed: int = 0, step: float = 1e-5,
              tol_op: float = 1e-4, tol_total: float = 1e-3) -> list[SuiteEntry]:
    """Check every differentiable operation, then the full objective in both stages."""
    from . import camera, consistency, losses, sampling

    obs, depth, twists, logits, rng = random_scene(height, width, seed)
    K = obs.K
    h, w = height, width
    entries = []

    def add(name, f, variables, tol=tol_op, value_fn=None):
        entries.append(SuiteEntry(name, tol, finite_diff_check(f, variables, step, tol, seed=seed,
                                                                value_fn=value_fn)))

    up = rng.normal(size=(6,))

    def se3(twist):
        pose, d_rot, d_t = camera.se3_exp_jacobian(twist)
        gr = up[:3, None] * pose.rotation[:, :3]
        val = float(np.sum(gr * pose.rotation) / 2 + up[3:] @ pose.translation)
        grad_r = up[:3, None] * pose.rotation
        return val, {"twist": camera.twist_vjp(twist, grad_r, up[3:])}

    add("se3_exp", se3, {"twist": twists[0] * 20})

    cu, cv = rng.normal(size=(2, h, w))

    def warp(depth, twist):
        pose = camera.se3_exp(twist)
        wp = camera.warp_field(depth, pose, K)
        gd, gr, gt = camera.warp_field_vjp(depth, pose, K, cu, cv, wp)
        return float(np.sum(cu * wp.u + cv * wp.v)), {"depth": gd, "twist": camera.twist_vjp(twist, gr, gt)}

    add("warp", warp, {"depth": depth, "twist": twists[0]})

    src = obs.sources[0]
    su = rng.uniform(0.2, w - 1.2, (h, w))
    sv = rng.uniform(0.2, h - 1.2, (h, w))
    g_up = rng.normal(size=(h, w, 3))

    def sample(src, u, v):
        out = sampling.bilinear_sample(src, u, v)
        gs, gu, gv = sampling.bilinear_sample_vjp(src, u, v, g_up)
        return float(np.sum(g_up * out.values)), {"src": gs, "u": gu, "v": gv}

    add("bilinear_sample", sample, {"src": src, "u": su, "v": sv})

    W = consistency.edge_weights(obs.target, 0.1)
    n_up = rng.normal(size=(h, w, 3))

    def d2n(depth):
        res = consistency.depth_to_normal(depth, K, W)
        return float(np.sum(n_up * res.normals)), {"depth": consistency.depth_to_normal_vjp(depth, K, W, n_up, res)}

    add("depth_to_normal", d2n, {"depth": depth})

    normals = consistency.depth_to_normal(depth, K, W).normals
    d_up = rng.normal(size=(h, w))

    def n2d(depth, normals):
        out = consistency.normal_to_depth(depth, normals, K, W).depth
        gd, gn = consistency.normal_to_depth_vjp(depth, normals, K, W, d_up)
        return float(np.sum(d_up * out)), {"depth": gd, "normals": gn}

    add("normal_to_depth", n2d, {"depth": depth, "normals": normals})

    def chain(depth):
        res = consistency.depth_to_normal(depth, K, W)
        out = consistency.normal_to_depth(depth, res.normals, K, W).depth
        gd, gn = consistency.normal_to_depth_vjp(depth, res.normals, K, W, d_up)
        return float(np.sum(d_up * out)), {"depth": gd + consistency.depth_to_normal_vjp(depth, K, W, gn, res)}

    add("depth_to_normal_to_depth", chain, {"depth": depth})

    masks = losses.sigmoid(logits)
    warped = [_off_kinks(obs.target, rng, 10 * step) for _ in obs.sources]
    valid = [rng.uniform(size=(h, w)) > 0.1 for _ in warped]

    def photometric(w0, w1, m0, m1):
        t = losses.photometric_loss(obs.target, [w0, w1], [m0, m1], valid, reduction="mean")
        gw, gm = t.grads["warped"], t.grads["masks"]
        return t.value, {"w0": gw[0], "w1": gw[1], "m0": gm[0], "m1": gm[1]}

    add("photometric_loss", photometric, {"w0": warped[0], "w1": warped[1], "m0": masks[0], "m1": masks[1]})

    def gradient_matching(w0, w1, m0, m1):
        t = losses.gradient_matching_loss(obs.target, [w0, w1], [m0, m1], valid, reduction="mean")
        gw, gm = t.grads["warped"], t.grads["masks"]
        return t.value, {"w0": gw[0], "w1": gw[1], "m0": gm[0], "m1": gm[1]}

    add("gradient_matching_loss", gradient_matching,
        {"w0": warped[0], "w1": warped[1], "m0": masks[0], "m1": masks[1]})

    for order, field in ((2, depth), (1, normals)):
        def smooth(field, order=order):
            t = losses.smoothness_loss(field, order, obs.target, 0.1)
            return t.value, {"field": t.grads["field"]}

        add(f"smoothness_loss(order={order})", smooth, {"field": field})

    def mask(m0, m1):
        t = losses.mask_loss([m0, m1])
        return t.value, {"m0": t.grads["masks"][0], "m1": t.grads["masks"][1]}

    add("mask_loss", mask, {"m0": masks[0], "m1": masks[1]})

    p_up = rng.normal(size=(h // 2, w // 2))

    def down(x):
        return float(np.sum(p_up * losses.downsample(x))), {"x": losses.downsample_vjp(p_up, x.shape)}

    add("downsample", down, {"x": depth})

    for full in (False, True):
        def objective(depth, twists, mask_logits, full=full):
            r = losses.total_objective(obs, depth, twists, mask_logits, full=full)
            return r.total, {"depth": r.grad_depth, "twists": r.grad_twists, "mask_logits": r.grad_mask_logits}

        def value(depth, twists, mask_logits, full=full):
            return losses.total_objective(obs, depth, twists, mask_logits, full=full, with_grad=False).total

        add(f"total_objective({'full' if full else 'stage 1'})", objective,
            {"depth": depth, "twists": twists, "mask_logits": logits}, tol_total, value)
    return entries
