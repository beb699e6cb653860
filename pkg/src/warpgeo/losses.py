"""Photometric, smoothness, mask and gradient-matching losses, and the
multi-scale objective that chains them through the consistency layers.

Every loss returns a :class:`Term` carrying its value and the gradients with
respect to its inputs. ``reduction="sum"`` gives the literal sums;
``reduction="mean"`` divides by the number of contributing pixels (per source
view where there are several), which is what :func:`total_objective` uses so
that weights transfer across resolutions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import camera
from .camera import CameraIntrinsics
from .consistency import (
    depth_to_normal,
    depth_to_normal_vjp,
    edge_weights,
    normal_to_depth,
    normal_to_depth_vjp,
    to_gray,
)
from .sampling import bilinear_sample, bilinear_sample_vjp

# residuals at or below this are treated as exact matches (roundoff level)
L1_ZERO_TOL = 1e-12
TERM_NAMES = ("vs", "smooth_depth", "smooth_normal", "mask", "grad")

ABLATIONS = {
    "no d-n": {"use_dn": False},
    "smooth no gradient": {"edge_smooth": False},
    "no img grad for d-n": {"edge_dn": False},
    "no normal smooth": {"normal_smooth": False},
}


@dataclass
class Term:
    value: float
    grads: dict
    diagnostics: list = field(default_factory=list)


def _channels(x):
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim == 2 else x


def l1_sign(e):
    """Subgradient of ``|e|``: the minimum-norm choice 0 for roundoff-level residuals."""
    return np.where(np.abs(e) > L1_ZERO_TOL, np.sign(e), 0.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def photometric_loss(target, warped, masks, valid=None, reduction: str = "sum") -> Term:
    """Masked L1 photometric error summed over source views and channels.

    Returns gradients ``{"warped": [...], "masks": [...]}``.
    """
    target = _channels(target)
    if valid is None:
        valid = [np.ones(target.shape[:2], dtype=bool)] * len(warped)
    total = 0.0
    g_warped, g_masks, diag = [], [], []
    for s, (hat, m, ok) in enumerate(zip(warped, masks, valid)):
        hat = _channels(hat)
        m = np.asarray(m, dtype=float)
        err = target - hat
        okf = ok.astype(float)
        count = int(ok.sum())
        scale = 1.0
        if reduction == "mean":
            scale = 1.0 / count if count else 0.0
        if count == 0:
            diag.append(f"photometric: source {s} has no valid pixels")
        per_px = np.abs(err).sum(axis=-1)
        total += scale * float(np.sum(m * okf * per_px))
        g_warped.append(-scale * (m * okf)[..., None] * l1_sign(err))
        g_masks.append(scale * okf * per_px)
    return Term(total, {"warped": g_warped, "masks": g_masks}, diag)


def _forward_diff(x, axis, order):
    n = x.shape[axis]
    take = lambda a, b: np.take(x, np.arange(a, n - b), axis=axis)  # noqa: E731
    if order == 1:
        return take(1, 0) - take(0, 1)
    return take(2, 0) - 2 * take(1, 1) + take(0, 2)


def smoothness_loss(values, order: int, image, alpha: float, reduction: str = "sum") -> Term:
    """Edge-aware L1 penalty on forward-difference gradients of ``order`` 1 or 2.

    Each difference anchored at ``x`` is weighted by ``exp(-alpha |I(x+1) - I(x)|)``
    along the same axis; vector fields are summed over channels.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    f = _channels(values)
    gray = to_gray(image)
    total = 0.0
    count = 0
    terms = []
    for axis in (1, 0):
        n = f.shape[axis]
        if n <= order:
            continue
        d = _forward_diff(f, axis, order)
        wimg = np.exp(-alpha * np.abs(_forward_diff(gray, axis, 1)))
        wimg = np.take(wimg, np.arange(n - order), axis=axis)[..., None]
        total += float(np.sum(np.abs(d) * wimg))
        count += wimg.size
        terms.append((axis, l1_sign(d) * wimg))
    scale = 1.0 / count if (reduction == "mean" and count) else 1.0
    grad = np.zeros_like(f)
    for axis, s in terms:
        n = f.shape[axis]
        idx = lambda a, b: (slice(None),) * axis + (slice(a, n - b),)  # noqa: E731
        if order == 1:
            grad[idx(1, 0)] += s
            grad[idx(0, 1)] -= s
        else:
            grad[idx(2, 0)] += s
            grad[idx(1, 1)] -= 2 * s
            grad[idx(0, 2)] += s
    grad *= scale
    if np.ndim(values) == 2:
        grad = grad[..., 0]
    return Term(scale * total, {"field": grad})


def mask_loss(masks, reduction: str = "sum") -> Term:
    """Cross-entropy of the masks against all-ones: ``-sum log M``."""
    total = 0.0
    grads = []
    for m in masks:
        m = np.asarray(m, dtype=float)
        scale = 1.0 / m.size if reduction == "mean" else 1.0
        total += -scale * float(np.sum(np.log(m)))
        grads.append(-scale / m)
    return Term(total, {"masks": grads})


def gradient_matching_loss(target, warped, masks, valid=None, reduction: str = "sum") -> Term:
    """Masked L1 distance between forward-difference gradients of target and warped views.

    A difference counts only where both of its pixels are valid in the warped
    view; the mask is read at the anchor pixel.
    """
    target = _channels(target)
    h, w = target.shape[:2]
    if valid is None:
        valid = [np.ones((h, w), dtype=bool)] * len(warped)
    total = 0.0
    g_warped, g_masks = [], []
    for hat, m, ok in zip(warped, masks, valid):
        hat = _channels(hat)
        m = np.asarray(m, dtype=float)
        parts = []
        count = 0
        for axis in (1, 0):
            n = target.shape[axis]
            if n < 2:
                continue
            lo = (slice(None),) * axis + (slice(0, n - 1),)
            hi = (slice(None),) * axis + (slice(1, n),)
            pair_ok = (ok[lo] & ok[hi]).astype(float)
            e = (target[hi] - target[lo]) - (hat[hi] - hat[lo])
            parts.append((lo, hi, pair_ok, e))
            count += int(pair_ok.sum())
        scale = 1.0 / count if (reduction == "mean" and count) else (0.0 if reduction == "mean" else 1.0)
        gw = np.zeros_like(hat)
        gm = np.zeros((h, w))
        for lo, hi, pair_ok, e in parts:
            ml = m[lo] * pair_ok
            per_px = np.abs(e).sum(axis=-1)
            total += scale * float(np.sum(ml * per_px))
            s = ml[..., None] * l1_sign(e)
            gw[hi] -= scale * s
            gw[lo] += scale * s
            gm[lo] += scale * pair_ok * per_px
        g_warped.append(gw)
        g_masks.append(gm)
    return Term(total, {"warped": g_warped, "masks": g_masks})


def downsample(x: np.ndarray) -> np.ndarray:
    """2x2 area mean over the leading two axes; a trailing odd row/column is dropped."""
    h, w = x.shape[0] // 2, x.shape[1] // 2
    x = x[: 2 * h, : 2 * w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def downsample_vjp(g: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    h, w = g.shape[0], g.shape[1]
    for dr in (0, 1):
        for dc in (0, 1):
            out[dr : 2 * h : 2, dc : 2 * w : 2] = 0.25 * g
    return out


def pyramid_levels(height: int, width: int, requested: int, min_size: int = 8) -> int:
    """Number of usable levels: stop before a side would drop below ``min_size``."""
    levels = 1
    while levels < requested and min(height >> levels, width >> levels) >= min_size:
        levels += 1
    return levels


@dataclass
class LossWeights:
    lambda_s: float = 0.5
    lambda_m: float = 0.2
    lambda_g: float | None = None  # None: follow lambda_s
    lambda_n: float = 1.0
    alpha_smooth: float = 0.1
    alpha_dn: float = 0.1

    def __post_init__(self):
        if self.lambda_g is None:
            self.lambda_g = self.lambda_s
        for name, val in asdict(self).items():
            if val < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class Ablation:
    use_dn: bool = True
    edge_smooth: bool = True
    edge_dn: bool = True
    normal_smooth: bool = True

    @classmethod
    def named(cls, label: str) -> "Ablation":
        if label == "full":
            return cls()
        return cls(**ABLATIONS[label])


@dataclass
class Observation:
    """Target image, source images and intrinsics; images are (H, W, C) in [0, 1]."""

    target: np.ndarray
    sources: list
    K: CameraIntrinsics

    def __post_init__(self):
        self.target = _channels(self.target)
        self.sources = [_channels(s) for s in self.sources]
        self._pyramid = None

    def pyramid(self, levels: int):
        if self._pyramid is None or len(self._pyramid) < levels:
            out = [(self.target, self.sources, self.K)]
            for _ in range(levels - 1):
                t, s, k = out[-1]
                out.append((downsample(t), [downsample(x) for x in s], k.halved()))
            self._pyramid = out
        return self._pyramid[:levels]


@dataclass
class LossReport:
    terms: dict
    total: float
    weights: dict
    grad_depth: np.ndarray | None = None
    grad_twists: np.ndarray | None = None
    grad_mask_logits: np.ndarray | None = None
    diagnostics: list = field(default_factory=list)
    normals: np.ndarray | None = None
    refined_depth: np.ndarray | None = None

    def recomputed_total(self) -> float:
        return self.terms["vs"] + sum(
            self.weights[k] * self.terms[t]
            for k, t in (
                ("lambda_s", "smooth_depth"),
                ("lambda_m", "mask"),
                ("lambda_g", "grad"),
                ("lambda_n", "smooth_normal"),
            )
        )

    def to_dict(self) -> dict:
        return {
            "terms": dict(self.terms),
            "total": self.total,
            "weights": dict(self.weights),
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self, step: int) -> list:
        return [step] + [self.terms[t] for t in TERM_NAMES] + [self.total]


CSV_HEADER = ["step", *TERM_NAMES, "total"]


def total_objective(
    obs: Observation,
    depth: np.ndarray,
    twists: np.ndarray,
    mask_logits: np.ndarray,
    weights: LossWeights | None = None,
    ablation: Ablation | None = None,
    levels: int = 4,
    full: bool = True,
    with_grad: bool = True,
) -> LossReport:
    """Multi-scale objective with analytic gradients.

    Depth smoothness acts on depth divided by its mean, so the term is
    invariant to the global scale that monocular photometric losses cannot
    observe and ``lambda_s`` does not depend on scene units.

    Per level: edge weights from the target image, normals from depth,
    refined depth from normals (unless ``ablation.use_dn`` is off), inverse
    warping of each source, then the photometric, depth-smoothness and mask
    terms, plus gradient matching and normal smoothness when ``full``.
    """
    weights = weights or LossWeights()
    ablation = ablation or Ablation()
    twists = np.atleast_2d(np.asarray(twists, dtype=float))
    mask_logits = np.asarray(mask_logits, dtype=float)
    depth = np.asarray(depth, dtype=float)
    n_src = len(obs.sources)
    h, w = depth.shape

    eff = {
        "lambda_s": weights.lambda_s,
        "lambda_m": weights.lambda_m,
        "lambda_g": weights.lambda_g if full else 0.0,
        "lambda_n": weights.lambda_n if (full and ablation.normal_smooth) else 0.0,
    }
    alpha_s = weights.alpha_smooth if ablation.edge_smooth else 0.0
    alpha_dn = weights.alpha_dn if ablation.edge_dn else 0.0

    masks = sigmoid(mask_logits)
    poses = [camera.se3_exp(xi) for xi in twists]
    n_levels = pyramid_levels(h, w, levels)
    pyr = obs.pyramid(n_levels)

    depths = [depth]
    mask_pyr = [np.moveaxis(masks, 0, -1)]  # (H, W, S)
    for _ in range(n_levels - 1):
        depths.append(downsample(depths[-1]))
        mask_pyr.append(downsample(mask_pyr[-1]))

    terms = dict.fromkeys(TERM_NAMES, 0.0)
    diagnostics: list = []
    grad_levels_depth = []
    grad_levels_mask = []
    g_rot = np.zeros((n_src, 3, 3))
    g_trans = np.zeros((n_src, 3))
    normals0 = refined0 = None

    for lvl in range(n_levels):
        tgt, srcs, K = pyr[lvl]
        D = depths[lvl]
        M = [mask_pyr[lvl][..., s] for s in range(n_src)]
        gray = to_gray(tgt)
        W = edge_weights(gray, alpha_dn)
        nres = depth_to_normal(D, K, W)
        N = nres.normals
        Dn = normal_to_depth(D, N, K, W).depth if ablation.use_dn else D
        if lvl == 0:
            normals0, refined0 = N, Dn

        warps, samples = [], []
        for s in range(n_src):
            wp = camera.warp_field(Dn, poses[s], K)
            warps.append(wp)
            samples.append(bilinear_sample(srcs[s], wp.u, wp.v, wp.valid))
        hats = [sm.values for sm in samples]
        oks = [sm.valid for sm in samples]

        vs = photometric_loss(tgt, hats, M, oks, reduction="mean")
        gm = gradient_matching_loss(tgt, hats, M, oks, reduction="mean")
        mu = float(Dn.mean())
        sd = smoothness_loss(Dn / mu, 2, gray, alpha_s, reduction="mean")
        sn = smoothness_loss(N, 1, gray, alpha_s, reduction="mean")
        mk = mask_loss(M, reduction="mean")
        diagnostics += [f"level {lvl}: {d}" for d in vs.diagnostics]
        terms["vs"] += vs.value
        terms["grad"] += gm.value
        terms["smooth_depth"] += sd.value
        terms["smooth_normal"] += sn.value
        terms["mask"] += mk.value

        if not with_grad:
            continue

        g_y = sd.grads["field"]
        g_dn = eff["lambda_s"] * (g_y / mu - float(np.sum(g_y * Dn)) / (Dn.size * mu * mu))
        g_mask = np.zeros(mask_pyr[lvl].shape)
        for s in range(n_src):
            g_hat = vs.grads["warped"][s] + eff["lambda_g"] * gm.grads["warped"][s]
            g_mask[..., s] = (
                vs.grads["masks"][s]
                + eff["lambda_g"] * gm.grads["masks"][s]
                + eff["lambda_m"] * mk.grads["masks"][s]
            )
            wp = warps[s]
            _, gu, gv = bilinear_sample_vjp(srcs[s], wp.u, wp.v, g_hat, wp.valid)
            gd, gr, gt = camera.warp_field_vjp(Dn, poses[s], K, gu, gv, wp)
            g_dn += gd
            g_rot[s] += gr
            g_trans[s] += gt

        g_n = eff["lambda_n"] * sn.grads["field"]
        if ablation.use_dn:
            g_d, g_n_from_dn = normal_to_depth_vjp(D, N, K, W, g_dn)
            g_n = g_n + g_n_from_dn
        else:
            g_d = g_dn
        g_d = g_d + depth_to_normal_vjp(D, K, W, g_n, nres)
        grad_levels_depth.append(g_d)
        grad_levels_mask.append(g_mask)

    total = terms["vs"] + (
        eff["lambda_s"] * terms["smooth_depth"]
        + eff["lambda_m"] * terms["mask"]
        + eff["lambda_g"] * terms["grad"]
        + eff["lambda_n"] * terms["smooth_normal"]
    )
    report = LossReport(terms, total, eff, diagnostics=diagnostics, normals=normals0, refined_depth=refined0)
    if not with_grad:
        return report

    g_depth = grad_levels_depth[-1]
    g_mask = grad_levels_mask[-1]
    for lvl in range(n_levels - 2, -1, -1):
        g_depth = grad_levels_depth[lvl] + downsample_vjp(g_depth, depths[lvl].shape)
        g_mask = grad_levels_mask[lvl] + downsample_vjp(g_mask, mask_pyr[lvl].shape)
    g_twists = np.stack([camera.twist_vjp(twists[s], g_rot[s], g_trans[s]) for s in range(n_src)])
    report.grad_depth = g_depth
    report.grad_twists = g_twists
    report.grad_mask_logits = np.moveaxis(g_mask, -1, 0) * masks * (1.0 - masks)
    return report
