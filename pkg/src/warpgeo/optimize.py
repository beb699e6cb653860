"""Direct per-pixel optimisation of depth, masks and poses with Adam.

Depth is optimised as log-depth, masks as logits and poses as twists. The
first ``stage1_fraction`` of the steps minimise the photometric objective
(photometric, depth smoothness and mask terms through the consistency
layers); the rest add gradient matching and normal smoothness.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .camera import PoseSE3, se3_exp, se3_log
from .losses import CSV_HEADER, Ablation, LossReport, LossWeights, sigmoid, total_objective
from .scene import Sequence

logger = logging.getLogger(__name__)

INIT_STRATEGIES = ("constant", "ground_truth", "perturbed")


@dataclass
class OptimConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 2000
    stage1_fraction: float = 0.8
    levels: int = 4
    seed: int = 0
    init: str = "constant"
    init_depth: float = 1.0
    init_scale: float = 2.0
    optimize_poses: bool = False
    optimize_masks: bool = True

    def __post_init__(self):
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {self.init!r}; choose from {INIT_STRATEGIES}")
        if not 0.0 <= self.stage1_fraction <= 1.0:
            raise ValueError("stage1_fraction must lie in [0, 1]")
        if self.lr <= 0 or self.max_steps < 0 or self.levels < 1:
            raise ValueError("lr must be positive, max_steps non-negative and levels >= 1")


@dataclass
class OptimState:
    log_depth: np.ndarray
    mask_logits: np.ndarray
    twists: np.ndarray
    step: int = 0
    moments: dict = field(default_factory=dict)

    @property
    def depth(self) -> np.ndarray:
        return np.exp(self.log_depth)

    @property
    def masks(self) -> np.ndarray:
        return sigmoid(self.mask_logits)

    @property
    def poses(self) -> list[PoseSE3]:
        return [se3_exp(t) for t in self.twists]

    def copy(self) -> "OptimState":
        return OptimState(
            self.log_depth.copy(),
            self.mask_logits.copy(),
            self.twists.copy(),
            self.step,
            {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
        )


def init_state(sequence: Sequence, strategy: str = "constant", *, value: float = 1.0,
               scale: float = 2.0, twists=None) -> OptimState:
    """Initial variables: depth by ``strategy``, masks at 0.5, twists zero unless given.

    ``constant`` fills depth with ``value``; ``ground_truth`` copies the true
    depth; ``perturbed`` multiplies it by ``scale``.
    """
    h, w = sequence.depth_gt.shape
    if strategy == "constant":
        depth = np.full((h, w), float(value))
    elif strategy == "ground_truth":
        depth = sequence.depth_gt.copy()
    elif strategy == "perturbed":
        depth = scale * sequence.depth_gt
    else:
        raise ValueError(f"unknown init strategy {strategy!r}; choose from {INIT_STRATEGIES}")
    n_src = len(sequence.sources)
    tw = np.zeros((n_src, 6)) if twists is None else np.array(twists, dtype=float)
    return OptimState(np.log(depth), np.zeros((n_src, h, w)), tw)


def _adam(state: OptimState, name: str, value: np.ndarray, grad: np.ndarray, cfg: OptimConfig) -> np.ndarray:
    m, v = state.moments.get(name, (np.zeros_like(value), np.zeros_like(value)))
    m = cfg.beta1 * m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
    state.moments[name] = (m, v)
    t = state.step + 1
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    return value - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass
class OptimResult:
    state: OptimState
    depth: np.ndarray  # depth fed to warping (refined unless d-n is disabled)
    raw_depth: np.ndarray
    normals: np.ndarray
    poses: list
    masks: np.ndarray
    trace: list
    report: LossReport
    aborted: bool = False
    diagnostic: str = ""

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_HEADER)
            for row in self.trace:
                writer.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def _finite(report: LossReport) -> bool:
    return bool(
        np.isfinite(report.total)
        and np.all(np.isfinite(report.grad_depth))
        and np.all(np.isfinite(report.grad_twists))
        and np.all(np.isfinite(report.grad_mask_logits))
    )


def optimize(sequence: Sequence, config: OptimConfig | None = None, weights: LossWeights | None = None,
             ablation: Ablation | None = None, state: OptimState | None = None,
             callback=None) -> OptimResult:
    """Run the two-stage optimisation; deterministic for a given configuration.

    Poses are frozen to the sequence's poses unless ``config.optimize_poses``.
    On a non-finite loss or gradient the run stops and returns the last finite
    state with ``aborted=True``.
    """
    cfg = config or OptimConfig()
    weights = weights or LossWeights()
    ablation = ablation or Ablation()
    obs = sequence.observation()
    if state is None:
        known = None if cfg.optimize_poses else [se3_log(p) for p in sequence.poses]
        state = init_state(sequence, cfg.init, value=cfg.init_depth, scale=cfg.init_scale, twists=known)
    stage1_steps = int(round(cfg.stage1_fraction * cfg.max_steps))
    trace = []
    aborted, diagnostic = False, ""

    while state.step < cfg.max_steps:
        full = state.step >= stage1_steps
        depth = state.depth
        report = total_objective(obs, depth, state.twists, state.mask_logits, weights, ablation,
                                 cfg.levels, full)
        if not _finite(report):
            aborted = True
            diagnostic = f"non-finite loss or gradient at step {state.step}; returning last finite state"
            logger.warning(diagnostic)
            break
        trace.append(report.csv_row(state.step))
        if callback is not None:
            callback(state.step, report)
        state.log_depth = _adam(state, "log_depth", state.log_depth, report.grad_depth * depth, cfg)
        if cfg.optimize_masks:
            state.mask_logits = _adam(state, "mask_logits", state.mask_logits, report.grad_mask_logits, cfg)
        if cfg.optimize_poses:
            state.twists = _adam(state, "twists", state.twists, report.grad_twists, cfg)
        state.step += 1

    final = total_objective(obs, state.depth, state.twists, state.mask_logits, weights, ablation,
                            cfg.levels, state.step >= stage1_steps, with_grad=False)
    return OptimResult(
        state=state,
        depth=final.refined_depth,
        raw_depth=state.depth,
        normals=final.normals,
        poses=state.poses,
        masks=state.masks,
        trace=trace,
        report=final,
        aborted=aborted,
        diagnostic=diagnostic,
    )


def config_dict(cfg: OptimConfig, weights: LossWeights, ablation: Ablation) -> dict:
    return {"optim": asdict(cfg), "weights": asdict(weights), "ablation": asdict(ablation)}
