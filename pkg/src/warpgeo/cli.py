"""Command-line entry point: ``warpgeo <subcommand> ...``.

Exit codes: 0 success, 1 gradient check below threshold, 2 configuration
error, 3 numeric failure. Every run writes ``config.json`` with all resolved
settings; passing it back through ``--config`` replays the run exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import io, plotting
from .camera import CameraIntrinsics, PoseSE3
from .consistency import depth_to_normal, edge_weights, normal_to_depth
from .gradcheck import run_suite
from .losses import ABLATIONS, Ablation, LossWeights
from .metrics import (
    DEPTH_FIELDS,
    NORMAL_FIELDS,
    baseline_normals,
    depth_metrics,
    gt_normals_from_depth,
    normal_metrics,
)
from .optimize import OptimConfig, optimize
from .scene import PRESETS, SceneSpec, Sequence, make_sequence, preset

logger = logging.getLogger("warpgeo")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class NumericError(Exception):
    pass


# ---------------------------------------------------------------- config


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section} settings: {e}") from e


def _resolve_run(args, cfg: dict):
    """Merge config file sections with command-line overrides."""
    optim = dict(cfg.get("optim", {}))
    weights = dict(cfg.get("weights", {}))
    ablation = dict(cfg.get("ablation", {}))
    for flag, key in (("steps", "max_steps"), ("lr", "lr"), ("scales", "levels"), ("seed", "seed"),
                      ("init", "init"), ("init_depth", "init_depth"), ("init_scale", "init_scale"),
                      ("stage1_fraction", "stage1_fraction")):
        if getattr(args, flag, None) is not None:
            optim[key] = getattr(args, flag)
    if getattr(args, "optimize_poses", False):
        optim["optimize_poses"] = True
    for flag in ("lambda_s", "lambda_m", "lambda_g", "lambda_n"):
        if getattr(args, flag, None) is not None:
            weights[flag] = getattr(args, flag)
    if getattr(args, "alpha", None) is not None:
        weights["alpha_smooth"] = weights["alpha_dn"] = args.alpha
    for flag, key in (("no_dn", "use_dn"), ("no_edge_smooth", "edge_smooth"),
                      ("no_edge_dn", "edge_dn"), ("no_normal_smooth", "normal_smooth")):
        if getattr(args, flag, False):
            ablation[key] = False
    return (_build(OptimConfig, optim, "optim"), _build(LossWeights, weights, "weights"),
            _build(Ablation, ablation, "ablation"))


def _write_config(out: Path, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))


def _pick(args, cfg: dict, name: str, default=None):
    value = getattr(args, name, None)
    return value if value is not None else cfg.get(name, default)


def _out_dir(args, cfg: dict) -> Path:
    out = _pick(args, cfg, "out")
    if out is None:
        raise ConfigError("an output directory is required (--out)")
    return Path(out)


def _load_sequence(scene_dir) -> Sequence:
    if scene_dir is None:
        raise ConfigError("a scene directory is required (--scene)")
    try:
        return Sequence.load(scene_dir)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot load scene from {scene_dir}: {e}") from e


# ---------------------------------------------------------------- gen-scene


def cmd_gen_scene(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    if "spec" in cfg:
        try:
            spec = SceneSpec.from_dict(cfg["spec"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid scene spec: {e}") from e
        resolved = {"command": "gen-scene", "out": str(out), "spec": cfg["spec"]}
    else:
        params = dict(cfg.get("preset", {}))
        for name in ("name", "height", "width", "depth", "baseline_frac", "tilt_deg", "noise", "seed"):
            value = getattr(args, name, None)
            if value is not None:
                params[name] = value
        params.setdefault("name", "slanted")
        if params["name"] not in PRESETS:
            raise ConfigError(f"unknown preset {params['name']!r}; choose from {PRESETS}")
        try:
            spec = preset(**params)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid preset parameters: {e}") from e
        resolved = {"command": "gen-scene", "out": str(out), "preset": params}
    try:
        seq = make_sequence(spec)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    _write_config(out, resolved)
    seq.save(out, spec)
    plotting.save_depth_figure(out / "depth_gt_fig.png", seq.depth_gt, title="ground-truth depth")
    plotting.save_normal_figure(out / "normal_gt_fig.png", seq.normal_gt, title="ground-truth normals")
    print(f"scene written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- optimize


def _run_optimize(scene_dir: str, out: Path, optim: OptimConfig, weights: LossWeights,
                  ablation: Ablation) -> dict:
    seq = _load_sequence(scene_dir)
    res = optimize(seq, optim, weights, ablation)
    out.mkdir(parents=True, exist_ok=True)
    io.write_pfm(out / "depth.pfm", res.depth)
    io.write_pfm(out / "raw_depth.pfm", res.raw_depth)
    io.write_pfm(out / "normals.pfm", res.normals)
    for s, m in enumerate(res.masks):
        io.write_pfm(out / f"mask_{s}.pfm", m)
        io.write_png(out / f"mask_{s}.png", m)
    io.write_png(out / "depth.png", plotting.depth_colormap(res.depth))
    io.write_png(out / "normals.png", plotting.normal_rgb(res.normals))
    res.write_trace(out / "trace.csv")
    stage2 = int(round(optim.stage1_fraction * optim.max_steps))
    plotting.save_trace_figure(out / "trace_fig.png", res.trace, stage2)
    plotting.save_depth_figure(out / "depth_fig.png", res.depth, seq.depth_gt)
    plotting.save_normal_figure(out / "normals_fig.png", res.normals, seq.normal_gt)
    (out / "poses.json").write_text(json.dumps(
        {"poses": [p.to_list() for p in res.poses], "twists": res.state.twists.tolist()}, indent=2))
    summary = {
        "steps": res.state.step,
        "aborted": res.aborted,
        "diagnostic": res.diagnostic,
        "final": res.report.to_dict(),
        "depth": depth_metrics(res.depth, seq.depth_gt).as_dict(),
        "depth_scale_corrected": depth_metrics(res.depth, seq.depth_gt, scale_correct=True).as_dict(),
        "normals": normal_metrics(res.normals, seq.normal_gt).as_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_optimize(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    scene_dir = _pick(args, cfg, "scene")
    optim, weights, ablation = _resolve_run(args, cfg)
    resolved = {"command": "optimize", "scene": scene_dir, "out": str(out), "optim": asdict(optim),
                "weights": asdict(weights), "ablation": asdict(ablation)}
    _load_sequence(scene_dir)
    _write_config(out, resolved)
    summary = _run_optimize(scene_dir, out, optim, weights, ablation)
    print(json.dumps({"depth": summary["depth"], "normals": summary["normals"]}, indent=2))
    if summary["aborted"]:
        raise NumericError(summary["diagnostic"])
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _read_map(path, what: str) -> np.ndarray:
    try:
        return np.asarray(io.read_image(path), dtype=float)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read {what} {path}: {e}") from e


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    run_dir = _pick(args, cfg, "run")
    scene_dir = _pick(args, cfg, "scene")
    pred_depth = _pick(args, cfg, "pred_depth") or (str(Path(run_dir) / "depth.pfm") if run_dir else None)
    pred_normals = _pick(args, cfg, "pred_normals") or (
        str(Path(run_dir) / "normals.pfm") if run_dir else None)
    gt_depth = _pick(args, cfg, "gt_depth") or (str(Path(scene_dir) / "depth_gt.pfm") if scene_dir else None)
    gt_normals = _pick(args, cfg, "gt_normals")
    mask_path = _pick(args, cfg, "mask")
    cap = float(_pick(args, cfg, "cap", 80.0))
    scale_correct = bool(args.scale_correct or cfg.get("scale_correct", False))
    if pred_depth is None or gt_depth is None:
        raise ConfigError("eval needs a predicted and a ground-truth depth map (--run/--scene or paths)")
    resolved = {"command": "eval", "out": str(out), "pred_depth": pred_depth, "gt_depth": gt_depth,
                "pred_normals": pred_normals, "gt_normals": gt_normals, "mask": mask_path,
                "intrinsics": _pick(args, cfg, "intrinsics"), "scene": scene_dir,
                "cap": cap, "scale_correct": scale_correct}

    pd = _read_map(pred_depth, "predicted depth")
    gd = _read_map(gt_depth, "ground-truth depth")
    valid = None if mask_path is None else _read_map(mask_path, "mask") > 0.5
    if valid is not None and valid.ndim == 3:
        valid = valid[..., 0]
    try:
        dm = depth_metrics(pd, gd, cap=cap, scale_correct=scale_correct, valid_mask=valid)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    result = {"depth": dm.as_dict()}
    rows = [["depth", *DEPTH_FIELDS], ["depth", *dm.row()]]

    if pred_normals is not None:
        pn = _read_map(pred_normals, "predicted normals")
        if gt_normals is not None:
            gn = _read_map(gt_normals, "ground-truth normals")
            nvalid = np.ones(gn.shape[:2], dtype=bool) if valid is None else valid
        else:
            K = _intrinsics(resolved, gd.shape)
            gn, nvalid = gt_normals_from_depth(gd, K, valid)
        pn = pn / np.linalg.norm(pn, axis=-1, keepdims=True)
        try:
            nm = normal_metrics(pn, gn, nvalid)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        result["normals"] = nm.as_dict()
        rows += [["normals", *NORMAL_FIELDS], ["normals", *nm.row()]]
        for kind in ("gt_mean", "predefined_scene"):
            base = baseline_normals(kind, gn, gn.shape[:2], nvalid)
            bm = normal_metrics(base.normals, np.where(nvalid[..., None], gn, base.normals), nvalid)
            result[f"baseline_{kind}"] = bm.as_dict()
            rows.append([f"baseline_{kind}", *bm.row()])

    _write_config(out, resolved)
    (out / "metrics.json").write_text(json.dumps(result, indent=2))
    with open(out / "metrics.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def _intrinsics(resolved: dict, shape) -> CameraIntrinsics:
    if resolved.get("intrinsics"):
        return CameraIntrinsics.from_dict(_load_config(resolved["intrinsics"]))
    if resolved.get("scene"):
        manifest = _load_config(Path(resolved["scene"]) / "manifest.json")
        return CameraIntrinsics.from_dict(manifest["intrinsics"])
    raise ConfigError("normals from depth need intrinsics (--intrinsics or --scene)")


# ---------------------------------------------------------------- layers


def cmd_layers(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    depth_path = _pick(args, cfg, "depth")
    if depth_path is None:
        raise ConfigError("layers needs --depth")
    image_path = _pick(args, cfg, "image")
    alpha = float(_pick(args, cfg, "alpha", 0.1))
    resolved = {"command": "layers", "out": str(out), "depth": depth_path, "image": image_path,
                "intrinsics": _pick(args, cfg, "intrinsics"), "scene": _pick(args, cfg, "scene"),
                "alpha": alpha}
    depth = _read_map(depth_path, "depth")
    if depth.ndim != 2 or not np.all(depth > 0):
        raise ConfigError("depth must be a single-channel map with positive values")
    K = _intrinsics(resolved, depth.shape)
    if (K.height, K.width) != depth.shape:
        raise ConfigError(f"intrinsics size {K.height}x{K.width} does not match depth {depth.shape}")
    image = _read_map(image_path, "image") if image_path else np.zeros(depth.shape)
    try:
        W = edge_weights(image, alpha if image_path else 0.0)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    nres = depth_to_normal(depth, K, W)
    refined = normal_to_depth(depth, nres.normals, K, W).depth
    _write_config(out, resolved)
    io.write_pfm(out / "normals.pfm", nres.normals)
    io.write_png(out / "normals.png", plotting.normal_rgb(nres.normals))
    io.write_pfm(out / "refined_depth.pfm", refined)
    io.write_png(out / "refined_depth.png", plotting.depth_colormap(refined))
    print(f"normals and refined depth written to {out}; {int(nres.degenerate.sum())} degenerate pixels")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    height = int(_pick(args, cfg, "height", 8))
    width = int(_pick(args, cfg, "width", 12))
    seed = int(_pick(args, cfg, "seed", 0))
    step = float(_pick(args, cfg, "step", 1e-5))
    tol = float(_pick(args, cfg, "tol", 1e-4))
    tol_total = float(_pick(args, cfg, "tol_total", 1e-3))
    if height < 4 or width < 4 or step <= 0:
        raise ConfigError("gradcheck needs height, width >= 4 and a positive step")
    resolved = {"command": "gradcheck", "height": height, "width": width, "seed": seed,
                "step": step, "tol": tol, "tol_total": tol_total}
    entries = run_suite(height, width, seed, step, tol, tol_total)
    ok = all(e.passed for e in entries)
    for e in entries:
        print(e.report.table(f"[{e.name}] tol {e.tol:g}"))
        print()
    print(f"gradient check {'PASSED' if ok else 'FAILED'}")
    out = _pick(args, cfg, "out")
    if out is not None:
        out = Path(out)
        resolved["out"] = str(out)
        _write_config(out, resolved)
        report = [{"name": e.name, "tol": e.tol, "passed": e.passed,
                   "checks": [asdict(c) for c in e.report.checks], "failure": e.report.failure}
                  for e in entries]
        (out / "gradcheck.json").write_text(json.dumps(report, indent=2))
    return EXIT_OK if ok else EXIT_GRADCHECK


# ---------------------------------------------------------------- ablate

ABLATE_COLUMNS = ["config", *DEPTH_FIELDS, *(f"normal_{k}" for k in NORMAL_FIELDS)]


def _ablate_job(job) -> dict:
    label, scene_dir, out, optim, weights, ablation = job
    summary = _run_optimize(scene_dir, Path(out), OptimConfig(**optim), LossWeights(**weights),
                            Ablation(**ablation))
    row = {"config": label, **summary["depth"]}
    row.update({f"normal_{k}": v for k, v in summary["normals"].items()})
    row["aborted"] = summary["aborted"]
    return row


def _workers() -> int:
    env = os.environ.get("WARPGEO_THREADS")
    if env is None:
        return os.cpu_count() or 1
    try:
        n = int(env)
    except ValueError as e:
        raise ConfigError(f"WARPGEO_THREADS must be an integer, got {env!r}") from e
    if n < 1:
        raise ConfigError("WARPGEO_THREADS must be at least 1")
    return n


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    scene_dir = _pick(args, cfg, "scene")
    optim, weights, base = _resolve_run(args, cfg)
    _load_sequence(scene_dir)
    workers = _workers()
    resolved = {"command": "ablate", "scene": scene_dir, "out": str(out), "optim": asdict(optim),
                "weights": asdict(weights), "ablation": asdict(base)}
    _write_config(out, resolved)
    configs = [("full", base)] + [(label, Ablation(**{**asdict(base), **toggles}))
                                  for label, toggles in ABLATIONS.items()]
    jobs = [(label, scene_dir, str(out / label.replace(" ", "_")), asdict(optim), asdict(weights), asdict(a))
            for label, a in configs]
    if workers == 1:
        rows = [_ablate_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_ablate_job, jobs))
    full, rest = rows[0], rows[1:]
    (out / "full.json").write_text(json.dumps(full, indent=2))
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rest)
    plotting.save_ablation_figure(out / "ablation_fig.png", rows)
    for r in rows:
        print(f"{r['config']:<22} abs_rel {r['abs_rel']:.4f}  normal mean {r['normal_mean_deg']:.2f} deg")
    if any(r["aborted"] for r in rows):
        raise NumericError("at least one ablation run stopped on a non-finite loss")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_run_flags(p) -> None:
    p.add_argument("--scene", help="scene directory written by gen-scene")
    p.add_argument("--steps", type=int, help="optimisation steps")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--scales", type=int, help="pyramid levels")
    p.add_argument("--init", choices=("constant", "ground_truth", "perturbed"))
    p.add_argument("--init-depth", type=float, help="value for constant initialisation")
    p.add_argument("--init-scale", type=float, help="factor for perturbed initialisation")
    p.add_argument("--stage1-fraction", type=float, help="share of steps before the full loss")
    p.add_argument("--optimize-poses", action="store_true", help="optimise poses from zero twists")
    p.add_argument("--alpha", type=float, help="edge-weight alpha for smoothness and consistency")
    for name in ("s", "m", "g", "n"):
        p.add_argument(f"--lambda-{name}", type=float, dest=f"lambda_{name}")
    p.add_argument("--no-dn", action="store_true", help="feed raw depth to the warp")
    p.add_argument("--no-edge-smooth", action="store_true", help="smoothness without image edges")
    p.add_argument("--no-edge-dn", action="store_true", help="uniform depth-normal weights")
    p.add_argument("--no-normal-smooth", action="store_true", help="drop normal smoothness")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warpgeo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config; command-line flags override it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-scene", help="render a synthetic frame triplet")
    common(p)
    p.add_argument("--preset", dest="name", choices=PRESETS)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=float)
    p.add_argument("--baseline-frac", type=float)
    p.add_argument("--tilt-deg", type=float)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("optimize", help="recover depth, normals, masks and poses")
    common(p)
    _add_run_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", help="depth and normal metrics")
    common(p)
    p.add_argument("--run", help="optimize output directory (depth.pfm, normals.pfm)")
    p.add_argument("--scene", help="scene directory (depth_gt.pfm, intrinsics)")
    p.add_argument("--pred-depth")
    p.add_argument("--gt-depth")
    p.add_argument("--pred-normals")
    p.add_argument("--gt-normals")
    p.add_argument("--mask", help="validity mask image (nonzero = evaluate)")
    p.add_argument("--intrinsics", help="JSON with fx, fy, cx, cy, width, height")
    p.add_argument("--cap", type=float)
    p.add_argument("--scale-correct", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("layers", help="apply depth-to-normal and normal-to-depth to a PFM depth map")
    common(p)
    p.add_argument("--depth")
    p.add_argument("--image", help="guide image for edge weights")
    p.add_argument("--intrinsics")
    p.add_argument("--scene")
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_layers)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    common(p)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--tol-total", type=float)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="full model and the four ablations")
    common(p)
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
