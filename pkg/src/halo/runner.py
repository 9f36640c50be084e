"""Command implementations behind the CLI, working in a run directory::

    <out>/checkpoints/{lo,ray,hi,vanilla}.ckpt
    <out>/renders/<stage>/*.png, *.depth
    <out>/logs/losses.jsonl
    <out>/figures/*.png
    <out>/report.json     merged metrics of every command run so far
    <out>/manifest.json   config hash, seeds, versions
"""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from halo import __version__, plotting
from halo.checkpoint import Checkpoint
from halo.config import RunConfig
from halo.data import (
    PosedImageSet,
    load_blender,
    load_lightfield_grid,
    make_lightfield_scene,
    make_procedural_scene,
    orbit_pose,
    read_png,
    STANFORD_CORNERS,
    STANFORD_EVAL,
    write_depth_map,
    write_png,
)
from halo.encoding import encoding_from_dict
from halo.fields import SceneBounds
from halo.freq_tuning import tune_frequency
from halo.metrics import psnr, ssim
from halo.pipeline import (
    LossLog,
    empty_space_occupancy,
    evaluate_views,
    joint_train_lightfield,
    point_field_from_checkpoint,
    ray_field_from_checkpoint,
    render_lightfield_views,
    render_view,
    stage1_train_lo,
    stage2_distill_ray,
    stage3_train_hi,
)

log = logging.getLogger(__name__)

STAGE_ORDER = ("lo", "ray", "hi", "vanilla")
PREREQS = {"lo": (), "ray": ("lo",), "hi": ("lo", "ray"), "vanilla": ()}
STAGE_VERSIONS = {"lo": 1, "ray": 1, "hi": 1, "vanilla": 1, "joint": 1}


class MissingPrerequisite(RuntimeError):
    pass


def _json_safe(x):
    """Strict JSON: non-finite floats become the strings "inf", "-inf", "nan"."""
    if isinstance(x, dict):
        return {str(k): _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


class RunDir:
    def __init__(self, root):
        self.root = Path(root)
        for sub in ("checkpoints", "renders", "logs", "figures"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def ckpt(self, stage: str) -> Path:
        return self.root / "checkpoints" / f"{stage}.ckpt"

    @property
    def report_path(self) -> Path:
        return self.root / "report.json"

    def read_report(self) -> dict:
        if self.report_path.is_file():
            return json.loads(self.report_path.read_text())
        return {}

    def update_report(self, key: str, value) -> dict:
        rep = self.read_report()
        rep[key] = _json_safe(value)
        write_json(self.report_path, rep)
        return rep

    def logger(self, stage: str) -> LossLog:
        return LossLog(self.root / "logs" / "losses.jsonl", stage)

    def write_manifest(self, cfg: RunConfig, command: str, extra: Optional[dict] = None) -> None:
        path = self.root / "manifest.json"
        man = json.loads(path.read_text()) if path.is_file() else {"commands": []}
        man.update({
            "config_hash": cfg.config_hash(), "config": cfg.raw, "seed": cfg.seed, "profile": cfg.profile,
            "stage_versions": STAGE_VERSIONS, "halo_version": __version__, "torch_version": torch.__version__,
            "numpy_version": np.__version__, "python": platform.python_version(),
            "num_threads": torch.get_num_threads(),
        })
        man["commands"].append({"command": command, "time": time.strftime("%Y-%m-%dT%H:%M:%S"), **(extra or {})})
        write_json(path, man)


# ---------------------------------------------------------------------------
# scenes


def load_scene(cfg: RunConfig) -> PosedImageSet:
    sc = cfg.scene
    kind = sc.get("kind", "procedural")
    if kind == "procedural":
        return make_procedural_scene(cfg.procedural_spec(), seed=cfg.seed)
    if kind == "blender":
        if not sc.get("path"):
            raise ValueError("scene.path is required for blender scenes")
        near, far = sc.get("near", 2.0), sc.get("far", 6.0)
        train = load_blender(sc["path"], "train", sc.get("subset"), near, far)
        test = load_blender(sc["path"], sc.get("test_split", "test"), sc.get("test_subset"), near, far)
        test_stride = int(sc.get("test_stride", 1))
        idx = list(range(0, len(test), test_stride))
        return PosedImageSet(np.concatenate([train.images, test.images[idx]]),
                             np.concatenate([train.poses, test.poses[idx]]), train.camera_angle_x, train.bounds,
                             train.names + [test.names[i] for i in idx],
                             ["train"] * len(train) + ["test"] * len(idx))
    raise ValueError(f"unknown scene kind {kind!r}")


def _tuned_encoding(run: RunDir):
    rep = run.read_report().get("tune_freq")
    if rep and rep.get("chosen"):
        return encoding_from_dict(rep["chosen"])
    return None


# ---------------------------------------------------------------------------
# tune-freq


def cmd_tune_freq(cfg: RunConfig, out) -> dict:
    run = RunDir(out)
    run.write_manifest(cfg, "tune-freq")
    scene = load_scene(cfg)
    crit = cfg.criterion
    base = replace(cfg.stages["lo"], iterations=cfg.tune_short_iterations)
    res_px = crit.render_resolution

    def train_short(enc):
        field = stage1_train_lo(scene, replace(base, encoding=enc), run.logger(f"tune/{enc.to_dict()}")).field

        def render(pose):
            rgb, _, _ = render_view(field, pose, res_px, res_px, scene.camera_angle_x, scene.bounds,
                                    cfg.stages["lo"].samples_per_ray)
            return rgb
        return render

    lo_e, hi_e = np.radians(crit.elevation_deg)
    sampler = lambda g: orbit_pose(g.uniform(0, 2 * np.pi), g.uniform(lo_e, hi_e), crit.camera_distance)
    result = tune_frequency(train_short, cfg.tune_candidates, crit, seed=cfg.seed, pose_sampler=sampler)
    report = {"chosen": result.chosen.to_dict(), "passed": result.passed, "rows": result.rows,
              "threshold": crit.threshold}
    fig = plotting.tuning_figure(result.rows, crit.threshold, run.root / "figures" / "tune_freq.png")
    report["figure"] = str(fig.relative_to(run.root))
    run.update_report("tune_freq", report)
    return report


# ---------------------------------------------------------------------------
# train


def _check_prereqs(run: RunDir, stage: str):
    for p in PREREQS[stage]:
        if not run.ckpt(p).is_file():
            raise MissingPrerequisite(f"missing prerequisite checkpoint: {run.ckpt(p)} (run --stage {p} first)")


def _resume_ckpt(run: RunDir, stage: str, resume: bool):
    if resume and run.ckpt(stage).is_file():
        return Checkpoint.load(run.ckpt(stage))
    return None


def _eval_block(net, scene, cfg, ray_field=None, uniform_fraction=1.0, render_dir=None):
    test = scene.subset("test") if "test" in scene.splits else scene
    ev = evaluate_views(net, test, cfg.eval_samples, ray_field=ray_field, uniform_fraction=uniform_fraction)
    if render_dir is not None:
        render_dir = Path(render_dir)
        for (rgb, depth, acc), r in zip(ev["renders"], ev["per_image"]):
            stem = Path(r["name"]).stem
            write_png(render_dir / f"{stem}.png", rgb)
            write_depth_map(render_dir / f"{stem}.depth", np.stack([depth, acc], -1), ("depth", "acc"))
        if ev["renders"]:
            rgb, depth, acc = ev["renders"][0]
            plotting.render_figure(rgb, depth, acc, render_dir / "overview.png", gt=test.images[0],
                                   depth_range=(scene.bounds.near, scene.bounds.far))
    return {k: ev[k] for k in ("per_image", "mean_psnr", "mean_ssim")}


def _run_stage(stage: str, cfg: RunConfig, run: RunDir, scene, resume: bool) -> dict:
    _check_prereqs(run, stage)
    prev = _resume_ckpt(run, stage, resume)
    stage_cfg = cfg.stages["hi" if stage == "vanilla" else stage]
    if stage == "vanilla":
        stage_cfg = cfg.vanilla()
    if stage == "lo":
        tuned = _tuned_encoding(run)
        if tuned is not None:
            stage_cfg = replace(stage_cfg, encoding=tuned)
    if prev is not None and prev.iteration >= stage_cfg.iterations:
        log.info("%s: checkpoint already at iteration %d, skipping", stage, prev.iteration)
        return run.read_report().get(stage, {"iterations": prev.iteration, "skipped": True})
    t0 = time.time()
    logger = run.logger(stage)
    if stage == "lo":
        res = stage1_train_lo(scene, stage_cfg, logger, prev)
        report = {**res.report, "encoding": stage_cfg.encoding.to_dict(),
                  "eval": _eval_block(res.field, scene, cfg, render_dir=run.root / "renders" / "lo")}
    elif stage == "ray":
        lo = point_field_from_checkpoint(Checkpoint.load(run.ckpt("lo")))
        res = stage2_distill_ray(lo, scene, stage_cfg, logger, prev)
        report = dict(res.report)
    elif stage == "hi":
        lo = point_field_from_checkpoint(Checkpoint.load(run.ckpt("lo")))
        ray = ray_field_from_checkpoint(Checkpoint.load(run.ckpt("ray")))
        res = stage3_train_hi(ray, lo, scene, stage_cfg, logger, prev)
        report = {**res.report,
                  "eval": _eval_block(res.field, scene, cfg, ray, stage_cfg.uniform_fraction,
                                      run.root / "renders" / "hi"),
                  **empty_space_occupancy(res.field, lo, scene, stage_cfg)}
    else:
        res = stage3_train_hi(None, None, scene, stage_cfg, logger, prev)
        report = {**res.report, "eval": _eval_block(res.field, scene, cfg, render_dir=run.root / "renders" / "vanilla")}
        if run.ckpt("lo").is_file():
            lo = point_field_from_checkpoint(Checkpoint.load(run.ckpt("lo")))
            report.update(empty_space_occupancy(res.field, lo, scene, stage_cfg))
    res.checkpoint.save(run.ckpt(stage))
    report["seconds"] = round(time.time() - t0, 2)
    run.update_report(stage, report)
    return report


def _summary(run: RunDir) -> dict:
    rep = run.read_report()
    out = {}
    hi, van = rep.get("hi", {}).get("eval", {}), rep.get("vanilla", {}).get("eval", {})
    if isinstance(hi.get("mean_psnr"), float) and isinstance(van.get("mean_psnr"), float):
        out["halo_minus_vanilla_psnr"] = hi["mean_psnr"] - van["mean_psnr"]
    if "mean_hi_acc_on_empty" in rep.get("hi", {}):
        out["mean_hi_acc_on_empty"] = rep["hi"]["mean_hi_acc_on_empty"]
    if "heldout_mae_fraction" in rep.get("ray", {}):
        out["ray_heldout_mae_fraction"] = rep["ray"]["heldout_mae_fraction"]
    return out


def _loss_figure(run: RunDir):
    path = run.root / "logs" / "losses.jsonl"
    if path.is_file():
        recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        plotting.loss_curve_figure(recs, run.root / "figures" / "losses.png")


def cmd_train(cfg: RunConfig, out, stage: str = "all", resume: bool = False) -> dict:
    run = RunDir(out)
    run.write_manifest(cfg, "train", {"stage": stage, "resume": resume})
    if stage == "joint":
        rep = cmd_joint(cfg, run)
        _loss_figure(run)
        return rep
    stages = STAGE_ORDER if stage == "all" else (stage,)
    if any(s not in STAGE_ORDER for s in stages):
        raise ValueError(f"unknown stage {stage!r}")
    if stage != "all":
        _check_prereqs(run, stage)
    scene = load_scene(cfg)
    reports = {s: _run_stage(s, cfg, run, scene, resume) for s in stages}
    if stage == "all":
        run.update_report("summary", _summary(run))
    _loss_figure(run)
    return reports


# ---------------------------------------------------------------------------
# joint light-field training


def load_lightfield(cfg: RunConfig):
    lf = cfg.raw.get("lightfield", {})
    if lf.get("path"):
        train, ev = load_lightfield_grid(lf["path"], STANFORD_CORNERS, STANFORD_EVAL, lf.get("grid_size"))
        theta = (lf.get("theta_near", train.theta_near), lf.get("theta_far", train.theta_far))
        return train, ev, theta
    spec = cfg.lightfield_spec
    train = make_lightfield_scene(spec, STANFORD_CORNERS)
    ev = make_lightfield_scene(spec, STANFORD_EVAL)
    return train, ev, spec.theta_range


def _lf_eval(ray_net, point_net, grid, jcfg, alpha, theta):
    pred = render_lightfield_views(ray_net, point_net, grid, jcfg, alpha, theta)
    per = [{"index": list(ix), "psnr": psnr(p, g), "ssim": ssim(p, g)}
           for p, g, ix in zip(pred, grid.images, grid.indices)]
    return pred, {"per_image": per, "mean_psnr": float(np.mean([r["psnr"] for r in per])),
                  "mean_ssim": float(np.mean([r["ssim"] for r in per]))}


def cmd_joint(cfg: RunConfig, run: RunDir) -> dict:
    """Joint training plus the no-narrowing, no-consistency baseline."""
    train, ev, theta = load_lightfield(cfg)
    report = {}
    variants = {
        "halo": (cfg.joint, cfg.schedule),
        "baseline": (replace(cfg.joint, lambda_consist=0.0),
                     replace(cfg.schedule, alpha_end=cfg.schedule.alpha_start)),
    }
    for name, (jcfg, sched) in variants.items():
        t0 = time.time()
        ray_net, point_net, rep = joint_train_lightfield(train, jcfg, sched, theta, run.logger(f"joint/{name}"))
        alpha = rep["final_alpha"]
        pred, metrics = _lf_eval(ray_net, point_net, ev, jcfg, alpha, theta)
        for img, ix in zip(pred, ev.indices):
            write_png(run.root / "renders" / f"joint_{name}" / f"view_{ix[0]:02d}_{ix[1]:02d}.png", img)
        report[name] = {**rep, "eval": metrics, "seconds": round(time.time() - t0, 2)}
    report["halo_minus_baseline_psnr"] = report["halo"]["eval"]["mean_psnr"] - report["baseline"]["eval"]["mean_psnr"]
    run.update_report("joint", report)
    return report


# ---------------------------------------------------------------------------
# render / eval


def _poses_from(path) -> tuple[np.ndarray, float, list]:
    meta = json.loads(Path(path).read_text())
    poses = np.asarray([f["transform_matrix"] for f in meta["frames"]], dtype=np.float64)
    names = [Path(f.get("file_path", f"r_{i}")).stem for i, f in enumerate(meta["frames"])]
    return poses, float(meta["camera_angle_x"]), names


def cmd_render(checkpoint, out, poses=None, cfg: Optional[RunConfig] = None, ray_checkpoint=None,
               height: Optional[int] = None, width: Optional[int] = None, samples: Optional[int] = None) -> dict:
    """Render colour PNGs and depth/occupancy sidecars for every pose.

    ``poses`` is a transforms-style JSON; without it the config scene's test
    cameras are used.
    """
    ck = Checkpoint.load(checkpoint)
    if ck.kind != "point":
        raise ValueError("render needs a radiance-field (point) checkpoint")
    net = point_field_from_checkpoint(ck)
    ray = ray_field_from_checkpoint(Checkpoint.load(ray_checkpoint)) if ray_checkpoint else None
    bounds = SceneBounds.from_dict(ck.bounds) if ck.bounds else SceneBounds()
    if poses is not None:
        pose_arr, angle, names = _poses_from(poses)
        h, w = height or 100, width or 100
    else:
        if cfg is None:
            raise ValueError("render needs --poses or a config with a scene")
        scene = load_scene(cfg)
        test = scene.subset("test") if "test" in scene.splits else scene
        pose_arr, angle, names = test.poses, test.camera_angle_x, [Path(n).stem for n in test.names]
        h, w = height or test.hw[0], width or test.hw[1]
    k = samples or (cfg.eval_samples if cfg else 64)
    out = Path(out)
    written = []
    for pose, name in zip(pose_arr, names):
        rgb, depth, acc = render_view(net, pose, h, w, angle, bounds, k, ray_field=ray,
                                      uniform_fraction=0.25 if ray is not None else 1.0)
        write_png(out / f"{name}.png", rgb)
        write_depth_map(out / f"{name}.depth", np.stack([depth, acc], -1), ("depth", "acc"))
        written.append(name)
    return {"rendered": written, "out": str(out)}


def cmd_eval(renders, ground_truth, out=None) -> dict:
    """PSNR / SSIM of every PNG in ``renders`` against the same-named file in ``ground_truth``."""
    renders, gt = Path(renders), Path(ground_truth)
    for d in (renders, gt):
        if not d.is_dir():
            raise FileNotFoundError(f"no such directory: {d}")
    names = sorted(p.name for p in renders.glob("*.png") if p.name != "overview.png")
    if not names:
        raise ValueError(f"no PNG renders in {renders}")
    per = []
    for n in names:
        a, b = read_png(renders / n), read_png(gt / n)
        per.append({"name": n, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    report = {"per_image": per, "mean_psnr": float(np.mean([r["psnr"] for r in per])),
              "mean_ssim": float(np.mean([r["ssim"] for r in per])), "count": len(per)}
    if out is not None:
        run = RunDir(out)
        run.update_report("eval", report)
    return report


# ---------------------------------------------------------------------------
# toy2d


def cmd_toy2d(cfg: RunConfig, out) -> dict:
    from halo import toy2d

    run = RunDir(out)
    run.write_manifest(cfg, "toy2d")
    t = cfg.toy2d
    size, factor = int(t["size"]), int(t["factor"])
    img = toy2d.detailed_image(size, seed=cfg.seed)
    interp = {}
    for name, enc in (("low", toy2d.LOW), ("high", toy2d.HIGH)):
        fitted = toy2d.fit_image_field(img, enc, int(t["iterations"]), seed=cfg.seed)
        interp[name] = {**toy2d.interpolate_experiment(fitted, img, factor), "train_psnr": fitted.train_psnr}
    plotting.toy_interpolation_figure(img, interp["low"], interp["high"], run.root / "figures" / "toy2d_interpolation.png")

    pattern = toy2d.checkerboard(size, int(t["cells"]))
    mask = toy2d.corner_mask(size, float(t["mask_fraction"]))
    seeds = [int(s) for s in t["seeds"]]
    extrap = []
    for s in seeds:
        r = toy2d.extrapolate_experiment(pattern, mask, {"low": toy2d.LOW, "high": toy2d.HIGH},
                                         int(t["extrapolate_iterations"]), seed=s)
        if s == seeds[0]:
            plotting.toy_extrapolation_figure(pattern, mask, r, run.root / "figures" / "toy2d_extrapolation.png")
        extrap.append({"seed": s, **{k: {"masked_accuracy": v["masked_accuracy"], "train_psnr": v["train_psnr"]}
                                     for k, v in r.items()}})
    report = {
        "interpolation": {k: {"train_psnr": v["train_psnr"], "hf_energy_ratio": v["hf_energy_ratio"]}
                          for k, v in interp.items()},
        "extrapolation": extrap,
        "figures": ["figures/toy2d_interpolation.png", "figures/toy2d_extrapolation.png"],
    }
    run.update_report("toy2d", report)
    return report
