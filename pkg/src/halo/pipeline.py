"""Three-stage training (low-frequency field, ray depth field, regularised
high-frequency field) and joint light-field training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from halo.checkpoint import (
    Checkpoint,
    adam_state,
    load_module_params,
    module_params,
    restore_adam_state,
)
from halo.data import LightFieldGrid, PosedImageSet
from halo.encoding import (
    EncodingConfig,
    GaussianEncodingConfig,
    GroupedEncodingConfig,
    SinusoidalEncodingConfig,
    encoding_from_dict,
    epi_align,
)
from halo.fields import (
    PointField,
    PointFieldArch,
    RayField,
    RayFieldArch,
    SceneBounds,
    arch_from_dict,
    canonicalize_rays,
    init_point_field,
    init_ray_field,
    ray_field_depth,
    ray_field_range,
)
from halo.losses import (
    LossWeights,
    loss_consist,
    loss_empty,
    loss_ray_distill,
    loss_reconstruction,
    loss_total,
)
from halo.metrics import psnr, ssim
from halo.rendering import (
    Rays,
    composite,
    depth_guided_sample,
    epi_theta_sample,
    generate_rays,
    render_rays,
    stratified_sample,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StageConfig:
    iterations: int = 8000
    batch_size: int = 3072
    learning_rate: float = 5e-4
    lr_final: float = 5e-5
    samples_per_ray: int = 64
    encoding: EncodingConfig = SinusoidalEncodingConfig(bands=5, scale=32.0)
    dir_encoding: Optional[EncodingConfig] = SinusoidalEncodingConfig(bands=4)
    loss: LossWeights = LossWeights()
    seed: int = 0
    depth: int = 8
    width: int = 256
    skip: Optional[int] = 4
    # depth-guided sampling (stage 3)
    window_fraction: float = 0.2
    uniform_fraction: float = 0.25
    # random rays (stages 2 and 3)
    empty_batch_size: int = 1024
    ray_pool_size: int = 32768
    heldout_rays: int = 8192
    scene_box: float = 1.5
    background: Optional[float] = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoding"] = self.encoding.to_dict()
        d["dir_encoding"] = None if self.dir_encoding is None else self.dir_encoding.to_dict()
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, base: Optional["StageConfig"] = None) -> "StageConfig":
        d = dict(d)
        if "encoding" in d and isinstance(d["encoding"], dict):
            d["encoding"] = encoding_from_dict(d["encoding"])
        if "dir_encoding" in d and isinstance(d["dir_encoding"], dict):
            d["dir_encoding"] = encoding_from_dict(d["dir_encoding"])
        if "loss" in d and isinstance(d["loss"], dict):
            base_loss = base.loss if base is not None else LossWeights()
            d["loss"] = replace(base_loss, **d["loss"])
        return replace(base, **d) if base is not None else cls(**d)

    def point_arch(self) -> PointFieldArch:
        return PointFieldArch(depth=self.depth, width=self.width, skip=self.skip,
                              pos_encoding=self.encoding, dir_encoding=self.dir_encoding)

    def ray_arch(self) -> RayFieldArch:
        return RayFieldArch(depth=self.depth, width=self.width, encoding=self.encoding)


@dataclass(frozen=True)
class JointScheduleConfig:
    alpha_start: float = 1.0
    alpha_end: float = 0.5
    decay_iterations: int = 20000

    def __post_init__(self):
        if not 0.0 < self.alpha_end <= self.alpha_start:
            raise ValueError("need 0 < alpha_end <= alpha_start")
        if self.decay_iterations < 1:
            raise ValueError("decay_iterations must be >= 1")


def alpha_at(iteration: int, sched: JointScheduleConfig) -> float:
    """Sampling-window fraction: linear from alpha_start to alpha_end, then held."""
    frac = min(max(iteration, 0) / sched.decay_iterations, 1.0)
    return sched.alpha_start + (sched.alpha_end - sched.alpha_start) * frac


@dataclass
class StageResult:
    field: torch.nn.Module
    report: dict
    checkpoint: Optional[Checkpoint] = None


class LossLog:
    """Newline-delimited JSON records of (iteration, loss, value)."""

    def __init__(self, path=None, stage: str = ""):
        self.path = None if path is None else Path(path)
        self.stage = stage
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, iteration: int, name: str, value: float):
        if self.path is None:
            return
        with open(self.path, "a") as f:
            f.write(json.dumps({"stage": self.stage, "iteration": iteration, "loss": name,
                                "value": float(value)}) + "\n")


# ---------------------------------------------------------------------------
# helpers


def _train_views(ds: PosedImageSet) -> PosedImageSet:
    return ds.subset("train") if "train" in ds.splits else ds


def dataset_rays(ds: PosedImageSet, dtype=torch.float32) -> tuple[Rays, torch.Tensor]:
    h, w = ds.hw
    parts = [generate_rays(p, h, w, ds.camera_angle_x, ds.bounds.near, ds.bounds.far, dtype) for p in ds.poses]
    rgb = torch.from_numpy(np.ascontiguousarray(ds.images.reshape(-1, 3))).to(dtype)
    return Rays.cat(parts), rgb


def random_rays(pixel_rays: Rays, n: int, gen: torch.Generator, bounds: SceneBounds,
                camera_radius: float, scene_box: float) -> Rays:
    """Half training-pixel rays, half rays from random sphere points through the scene box."""
    dtype = pixel_rays.origins.dtype
    n_pix = n // 2
    idx = torch.randint(len(pixel_rays), (n_pix,), generator=gen)
    pix = pixel_rays[idx]
    m = n - n_pix
    o = torch.randn(m, 3, generator=gen, dtype=torch.float64)
    o = camera_radius * o / o.norm(dim=-1, keepdim=True)
    target = (torch.rand(m, 3, generator=gen, dtype=torch.float64) * 2 - 1) * scene_box
    d = target - o
    d = d / d.norm(dim=-1, keepdim=True)
    rnd = Rays(o.to(dtype), d.to(dtype), torch.full((m,), bounds.near, dtype=dtype),
               torch.full((m,), bounds.far, dtype=dtype))
    return Rays.cat([pix, rnd])


def _lr_at(cfg: StageConfig, it: int) -> float:
    if cfg.iterations <= 1:
        return cfg.learning_rate
    return cfg.learning_rate * (cfg.lr_final / cfg.learning_rate) ** (it / cfg.iterations)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _check_finite(loss: torch.Tensor, stage: str, it: int):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{stage}: loss became {loss.item()} at iteration {it}")


def _freeze(net: torch.nn.Module):
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()


@torch.no_grad()
def _chunked(fn, n: int, chunk: int = 8192):
    outs = [fn(slice(i, min(i + chunk, n))) for i in range(0, n, chunk)]
    if isinstance(outs[0], tuple):
        return tuple(torch.cat(o) for o in zip(*outs))
    return torch.cat(outs)


def ray_field_from_checkpoint(ck: Checkpoint) -> RayField:
    extra = ck.extra
    net = RayField(arch_from_dict(ck.arch), extra["out_low"], extra["out_high"])
    load_module_params(net, ck.params)
    return net


def point_field_from_checkpoint(ck: Checkpoint) -> PointField:
    net = PointField(arch_from_dict(ck.arch))
    load_module_params(net, ck.params)
    return net


def _make_checkpoint(kind, net, arch, it, bounds, opt, gen, extra=None) -> Checkpoint:
    return Checkpoint(kind=kind, arch=arch.to_dict(), params=module_params(net), iteration=it,
                      bounds=None if bounds is None else bounds.to_dict(),
                      encoding=(arch.pos_encoding if kind == "point" else arch.encoding).to_dict(),
                      optimizer=None if opt is None else adam_state(opt, net),
                      rng_state=None if gen is None else gen.get_state().numpy(),
                      extra=extra or {})


def _resume(net, opt, gen, resume: Optional[Checkpoint]) -> int:
    if resume is None:
        return 0
    load_module_params(net, resume.params)
    if resume.optimizer is not None:
        restore_adam_state(opt, net, resume.optimizer)
    if resume.rng_state is not None:
        gen.set_state(torch.from_numpy(np.array(resume.rng_state)))
    return resume.iteration


# ---------------------------------------------------------------------------
# stage 1


def _fit_point_field(net, rays, rgb, cfg, sample_fn, gen, opt, start, stage, logger, extra_loss=None):
    history = []
    for it in range(start, cfg.iterations):
        _set_lr(opt, _lr_at(cfg, it))
        idx = torch.randint(len(rays), (cfg.batch_size,), generator=gen)
        batch = rays[idx]
        ts = sample_fn(idx, batch)
        res = render_rays(net, batch, ts, cfg.background)
        rec = loss_reconstruction(res.rgb, rgb[idx])
        loss = rec
        empty = None
        if extra_loss is not None:
            empty = extra_loss()
            loss = loss_total(rec, empty, cfg.loss)
        _check_finite(loss, stage, it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec_v = rec.item()
        history.append(rec_v)
        if logger is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            logger(it, "rec", rec_v)
            if empty is not None:
                logger(it, "empty", float(empty))
            logger(it, "total", loss.item())
    return history


def _history_psnr(history, window=50):
    """PSNR over the first and last ``window`` batches (per-channel MSE = rec / 3)."""
    if not history:
        return None, None
    w = min(window, len(history))
    first = float(np.mean(history[:w])) / 3.0
    last = float(np.mean(history[-w:])) / 3.0
    to_db = lambda m: float("inf") if m <= 0 else -10 * math.log10(m)
    return to_db(first), to_db(last)


def stage1_train_lo(dataset: PosedImageSet, cfg: StageConfig, logger=None,
                    resume: Optional[Checkpoint] = None) -> StageResult:
    """Fit a low-frequency radiance field to the training views with the reconstruction loss."""
    ds = _train_views(dataset)
    arch = cfg.point_arch()
    net = init_point_field(arch, cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    start = _resume(net, opt, gen, resume)
    rays, rgb = dataset_rays(ds)
    sample = lambda idx, b: stratified_sample(b.near, b.far, cfg.samples_per_ray, gen)
    history = _fit_point_field(net, rays, rgb, cfg, sample, gen, opt, start, "stage1", logger)
    first, last = _history_psnr(history)
    report = {"iterations": cfg.iterations, "train_psnr_first": first, "train_psnr_last": last}
    ck = _make_checkpoint("point", net, arch, max(cfg.iterations, start), dataset.bounds, opt, gen,
                          {"stage": "lo"})
    return StageResult(net, report, ck)


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def render_view(net: PointField, pose, height: int, width: int, camera_angle_x: float,
                bounds: SceneBounds, samples: int, background=1.0, ray_field: Optional[RayField] = None,
                window_fraction: float = 0.2, uniform_fraction: float = 0.25, chunk: int = 4096):
    """Deterministic render (bin-midpoint sampling). Returns (rgb, depth, acc) as numpy arrays."""
    rays = generate_rays(pose, height, width, camera_angle_x, bounds.near, bounds.far,
                         dtype=next(net.parameters()).dtype)
    window = window_fraction * (bounds.far - bounds.near)
    outs = []
    for i in range(0, len(rays), chunk):
        r = rays[i:i + chunk]
        if ray_field is not None and uniform_fraction < 1.0:
            d_hat = ray_field_depth(ray_field, r.origins, r.dirs, bounds)
            ts = depth_guided_sample(d_hat, window, samples, r.near, r.far, uniform_fraction)
        else:
            ts = stratified_sample(r.near, r.far, samples)
        res = render_rays(net, r, ts, background)
        outs.append((res.rgb, res.depth, res.acc))
    rgb, depth, acc = (torch.cat(x) for x in zip(*outs))
    return (rgb.reshape(height, width, 3).clamp(0, 1).numpy(), depth.reshape(height, width).numpy(),
            acc.reshape(height, width).numpy())


def evaluate_views(net: PointField, ds: PosedImageSet, samples: int, background=1.0,
                   ray_field: Optional[RayField] = None, window_fraction=0.2, uniform_fraction=1.0) -> dict:
    h, w = ds.hw
    per_image, renders = [], []
    for img, pose, name in zip(ds.images, ds.poses, ds.names):
        rgb, depth, acc = render_view(net, pose, h, w, ds.camera_angle_x, ds.bounds, samples, background,
                                      ray_field, window_fraction, uniform_fraction)
        per_image.append({"name": name, "psnr": psnr(rgb, img), "ssim": ssim(rgb, img)})
        renders.append((rgb, depth, acc))
    return {
        "per_image": per_image,
        "mean_psnr": float(np.mean([r["psnr"] for r in per_image])) if per_image else None,
        "mean_ssim": float(np.mean([r["ssim"] for r in per_image])) if per_image else None,
        "renders": renders,
    }


# ---------------------------------------------------------------------------
# stage 2


def _camera_radius(ds: PosedImageSet) -> float:
    return float(np.mean(np.linalg.norm(ds.poses[:, :3, 3], axis=-1)))


@torch.no_grad()
def lo_depth_and_acc(lo_field, rays: Rays, samples: int, gen: Optional[torch.Generator] = None):
    """Composited depth and occupancy of every ray under a frozen field."""
    def one(s):
        r = rays[s]
        res = render_rays(lo_field, r, stratified_sample(r.near, r.far, samples, gen))
        return res.depth, res.acc
    return _chunked(one, len(rays))


def stage2_distill_ray(lo_field: PointField, dataset: PosedImageSet, cfg: StageConfig, logger=None,
                       resume: Optional[Checkpoint] = None) -> StageResult:
    """Distil the frozen low-frequency field's depth into a ray field."""
    _freeze(lo_field)
    bounds = dataset.bounds
    train = _train_views(dataset)
    pix_rays, _ = dataset_rays(train)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    cam_r = _camera_radius(train)
    pool = random_rays(pix_rays, cfg.ray_pool_size, gen, bounds, cam_r, cfg.scene_box)
    lo_depth, lo_acc = lo_depth_and_acc(lo_field, pool, cfg.samples_per_ray, gen)
    can_o, t_entry = canonicalize_rays(pool.origins, pool.dirs, bounds.radius)
    inputs = torch.cat([can_o, pool.dirs], -1)
    target = lo_depth - t_entry

    arch = cfg.ray_arch()
    lo_out, hi_out = ray_field_range(bounds)
    net = init_ray_field(arch, lo_out, hi_out, cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    start = _resume(net, opt, gen, resume)
    for it in range(start, cfg.iterations):
        _set_lr(opt, _lr_at(cfg, it))
        idx = torch.randint(len(pool), (cfg.batch_size,), generator=gen)
        loss = loss_ray_distill(net(inputs[idx]), target[idx], lo_acc[idx], cfg.loss.tau)
        _check_finite(loss, "stage2", it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if logger is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            logger(it, "ray", loss.item())

    report = {"iterations": cfg.iterations, **heldout_depth_error(net, lo_field, dataset, cfg)}
    ck = _make_checkpoint("ray", net, arch, max(cfg.iterations, start), bounds, opt, gen,
                          {"stage": "ray", "out_low": lo_out, "out_high": hi_out})
    return StageResult(net, report, ck)


@torch.no_grad()
def heldout_depth_error(ray_net: RayField, lo_field: PointField, dataset: PosedImageSet,
                        cfg: StageConfig) -> dict:
    """Gated depth MAE of the ray field against the low-frequency field on unseen rays."""
    bounds = dataset.bounds
    gen = torch.Generator().manual_seed(cfg.seed + 1000)
    train = _train_views(dataset)
    test = dataset.subset("test") if "test" in dataset.splits else train
    test_rays, _ = dataset_rays(test)
    pix = test_rays[torch.randint(len(test_rays), (cfg.heldout_rays,), generator=gen)]
    rays = random_rays(pix, cfg.heldout_rays, gen, bounds, _camera_radius(train), cfg.scene_box)
    lo_depth, lo_acc = lo_depth_and_acc(lo_field, rays, cfg.samples_per_ray)
    pred = _chunked(lambda s: ray_field_depth(ray_net, rays.origins[s], rays.dirs[s], bounds), len(rays))
    keep = lo_acc >= cfg.loss.tau
    mae = float((pred[keep] - lo_depth[keep]).abs().mean()) if keep.any() else float("nan")
    return {"heldout_depth_mae": mae, "heldout_mae_fraction": mae / (bounds.far - bounds.near),
            "heldout_gated_rays": int(keep.sum())}


# ---------------------------------------------------------------------------
# stage 3


def stage3_train_hi(ray_field: Optional[RayField], lo_field: Optional[PointField], dataset: PosedImageSet,
                    cfg: StageConfig, logger=None, resume: Optional[Checkpoint] = None) -> StageResult:
    """Train the high-frequency field with depth-guided sampling and the empty-space loss.

    With ``lambda_empty == 0`` and ``uniform_fraction == 1`` this is plain
    NeRF training, and neither earlier field is needed.
    """
    guided = cfg.uniform_fraction < 1.0
    use_empty = cfg.loss.lambda_empty > 0
    if guided and ray_field is None:
        raise ValueError("depth-guided sampling needs a ray field")
    if use_empty and lo_field is None:
        raise ValueError("the empty-space loss needs the low-frequency field")
    for frozen in (ray_field, lo_field):
        if frozen is not None:
            _freeze(frozen)
    bounds = dataset.bounds
    train = _train_views(dataset)
    rays, rgb = dataset_rays(train)
    gen = torch.Generator().manual_seed(cfg.seed + 3)
    window = cfg.window_fraction * (bounds.far - bounds.near)

    d_hat = None
    if guided:
        d_hat = _chunked(lambda s: ray_field_depth(ray_field, rays.origins[s], rays.dirs[s], bounds), len(rays))
        d_hat = d_hat.clamp(bounds.near, bounds.far)

    pool = pool_acc = None
    if use_empty:
        pool = random_rays(rays, cfg.ray_pool_size, gen, bounds, _camera_radius(train), cfg.scene_box)
        _, pool_acc = lo_depth_and_acc(lo_field, pool, cfg.samples_per_ray, gen)

    arch = cfg.point_arch()
    net = init_point_field(arch, cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    start = _resume(net, opt, gen, resume)

    def sample(idx, batch):
        if guided:
            return depth_guided_sample(d_hat[idx], window, cfg.samples_per_ray, batch.near, batch.far,
                                       cfg.uniform_fraction, gen)
        return stratified_sample(batch.near, batch.far, cfg.samples_per_ray, gen)

    def empty_loss():
        eidx = torch.randint(len(pool), (cfg.empty_batch_size,), generator=gen)
        lo_acc = pool_acc[eidx]
        q = lo_acc < cfg.loss.tau
        er = pool[eidx[q]]
        if len(er) == 0:
            return torch.zeros((), dtype=rgb.dtype)
        res = render_rays(net, er, stratified_sample(er.near, er.far, cfg.samples_per_ray, gen))
        return loss_empty(res.acc, lo_acc, cfg.loss.tau, batch_size=cfg.empty_batch_size)

    history = _fit_point_field(net, rays, rgb, cfg, sample, gen, opt, start, "stage3", logger,
                               empty_loss if use_empty else None)
    first, last = _history_psnr(history)
    report = {"iterations": cfg.iterations, "train_psnr_first": first, "train_psnr_last": last,
              "lo_empty_pool_fraction": None if pool_acc is None else float((pool_acc < cfg.loss.tau).float().mean())}
    ck = _make_checkpoint("point", net, arch, max(cfg.iterations, start), bounds, opt, gen, {"stage": "hi"})
    return StageResult(net, report, ck)


@torch.no_grad()
def empty_space_occupancy(hi_field: PointField, lo_field: PointField, dataset: PosedImageSet,
                          cfg: StageConfig, n_rays: int = 8192, seed: int = 12345) -> dict:
    """Mean high-frequency occupancy on fresh rays the low-frequency field sees as empty."""
    gen = torch.Generator().manual_seed(seed)
    train = _train_views(dataset)
    rays, _ = dataset_rays(train)
    pool = random_rays(rays, n_rays, gen, dataset.bounds, _camera_radius(train), cfg.scene_box)
    _, lo_acc = lo_depth_and_acc(lo_field, pool, cfg.samples_per_ray)
    q = lo_acc < cfg.loss.tau
    if not q.any():
        return {"empty_rays": 0, "mean_hi_acc_on_empty": float("nan")}
    _, hi_acc = lo_depth_and_acc(hi_field, pool[q], cfg.samples_per_ray)
    return {"empty_rays": int(q.sum()), "mean_hi_acc_on_empty": float(hi_acc.mean())}


# ---------------------------------------------------------------------------
# joint light-field training


@dataclass(frozen=True)
class LightFieldConfig:
    iterations: int = 20000
    batch_size: int = 3072
    learning_rate: float = 5e-4
    lr_final: float = 5e-5
    samples_per_ray: int = 64
    st_std: float = 64.0
    st_features: int = 10
    theta_std: float = 8.0
    theta_features: int = 5
    uv_std: float = 64.0
    uv_features: int = 10
    ray_encoding: EncodingConfig = SinusoidalEncodingConfig(bands=2)
    ray_depth: int = 6
    ray_width: int = 128
    depth: int = 8
    width: int = 256
    skip: Optional[int] = 4
    lambda_consist: float = 1.0
    u_star: float = 0.0
    v_star: float = 0.0
    seed: int = 0
    log_every: int = 100

    @classmethod
    def from_dict(cls, d: dict, base: Optional["LightFieldConfig"] = None) -> "LightFieldConfig":
        d = dict(d)
        if isinstance(d.get("ray_encoding"), dict):
            d["ray_encoding"] = encoding_from_dict(d["ray_encoding"])
        return replace(base, **d) if base is not None else cls(**d)

    def point_arch(self) -> PointFieldArch:
        pos = GroupedEncodingConfig(groups=(
            ((0, 1), GaussianEncodingConfig(self.st_std, self.st_features, self.seed)),
            ((2,), GaussianEncodingConfig(self.theta_std, self.theta_features, self.seed + 1)),
        ))
        return PointFieldArch(depth=self.depth, width=self.width, skip=self.skip, pos_encoding=pos,
                              dir_encoding=GaussianEncodingConfig(self.uv_std, self.uv_features, self.seed + 2),
                              pos_dim=3, dir_dim=2)

    def ray_arch(self) -> RayFieldArch:
        return RayFieldArch(depth=self.ray_depth, width=self.ray_width, encoding=self.ray_encoding,
                            input_kind="lightfield")


def _theta_window(theta_ray, alpha, theta_near, theta_far):
    half = alpha * (theta_far - theta_near)
    c = theta_ray.clamp(theta_near, theta_far)
    return (c - half).clamp_min(theta_near), (c + half).clamp_max(theta_far)


def render_epi_rays(point_net: PointField, uvst: torch.Tensor, thetas: torch.Tensor, theta_far,
                    theta_near: float, theta_top: float, cfg: LightFieldConfig):
    """Composite over theta samples of each (u, v, s, t) ray."""
    u, v, s, t = (uvst[:, i:i + 1] for i in range(4))
    pt = epi_align(u, v, s, t, thetas, cfg.u_star, cfg.v_star)
    mid, half = 0.5 * (theta_near + theta_top), 0.5 * (theta_top - theta_near)
    pts = torch.stack([pt.s_prime, pt.t_prime, (thetas - mid) / half], -1)
    dirs = uvst[:, None, :2].expand(-1, thetas.shape[-1], 2)
    rgb, sigma = point_net(pts, dirs)
    return composite(sigma, rgb, thetas, theta_far, None, validate=False)


def joint_train_lightfield(train: LightFieldGrid, cfg: LightFieldConfig, schedule: JointScheduleConfig,
                           theta_range: Optional[tuple] = None, logger=None) -> tuple[RayField, PointField, dict]:
    """Jointly fit a theta-predicting ray field and an EPI radiance field.

    Samples concentrate around the ray field's theta as alpha shrinks; the
    ray field follows the radiance field's composited theta.
    """
    th_n, th_f = theta_range if theta_range is not None else (train.theta_near, train.theta_far)
    if th_n is None or th_f is None:
        raise ValueError("light-field training needs a theta range")
    dtype = torch.float32
    uvst_np, rgb_np = train.rays()
    uvst = torch.from_numpy(uvst_np).to(dtype)
    rgb = torch.from_numpy(np.ascontiguousarray(rgb_np)).to(dtype)
    point_arch, ray_arch = cfg.point_arch(), cfg.ray_arch()
    point_net = init_point_field(point_arch, cfg.seed)
    ray_net = init_ray_field(ray_arch, th_n, th_f, cfg.seed + 7)
    opt_p = torch.optim.Adam(point_net.parameters(), lr=cfg.learning_rate)
    opt_r = torch.optim.Adam(ray_net.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed + 4)
    history = []
    for it in range(cfg.iterations):
        lr = cfg.learning_rate * (cfg.lr_final / cfg.learning_rate) ** (it / max(cfg.iterations, 1))
        _set_lr(opt_p, lr)
        _set_lr(opt_r, lr)
        idx = torch.randint(len(uvst), (cfg.batch_size,), generator=gen)
        x = uvst[idx]
        alpha = alpha_at(it, schedule)
        theta_ray = ray_net(x)
        _, hi = _theta_window(theta_ray.detach(), alpha, th_n, th_f)
        thetas = epi_theta_sample(theta_ray.detach(), alpha, th_n, th_f, cfg.samples_per_ray, gen)
        res = render_epi_rays(point_net, x, thetas, hi, th_n, th_f, cfg)
        rec = loss_reconstruction(res.rgb, rgb[idx])
        loss = rec
        if cfg.lambda_consist > 0:
            theta_nerf = (res.weights * thetas).sum(-1) / res.acc.clamp_min(1e-10)
            consist = loss_consist(theta_ray, theta_nerf)
            loss = rec + cfg.lambda_consist * consist
        _check_finite(loss, "joint", it)
        opt_p.zero_grad(set_to_none=True)
        opt_r.zero_grad(set_to_none=True)
        loss.backward()
        opt_p.step()
        if cfg.lambda_consist > 0:
            opt_r.step()
        history.append(rec.item())
        if logger is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            logger(it, "rec", rec.item())
            if cfg.lambda_consist > 0:
                logger(it, "consist", consist.item())
    first, last = _history_psnr(history)
    report = {"iterations": cfg.iterations, "train_psnr_first": first, "train_psnr_last": last,
              "final_alpha": alpha_at(cfg.iterations, schedule)}
    return ray_net, point_net, report


@torch.no_grad()
def render_lightfield_views(ray_net: RayField, point_net: PointField, grid: LightFieldGrid,
                            cfg: LightFieldConfig, alpha: float, theta_range=None, chunk: int = 4096):
    th_n, th_f = theta_range if theta_range is not None else (grid.theta_near, grid.theta_far)
    uvst_np, _ = grid.rays()
    uvst = torch.from_numpy(uvst_np).float()
    outs = []
    for i in range(0, len(uvst), chunk):
        x = uvst[i:i + chunk]
        theta_ray = ray_net(x)
        _, hi = _theta_window(theta_ray, alpha, th_n, th_f)
        thetas = epi_theta_sample(theta_ray, alpha, th_n, th_f, cfg.samples_per_ray)
        outs.append(render_epi_rays(point_net, x, thetas, hi, th_n, th_f, cfg).rgb)
    n, h, w = grid.images.shape[:3]
    return torch.cat(outs).clamp(0, 1).reshape(n, h, w, 3).numpy()
