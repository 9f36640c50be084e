"""Ray generation, sampling along rays, and volume-rendering quadrature."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch

DEPTH_EPS = 1e-10


@dataclass
class Rays:
    """A batch of rays. ``origins``/``dirs`` are (N, 3); ``near``/``far`` are (N,)."""

    origins: torch.Tensor
    dirs: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor

    def __post_init__(self):
        n = self.origins.shape[0]
        if self.near.dim() == 0:
            self.near = self.near.expand(n)
        if self.far.dim() == 0:
            self.far = self.far.expand(n)

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx])

    @classmethod
    def cat(cls, parts) -> "Rays":
        return cls(*(torch.cat([getattr(p, k) for p in parts]) for k in ("origins", "dirs", "near", "far")))

    def to(self, dtype) -> "Rays":
        return Rays(self.origins.to(dtype), self.dirs.to(dtype), self.near.to(dtype), self.far.to(dtype))


@dataclass
class RenderResult:
    rgb: torch.Tensor
    acc: torch.Tensor
    depth: torch.Tensor
    weights: torch.Tensor
    final_transmittance: torch.Tensor


def focal_from_angle(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


def check_rigid(pose, atol: float = 1e-6):
    pose = torch.as_tensor(pose, dtype=torch.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {tuple(pose.shape)}")
    if not torch.isfinite(pose).all():
        raise ValueError("pose contains non-finite entries")
    r = pose[:3, :3]
    if not torch.allclose(r.T @ r, torch.eye(3, dtype=torch.float64), atol=atol):
        raise ValueError("pose rotation is not orthonormal")
    if abs(float(torch.linalg.det(r)) - 1.0) > atol:
        raise ValueError("pose rotation has determinant != 1")
    if not torch.allclose(pose[3], torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64), atol=atol):
        raise ValueError("pose bottom row must be (0, 0, 0, 1)")


def generate_rays(pose, height: int, width: int, camera_angle_x: float,
                  near: float = 2.0, far: float = 6.0, dtype=torch.float32) -> Rays:
    """One ray per pixel, row-major, through pixel centres.

    Blender convention: the camera looks down its -z axis with +y up.
    """
    check_rigid(pose)
    pose = torch.as_tensor(pose, dtype=torch.float64)
    focal = focal_from_angle(width, camera_angle_x)
    j, i = torch.meshgrid(torch.arange(height, dtype=torch.float64),
                          torch.arange(width, dtype=torch.float64), indexing="ij")
    cam_dirs = torch.stack([(i + 0.5 - 0.5 * width) / focal,
                            -(j + 0.5 - 0.5 * height) / focal,
                            -torch.ones_like(i)], dim=-1).reshape(-1, 3)
    dirs = cam_dirs @ pose[:3, :3].T
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = pose[:3, 3].expand_as(dirs)
    n = dirs.shape[0]
    return Rays(origins.to(dtype).contiguous(), dirs.to(dtype),
                torch.full((n,), near, dtype=dtype), torch.full((n,), far, dtype=dtype))


def _stratify(lo: torch.Tensor, hi: torch.Tensor, k: int, generator: Optional[torch.Generator]):
    """k samples per row of [lo, hi], one per equal-width bin. No generator means bin midpoints."""
    lo = lo.unsqueeze(-1)
    hi = hi.unsqueeze(-1)
    edges = torch.arange(k, dtype=lo.dtype, device=lo.device)
    if generator is None:
        u = torch.full(lo.shape[:-1] + (k,), 0.5, dtype=lo.dtype, device=lo.device)
    else:
        u = torch.rand(lo.shape[:-1] + (k,), generator=generator, dtype=lo.dtype, device=lo.device)
    return lo + (hi - lo) * (edges + u) / k


def stratified_sample(near, far, k: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """One uniform sample inside each of ``k`` equal bins of [near, far]."""
    if k < 1:
        raise ValueError("need at least one sample per ray")
    near = torch.as_tensor(near, dtype=torch.get_default_dtype() if not torch.is_tensor(near) else near.dtype)
    far = torch.as_tensor(far, dtype=near.dtype)
    near, far = torch.broadcast_tensors(near, far)
    return _stratify(near, far, k, generator)


def depth_guided_sample(d_hat, window: float, k: int, near, far, uniform_fraction: float = 0.25,
                        generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Concentrate samples in a window around a predicted depth.

    ``ceil((1 - uniform_fraction) k)`` stratified samples fall in
    ``[d_hat - window/2, d_hat + window/2]`` clipped to ``[near, far]``; the
    rest are stratified over the whole range.
    """
    if not window > 0:
        raise ValueError("sampling window must be positive")
    if not 0.0 <= uniform_fraction <= 1.0:
        raise ValueError("uniform_fraction must lie in [0, 1]")
    d_hat = torch.as_tensor(d_hat)
    near, far = torch.broadcast_tensors(torch.as_tensor(near, dtype=d_hat.dtype),
                                        torch.as_tensor(far, dtype=d_hat.dtype))
    near, far, d_hat = torch.broadcast_tensors(near, far, d_hat)
    n_focus = math.ceil((1.0 - uniform_fraction) * k - 1e-9)
    parts = []
    if n_focus > 0:
        d = torch.minimum(torch.maximum(d_hat, near), far)
        lo = torch.maximum(d - 0.5 * window, near)
        hi = torch.minimum(d + 0.5 * window, far)
        parts.append(_stratify(lo, hi, n_focus, generator))
    if k - n_focus > 0:
        parts.append(_stratify(near, far, k - n_focus, generator))
    return torch.sort(torch.cat(parts, dim=-1), dim=-1).values


def epi_theta_sample(theta_ray, alpha: float, theta_near: float, theta_far: float, k: int,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Stratified thetas in the window theta_ray +- alpha (theta_far - theta_near), clipped to range."""
    theta_ray = torch.as_tensor(theta_ray)
    half = alpha * (theta_far - theta_near)
    centre = theta_ray.clamp(theta_near, theta_far)
    lo = (centre - half).clamp_min(theta_near)
    hi = (centre + half).clamp_max(theta_far)
    return _stratify(lo, hi, k, generator)


def composite(sigmas: torch.Tensor, colors: torch.Tensor, ts: torch.Tensor, t_far,
              background=None, validate: bool = True) -> RenderResult:
    """Alpha-composite K samples per ray.

    Shapes: ``sigmas`` (..., K), ``colors`` (..., K, 3), ``ts`` (..., K),
    ``t_far`` broadcastable to (...). The last interval runs to ``t_far``.
    Depth is the weight-normalised expected sample distance.
    """
    if validate:
        if sigmas.shape != ts.shape or colors.shape[:-1] != ts.shape:
            raise ValueError("sigmas, colors and ts must agree in shape")
        if (sigmas < 0).any():
            raise ValueError("negative density")
        if (ts[..., 1:] < ts[..., :-1]).any():
            raise ValueError("sample distances must be non-decreasing")
    t_far = torch.as_tensor(t_far, dtype=ts.dtype, device=ts.device)
    t_far = t_far.expand(ts.shape[:-1]).unsqueeze(-1)
    deltas = torch.cat([ts[..., 1:] - ts[..., :-1], (t_far - ts[..., -1:]).clamp_min(0.0)], dim=-1)
    tau = sigmas * deltas
    cum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1]], dim=-1))
    weights = trans * -torch.expm1(-tau)
    acc = weights.sum(-1)
    rgb = (weights.unsqueeze(-1) * colors).sum(-2)
    if background is not None:
        bg = torch.as_tensor(background, dtype=rgb.dtype, device=rgb.device)
        rgb = rgb + (1.0 - acc).unsqueeze(-1) * bg
    depth = (weights * ts).sum(-1) / acc.clamp_min(DEPTH_EPS)
    return RenderResult(rgb, acc, depth, weights, torch.exp(-cum[..., -1]))


def render_rays(field, rays: Rays, ts: torch.Tensor, background=None, validate: bool = False) -> RenderResult:
    """Evaluate ``field(points, dirs) -> (rgb, sigma)`` at ``ts`` along each ray and composite."""
    pts = rays.origins.unsqueeze(-2) + ts.unsqueeze(-1) * rays.dirs.unsqueeze(-2)
    dirs = rays.dirs.unsqueeze(-2).expand_as(pts)
    rgb, sigma = field(pts, dirs)
    return composite(sigma, rgb, ts, rays.far, background, validate=validate)


def render_depth(field, rays: Rays, k: int, generator: Optional[torch.Generator] = None):
    """Expected depth and accumulated occupancy of each ray under ``field``.

    Depth is meaningless where acc is small; callers gate on a threshold.
    """
    ts = stratified_sample(rays.near, rays.far, k, generator)
    res = render_rays(field, rays, ts)
    return res.depth, res.acc


def render_in_chunks(fn: Callable[[Rays], RenderResult], rays: Rays, chunk: int = 4096) -> RenderResult:
    """Apply ``fn`` to slices of ``rays`` without building a graph; concatenates outputs."""
    outs = []
    with torch.no_grad():
        for start in range(0, len(rays), chunk):
            outs.append(fn(rays[start:start + chunk]))
    return RenderResult(*(torch.cat([getattr(o, k) for o in outs]) for k in
                          ("rgb", "acc", "depth", "weights", "final_transmittance")))
