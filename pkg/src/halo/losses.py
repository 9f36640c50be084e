"""Training objectives. Every sum is normalised by the batch size."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass

import torch

log = logging.getLogger(__name__)

# Incremented whenever a gated loss sees a batch with no qualifying rays.
gate_warnings: Counter = Counter()


@dataclass(frozen=True)
class LossWeights:
    lambda_empty: float = 0.1
    tau: float = 0.01
    lambda_consist: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.lambda_empty < 0 or self.lambda_consist < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_reconstruction(pred_rgb: torch.Tensor, gt_rgb: torch.Tensor) -> torch.Tensor:
    """Squared colour error summed over channels, averaged over rays."""
    _same_shape(pred_rgb, gt_rgb)
    return ((pred_rgb - gt_rgb) ** 2).sum(-1).mean()


def loss_ray_distill(ray_depth: torch.Tensor, lo_depth: torch.Tensor, lo_acc: torch.Tensor,
                     tau: float) -> torch.Tensor:
    """Mean squared error to the frozen low-frequency depth, over rays with acc >= tau.

    The target is detached, so nothing flows back into the low-frequency field.
    """
    _same_shape(ray_depth, lo_depth)
    keep = lo_acc.detach() >= tau
    if not keep.any():
        gate_warnings["ray_distill_empty_batch"] += 1
        log.warning("ray distillation batch has no rays with acc >= %g", tau)
        return ray_depth.sum() * 0.0
    return ((ray_depth[keep] - lo_depth.detach()[keep]) ** 2).mean()


def loss_empty(hi_acc: torch.Tensor, lo_acc: torch.Tensor, tau: float, batch_size: int | None = None):
    """Occupancy of the high-frequency field on rays the low-frequency field deems empty.

    ``hi_acc`` may cover the whole batch or only the qualifying rays; in the
    latter case pass the full ``batch_size``.
    """
    n = lo_acc.shape[0] if batch_size is None else batch_size
    qualifying = lo_acc.detach() < tau
    if hi_acc.shape == lo_acc.shape:
        hi_acc = hi_acc[qualifying]
    elif hi_acc.shape[0] != int(qualifying.sum()):
        raise ValueError("hi_acc must cover the batch or exactly the qualifying rays")
    return hi_acc.sum() / max(n, 1)


def qualifying_rays(lo_acc: torch.Tensor, tau: float) -> torch.Tensor:
    return lo_acc.detach() < tau


def loss_consist(theta_ray: torch.Tensor, theta_nerf: torch.Tensor) -> torch.Tensor:
    """Mean squared difference; the radiance-field target is detached."""
    _same_shape(theta_ray, theta_nerf)
    return ((theta_ray - theta_nerf.detach()) ** 2).mean()


def loss_total(rec, empty, weights: LossWeights):
    return rec + weights.lambda_empty * empty
