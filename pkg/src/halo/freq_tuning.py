"""Choosing the low-frequency encoding from cross-view spectral consistency.

Renders pairs of nearby views; floating high-frequency artefacts make the
pair's Fourier magnitudes disagree. Encodings are lowered until the mean
disagreement falls under a threshold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from halo.data import orbit_pose

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
GAP_SCALE = 1e4


@dataclass(frozen=True)
class SpectralCriterionConfig:
    num_pairs: int = 8
    baseline_angle: float = 3.0  # degrees
    mask_percentile: float = 99.0
    threshold: float = 25.0
    render_resolution: int = 64
    camera_distance: float = 4.0
    elevation_deg: tuple = (15.0, 55.0)

    def __post_init__(self):
        if self.num_pairs < 1:
            raise ValueError("num_pairs must be >= 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if not 0 < self.mask_percentile < 100:
            raise ValueError("mask_percentile must lie in (0, 100)")


def rotation_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    r = np.eye(4)
    r[:2, :2] = [[c, -s], [s, c]]
    return r


def sample_view_pairs(cfg: SpectralCriterionConfig, rng: np.random.Generator, pose_sampler=None):
    """``num_pairs`` (pose, pose rotated about the scene's up axis by the baseline angle).

    ``pose_sampler(rng) -> 4x4`` overrides the default upper-hemisphere orbit.
    """
    if pose_sampler is None:
        lo, hi = np.radians(cfg.elevation_deg)
        pose_sampler = lambda g: orbit_pose(g.uniform(0, 2 * np.pi), g.uniform(lo, hi), cfg.camera_distance)
    rot = rotation_z(math.radians(cfg.baseline_angle))
    pairs = []
    for _ in range(cfg.num_pairs):
        a = pose_sampler(rng)
        pairs.append((a, rot @ a))
    return pairs


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def spectral_gap(img_a, img_b, mask_percentile: float = 99.0) -> float:
    """Masked Fourier-magnitude difference between two grayscale images.

    Bins above ``mask_percentile`` of either magnitude spectrum, and DC, are
    dropped. Returns the L2 norm of the remaining difference per kept bin,
    times 1e4.
    """
    a, b = luminance(img_a), luminance(img_b)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    fa = np.abs(np.fft.fft2(a, norm="ortho"))
    fb = np.abs(np.fft.fft2(b, norm="ortho"))
    keep = (fa <= np.percentile(fa, mask_percentile)) & (fb <= np.percentile(fb, mask_percentile))
    keep[0, 0] = False
    n = int(keep.sum())
    if n == 0:
        return 0.0
    return float(np.linalg.norm((fa - fb)[keep]) / n * GAP_SCALE)


def criterion_sigma(render_fn: Callable, cfg: SpectralCriterionConfig, rng: np.random.Generator,
                    pose_sampler=None) -> float:
    """Mean spectral gap over rendered pairs; ``render_fn(pose) -> (H, W, 3)``."""
    pairs = sample_view_pairs(cfg, rng, pose_sampler)
    gaps = [spectral_gap(render_fn(a), render_fn(b), cfg.mask_percentile) for a, b in pairs]
    return float(np.mean(gaps))


@dataclass
class TuningResult:
    chosen: object
    rows: list  # dicts: encoding, sigma, passed
    passed: bool


def tune_frequency(train_short_fn: Callable, candidate_configs: Sequence, criterion_cfg: SpectralCriterionConfig,
                   seed: int = 0, pose_sampler=None) -> TuningResult:
    """Walk candidates from highest to lowest frequency; stop at the first with sigma < threshold.

    ``train_short_fn(encoding) -> render_fn`` trains a short-budget field.
    Every candidate is scored on the same view pairs. If none passes, the
    lowest-frequency candidate is returned with ``passed=False``.
    """
    if not candidate_configs:
        raise ValueError("no candidate encodings given")
    rows = []
    for enc in candidate_configs:
        render_fn = train_short_fn(enc)
        sigma = criterion_sigma(render_fn, criterion_cfg, np.random.default_rng(seed), pose_sampler)
        ok = sigma < criterion_cfg.threshold
        rows.append({"encoding": enc.to_dict() if hasattr(enc, "to_dict") else enc, "sigma": sigma, "passed": ok})
        log.info("candidate %s: sigma=%.4f %s", rows[-1]["encoding"], sigma, "pass" if ok else "fail")
        if ok:
            return TuningResult(enc, rows, True)
    log.warning("no candidate reached sigma < %g; using the lowest-frequency one", criterion_cfg.threshold)
    return TuningResult(candidate_configs[-1], rows, False)
