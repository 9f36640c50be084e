"""Coordinate encodings with controllable frequency, and EPI point alignment."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import NamedTuple, Union

import torch
import torch.nn as nn


@dataclass(frozen=True)
class SinusoidalEncodingConfig:
    """Octave sinusoidal encoding.

    Inputs are divided by ``scale`` before every band, so a larger scale
    means lower effective frequency.
    """

    bands: int
    scale: float = 1.0
    include_identity: bool = True

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    def out_dim(self, input_dim: int) -> int:
        return input_dim * 2 * self.bands + (input_dim if self.include_identity else 0)

    def to_dict(self) -> dict:
        return {"type": "sinusoidal", **asdict(self)}


@dataclass(frozen=True)
class GaussianEncodingConfig:
    """Random Fourier features with a frequency matrix drawn from N(0, std^2)."""

    std: float
    num_features: int
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ValueError(f"std must be >= 0, got {self.std}")
        if self.num_features < 1:
            raise ValueError(f"num_features must be >= 1, got {self.num_features}")

    def out_dim(self, input_dim: int) -> int:
        return 2 * self.num_features

    def frequency_matrix(self, input_dim: int) -> torch.Tensor:
        """The (num_features, input_dim) float64 matrix; identical for equal configs."""
        return _gaussian_matrix(self.std, self.num_features, self.seed, input_dim).clone()

    def to_dict(self) -> dict:
        return {"type": "gaussian", **asdict(self)}


@dataclass(frozen=True)
class GroupedEncodingConfig:
    """Different encodings for disjoint groups of input dimensions.

    ``groups`` is a tuple of ``(dims, config)``; outputs are concatenated in
    group order.
    """

    groups: tuple

    def __post_init__(self):
        seen = [d for dims, _ in self.groups for d in dims]
        if len(seen) != len(set(seen)):
            raise ValueError("encoding groups must not overlap")

    def out_dim(self, input_dim: int) -> int:
        return sum(cfg.out_dim(len(dims)) for dims, cfg in self.groups)

    def to_dict(self) -> dict:
        return {
            "type": "grouped",
            "groups": [{"dims": list(dims), "encoding": cfg.to_dict()} for dims, cfg in self.groups],
        }


EncodingConfig = Union[SinusoidalEncodingConfig, GaussianEncodingConfig, GroupedEncodingConfig]


@lru_cache(maxsize=64)
def _gaussian_matrix(std: float, num_features: int, seed: int, input_dim: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    b = torch.randn(num_features, input_dim, generator=gen, dtype=torch.float64)
    return b * std


def encoding_from_dict(d: dict) -> EncodingConfig:
    d = dict(d)
    kind = d.pop("type", "sinusoidal")
    if kind == "sinusoidal":
        return SinusoidalEncodingConfig(
            bands=int(d["bands"]),
            scale=float(d.get("scale", 1.0)),
            include_identity=bool(d.get("include_identity", True)),
        )
    if kind == "gaussian":
        return GaussianEncodingConfig(
            std=float(d["std"]), num_features=int(d["num_features"]), seed=int(d.get("seed", 0))
        )
    if kind == "grouped":
        return GroupedEncodingConfig(
            groups=tuple(
                (tuple(int(i) for i in g["dims"]), encoding_from_dict(g["encoding"])) for g in d["groups"]
            )
        )
    raise ValueError(f"unknown encoding type {kind!r}")


def _check_finite(x: torch.Tensor):
    if not torch.isfinite(x).all():
        raise ValueError("encoding input contains non-finite values")


def encode_sinusoidal(x: torch.Tensor, cfg: SinusoidalEncodingConfig) -> torch.Tensor:
    """Encode (..., D) coordinates as (x, sin(x/s), cos(x/s), ..., sin(2^(L-1) x/s), cos(2^(L-1) x/s))."""
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.get_default_dtype())
    _check_finite(x)
    xs = x / cfg.scale
    freqs = 2.0 ** torch.arange(cfg.bands, dtype=x.dtype, device=x.device)
    # (..., L, D) -> band-major flattening
    arg = xs.unsqueeze(-2) * freqs.unsqueeze(-1)
    feats = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-2).flatten(-3)
    if cfg.include_identity:
        feats = torch.cat([x, feats], dim=-1)
    return feats


def encode_gaussian(x: torch.Tensor, cfg: GaussianEncodingConfig) -> torch.Tensor:
    """Encode (..., D) coordinates as (cos(2 pi B x), sin(2 pi B x))."""
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.get_default_dtype())
    _check_finite(x)
    b = _gaussian_matrix(cfg.std, cfg.num_features, cfg.seed, x.shape[-1]).to(x.dtype)
    proj = 2 * math.pi * x @ b.T
    return torch.cat([torch.cos(proj), torch.sin(proj)], dim=-1)


def encode(x: torch.Tensor, cfg: EncodingConfig) -> torch.Tensor:
    if isinstance(cfg, SinusoidalEncodingConfig):
        return encode_sinusoidal(x, cfg)
    if isinstance(cfg, GaussianEncodingConfig):
        return encode_gaussian(x, cfg)
    if isinstance(cfg, GroupedEncodingConfig):
        return torch.cat([encode(x[..., list(dims)], sub) for dims, sub in cfg.groups], dim=-1)
    raise TypeError(f"unsupported encoding config {type(cfg).__name__}")


class Encoder(nn.Module):
    """Module wrapper so encodings can sit inside a field's forward pass."""

    def __init__(self, cfg: EncodingConfig, input_dim: int):
        super().__init__()
        self.cfg = cfg
        self.input_dim = input_dim
        self.out_dim = cfg.out_dim(input_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim}-d input, got {x.shape[-1]}")
        return encode(x, self.cfg)


class EPIPoint(NamedTuple):
    s_prime: torch.Tensor
    t_prime: torch.Tensor
    theta: torch.Tensor


SLOPE_EPS = 1e-12


def epi_slope(theta):
    """Slope of a point's line in the EPI; tan(theta) equals the point's depth."""
    return torch.tan(torch.as_tensor(theta))


def epi_align(u, v, s, t, theta, u_star=0.0, v_star=0.0) -> EPIPoint:
    """Re-express the point (u, v, s, t, theta) as seen from camera (u_star, v_star).

    Two-plane model: camera plane at depth 0 with coordinates (u, v); a ray
    leaves (u, v, 0) with direction (s, t, 1), so a point at depth
    tan(theta) sits at (u + s tan(theta), v + t tan(theta)). Every ray
    through the same point therefore maps to the same (s', t', theta).
    """
    u, v, s, t, theta = (torch.as_tensor(a, dtype=torch.float64) if not torch.is_tensor(a) else a
                         for a in (u, v, s, t, theta))
    m = epi_slope(theta)
    if (m.abs() < SLOPE_EPS).any():
        raise ValueError("degenerate EPI slope: ray parallel to the two planes")
    return EPIPoint(s + (u - u_star) / m, t + (v - v_star) / m, theta)
