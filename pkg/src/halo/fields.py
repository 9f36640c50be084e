"""Point-based radiance fields and ray-based scalar fields."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from halo.encoding import (
    EncodingConfig,
    Encoder,
    SinusoidalEncodingConfig,
    encoding_from_dict,
)


@dataclass(frozen=True)
class SceneBounds:
    near: float = 2.0
    far: float = 6.0
    radius: float = 4.4
    theta_near: Optional[float] = None
    theta_far: Optional[float] = None

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        if not self.radius > 0:
            raise ValueError("bounding-sphere radius must be positive")
        if self.theta_near is not None and not self.theta_near < self.theta_far:
            raise ValueError("theta_near must be < theta_far")

    @classmethod
    def for_cameras(cls, camera_origins, near=2.0, far=6.0, margin=1.1, **kw) -> "SceneBounds":
        """Bounds whose sphere radius is ``margin`` times the farthest camera distance."""
        dist = torch.as_tensor(camera_origins, dtype=torch.float64).reshape(-1, 3).norm(dim=-1).max()
        return cls(near=near, far=far, radius=float(margin * dist), **kw)

    def to_dict(self) -> dict:
        return dict(near=self.near, far=self.far, radius=self.radius,
                    theta_near=self.theta_near, theta_far=self.theta_far)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneBounds":
        return cls(**d)


@dataclass(frozen=True)
class PointFieldArch:
    depth: int = 8
    width: int = 256
    skip: Optional[int] = 4
    pos_encoding: EncodingConfig = SinusoidalEncodingConfig(bands=10)
    dir_encoding: Optional[EncodingConfig] = SinusoidalEncodingConfig(bands=4)
    pos_dim: int = 3
    dir_dim: int = 3
    rectifier: str = "softplus"

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        if self.skip is not None and not 0 < self.skip < self.depth:
            raise ValueError(f"skip layer {self.skip} outside (0, {self.depth})")
        if self.rectifier not in ("softplus", "relu"):
            raise ValueError(f"unknown rectifier {self.rectifier!r}")

    @property
    def pos_width(self) -> int:
        return self.pos_encoding.out_dim(self.pos_dim)

    @property
    def dir_width(self) -> int:
        return 0 if self.dir_encoding is None else self.dir_encoding.out_dim(self.dir_dim)

    def to_dict(self) -> dict:
        return dict(
            kind="point", depth=self.depth, width=self.width, skip=self.skip,
            pos_encoding=self.pos_encoding.to_dict(),
            dir_encoding=None if self.dir_encoding is None else self.dir_encoding.to_dict(),
            pos_dim=self.pos_dim, dir_dim=self.dir_dim, rectifier=self.rectifier,
        )


@dataclass(frozen=True)
class RayFieldArch:
    depth: int = 6
    width: int = 128
    encoding: EncodingConfig = SinusoidalEncodingConfig(bands=4)
    input_kind: str = "sphere"  # "sphere": canonical (o, d); "lightfield": (u, v, s, t)

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        if self.input_kind not in ("sphere", "lightfield"):
            raise ValueError(f"unknown ray input kind {self.input_kind!r}")

    @property
    def input_dim(self) -> int:
        return 6 if self.input_kind == "sphere" else 4

    def to_dict(self) -> dict:
        return dict(kind="ray", depth=self.depth, width=self.width,
                    encoding=self.encoding.to_dict(), input_kind=self.input_kind)


def arch_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "point":
        d["pos_encoding"] = encoding_from_dict(d["pos_encoding"])
        if d.get("dir_encoding") is not None:
            d["dir_encoding"] = encoding_from_dict(d["dir_encoding"])
        return PointFieldArch(**d)
    if kind == "ray":
        d["encoding"] = encoding_from_dict(d["encoding"])
        return RayFieldArch(**d)
    raise ValueError(f"unknown architecture kind {kind!r}")


def _init_linear(layer: nn.Linear, gen: torch.Generator):
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
        layer.bias.copy_(torch.rand(layer.bias.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)


class PointField(nn.Module):
    """MLP mapping (point, direction) to (rgb, sigma).

    Density depends on the point encoding only; colour additionally sees the
    direction encoding.
    """

    def __init__(self, arch: PointFieldArch):
        super().__init__()
        self.arch = arch
        self.pos_encoder = Encoder(arch.pos_encoding, arch.pos_dim)
        self.dir_encoder = None if arch.dir_encoding is None else Encoder(arch.dir_encoding, arch.dir_dim)
        w, pw = arch.width, arch.pos_width
        self.trunk = nn.ModuleList()
        for i in range(arch.depth):
            in_w = pw if i == 0 else w
            if arch.skip is not None and i == arch.skip:
                in_w = w + pw
            self.trunk.append(nn.Linear(in_w, w))
        self.density_head = nn.Linear(w, 1)
        self.feature = nn.Linear(w, w)
        self.color_hidden = nn.Linear(w + arch.dir_width, w // 2 if w > 1 else 1)
        self.color_head = nn.Linear(self.color_hidden.out_features, 3)

    def forward_encoded(self, enc_p: torch.Tensor, enc_d: Optional[torch.Tensor]):
        if enc_p.shape[-1] != self.arch.pos_width:
            raise ValueError(f"point encoding width {enc_p.shape[-1]} != {self.arch.pos_width}")
        if self.arch.dir_width and (enc_d is None or enc_d.shape[-1] != self.arch.dir_width):
            raise ValueError(f"direction encoding width mismatch (expected {self.arch.dir_width})")
        h = enc_p
        for i, layer in enumerate(self.trunk):
            if self.arch.skip is not None and i == self.arch.skip:
                h = torch.cat([h, enc_p], dim=-1)
            h = F.relu(layer(h))
        raw_sigma = self.density_head(h).squeeze(-1)
        sigma = F.softplus(raw_sigma) if self.arch.rectifier == "softplus" else F.relu(raw_sigma)
        feat = self.feature(h)
        if self.arch.dir_width:
            feat = torch.cat([feat, enc_d], dim=-1)
        rgb = torch.sigmoid(self.color_head(F.relu(self.color_hidden(feat))))
        return rgb, sigma

    def forward(self, points: torch.Tensor, dirs: Optional[torch.Tensor] = None):
        enc_d = None
        if self.dir_encoder is not None:
            enc_d = self.dir_encoder(dirs)
        return self.forward_encoded(self.pos_encoder(points), enc_d)


def init_point_field(arch: PointFieldArch, seed: int, dtype=torch.float32) -> PointField:
    """Fan-in scaled uniform init, bit-identical for equal (arch, seed)."""
    net = PointField(arch)
    gen = torch.Generator().manual_seed(seed)
    for m in net.modules():
        if isinstance(m, nn.Linear):
            _init_linear(m, gen)
    return net.to(dtype)


def eval_point_field(net: PointField, encoded_p: torch.Tensor, encoded_d: Optional[torch.Tensor]):
    return net.forward_encoded(encoded_p, encoded_d)


def canonicalize_rays(origins: torch.Tensor, dirs: torch.Tensor, radius: float):
    """Move each origin to where its ray enters the origin-centred sphere.

    Returns ``(canonical_origins, t_entry)`` with
    ``canonical = origin + t_entry * dir``. Directions must be unit length.
    """
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius ** 2
    disc = b * b - c
    if (disc < 0).any():
        raise ValueError("ray misses the bounding sphere; cannot canonicalize origin")
    t_entry = -b - torch.sqrt(disc.clamp_min(0.0))
    return origins + t_entry.unsqueeze(-1) * dirs, t_entry


class RayField(nn.Module):
    """MLP mapping a whole ray to one bounded scalar (depth, or EPI theta)."""

    def __init__(self, arch: RayFieldArch, out_low: float, out_high: float):
        super().__init__()
        if not out_low < out_high:
            raise ValueError("ray field output range must be non-empty")
        self.arch = arch
        self.out_low = float(out_low)
        self.out_high = float(out_high)
        self.encoder = Encoder(arch.encoding, arch.input_dim)
        layers, in_w = [], self.encoder.out_dim
        for _ in range(arch.depth):
            layers.append(nn.Linear(in_w, arch.width))
            in_w = arch.width
        self.hidden = nn.ModuleList(layers)
        self.head = nn.Linear(arch.width, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.encoder(x)
        for layer in self.hidden:
            h = F.relu(layer(h))
        raw = self.head(h).squeeze(-1)
        return self.out_low + (self.out_high - self.out_low) * torch.sigmoid(raw)


def init_ray_field(arch: RayFieldArch, out_low: float, out_high: float, seed: int,
                   dtype=torch.float32) -> RayField:
    net = RayField(arch, out_low, out_high)
    gen = torch.Generator().manual_seed(seed)
    for m in net.modules():
        if isinstance(m, nn.Linear):
            _init_linear(m, gen)
    return net.to(dtype)


def ray_field_range(bounds: SceneBounds) -> tuple[float, float]:
    """Output range for a sphere ray field: distances from the canonical entry point."""
    return 0.0, 2.0 * bounds.radius


def eval_ray_field(net: RayField, origins: torch.Tensor, dirs: torch.Tensor, bounds: SceneBounds):
    """Predicted depth measured from the canonical (sphere-entry) origin."""
    can_o, _ = canonicalize_rays(origins, dirs, bounds.radius)
    return net(torch.cat([can_o, dirs], dim=-1))


def ray_field_depth(net: RayField, origins: torch.Tensor, dirs: torch.Tensor, bounds: SceneBounds):
    """Predicted depth along the given ray, i.e. measured from ``origins``."""
    can_o, t_entry = canonicalize_rays(origins, dirs, bounds.radius)
    return net(torch.cat([can_o, dirs], dim=-1)) + t_entry


def eval_lightfield_ray_field(net: RayField, uvst: torch.Tensor) -> torch.Tensor:
    """EPI variant: theta for each (u, v, s, t) ray."""
    return net(uvst)
