"""Run configuration: one YAML document describing the scene, every stage,
frequency tuning, the toy experiments and seeds.

Two built-in profiles supply defaults. ``desk`` is sized for a single CPU
core; ``paper`` carries the full-scale settings. Anything in the document
overrides the profile key by key.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from halo.data import LightFieldSceneSpec, ProceduralSceneSpec
from halo.encoding import SinusoidalEncodingConfig, encoding_from_dict
from halo.freq_tuning import SpectralCriterionConfig
from halo.losses import LossWeights
from halo.pipeline import JointScheduleConfig, LightFieldConfig, StageConfig

S = SinusoidalEncodingConfig

# Shared by all desk point-field stages: small trunk, one skip.
_DESK_POINT = dict(batch_size=512, samples_per_ray=48, depth=4, width=64, skip=2,
                   learning_rate=1e-3, lr_final=1e-4, log_every=250)

PROFILES: dict[str, dict] = {
    "desk": {
        "scene": {"kind": "procedural", "procedural": {"n_views": 4, "n_test_views": 4, "checker_cells": 4}},
        "stages": {
            "lo": {**_DESK_POINT, "iterations": 2000, "encoding": S(4, 1.0).to_dict()},
            "ray": {"iterations": 6000, "ray_pool_size": 131072, "batch_size": 1024, "learning_rate": 1e-3, "lr_final": 1e-4,
                    "samples_per_ray": 128, "encoding": S(4, 1.0).to_dict(), "depth": 6, "width": 128,
                    "skip": None, "log_every": 250},
            # Hi and vanilla share a 16-sample budget; guided sampling spends it near the surface.
            "hi": {**_DESK_POINT, "iterations": 4000, "samples_per_ray": 16, "empty_batch_size": 256,
                   "encoding": S(10, 1.0).to_dict(), "loss": {"lambda_empty": 0.1}},
        },
        "tune_freq": {"candidates": [S(b, 1.0).to_dict() for b in (10, 8, 6, 5, 4)],
                      "short_iterations": 2000,
                      "criterion": {"num_pairs": 4, "render_resolution": 48, "threshold": 2.0}},
        "joint": {"iterations": 1500, "batch_size": 512, "samples_per_ray": 32, "depth": 4, "width": 64,
                  "skip": 2, "ray_depth": 4, "ray_width": 64, "learning_rate": 1e-3, "lr_final": 1e-4,
                  "st_std": 4.0, "theta_std": 1.0, "uv_std": 1.0},
        "schedule": {"alpha_start": 1.0, "alpha_end": 0.5, "decay_iterations": 1000},
        "lightfield": {"height": 40, "width": 40},
        "eval": {"samples": 16},
        "toy2d": {"iterations": 10000, "extrapolate_iterations": 1000, "seeds": [0, 1, 2, 3, 4],
                  "factor": 4, "cells": 8, "mask_fraction": 0.0625, "size": 64},
    },
    "paper": {
        "scene": {"kind": "blender", "path": None, "subset": None, "near": 2.0, "far": 6.0},
        "stages": {
            "lo": {"iterations": 8000, "encoding": S(5, 32.0).to_dict()},
            "ray": {"iterations": 8000, "samples_per_ray": 128, "encoding": S(4, 1.0).to_dict(),
                    "depth": 6, "width": 128, "skip": None},
            "hi": {"iterations": 120000, "encoding": S(10, 1.0).to_dict(), "loss": {"lambda_empty": 0.1}},
        },
        "tune_freq": {"candidates": [S(b, 32.0).to_dict() for b in (10, 8, 6, 5, 4)],
                      "short_iterations": 8000, "criterion": {}},
        "joint": {},
        "schedule": {},
        "lightfield": {},
        "eval": {"samples": 64},
        "toy2d": {"iterations": 10000, "extrapolate_iterations": 10000, "seeds": [0, 1, 2, 3, 4],
                  "factor": 4, "cells": 8, "mask_fraction": 0.0625, "size": 64},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and not ("type" in v and "type" in out[k]):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    """Resolved configuration; ``raw`` is the merged document that was hashed."""

    raw: dict
    seed: int = 0
    profile: str = "desk"
    stages: dict = field(default_factory=dict)  # name -> StageConfig
    tune_candidates: list = field(default_factory=list)
    tune_short_iterations: int = 600
    criterion: SpectralCriterionConfig = SpectralCriterionConfig()
    joint: LightFieldConfig = LightFieldConfig()
    schedule: JointScheduleConfig = JointScheduleConfig()
    eval_samples: int = 64

    @property
    def scene(self) -> dict:
        return self.raw["scene"]

    @property
    def toy2d(self) -> dict:
        return self.raw["toy2d"]

    @property
    def lightfield_spec(self) -> LightFieldSceneSpec:
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in self.raw.get("lightfield", {}).items()}
        return LightFieldSceneSpec(**d)

    def procedural_spec(self) -> ProceduralSceneSpec:
        return ProceduralSceneSpec.from_dict(self.scene.get("procedural", {}))

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def vanilla(self) -> StageConfig:
        """Same budget as the high-frequency stage, plain sampling, no empty-space term."""
        hi = self.stages["hi"]
        return replace(hi, loss=replace(hi.loss, lambda_empty=0.0), uniform_fraction=1.0)


def build_config(doc: Optional[dict] = None, seed: Optional[int] = None) -> RunConfig:
    doc = dict(doc or {})
    profile = doc.pop("profile", "desk")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    raw = _merge(PROFILES[profile], doc)
    raw["profile"] = profile
    if seed is not None:
        raw["seed"] = int(seed)
    raw.setdefault("seed", 0)
    s = int(raw["seed"])

    stages = {}
    for name, overrides in raw["stages"].items():
        base = StageConfig(seed=s)
        stages[name] = StageConfig.from_dict({**overrides, "seed": overrides.get("seed", s)}, base)
    tf = raw["tune_freq"]
    cand = [encoding_from_dict(c) for c in tf["candidates"]]
    crit = SpectralCriterionConfig(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in tf.get("criterion", {}).items()})
    joint = LightFieldConfig.from_dict({**raw["joint"], "seed": raw["joint"].get("seed", s)}, LightFieldConfig())
    sched = JointScheduleConfig(**raw["schedule"])
    return RunConfig(raw=raw, seed=s, profile=profile, stages=stages, tune_candidates=cand,
                     tune_short_iterations=int(tf.get("short_iterations", 600)), criterion=crit,
                     joint=joint, schedule=sched, eval_samples=int(raw["eval"]["samples"]))


def load_config(path=None, seed: Optional[int] = None) -> RunConfig:
    """Read a YAML config (``None`` gives the desk profile untouched)."""
    doc: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ValueError(f"malformed config {p}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"config {p} must be a mapping")
    return build_config(doc, seed)
