import dataclasses

import numpy as np
import pytest
import torch

from halo.checkpoint import Checkpoint
from halo.config import load_config
from halo.data import make_procedural_scene
from halo.encoding import SinusoidalEncodingConfig
from halo.fields import init_point_field
from halo.losses import LossWeights
from halo.pipeline import (
    JointScheduleConfig,
    StageConfig,
    TrainingDiverged,
    alpha_at,
    evaluate_views,
    point_field_from_checkpoint,
    stage1_train_lo,
    stage2_distill_ray,
    stage3_train_hi,
)

TINY = dict(batch_size=64, samples_per_ray=12, depth=2, width=16, skip=1, ray_pool_size=512,
            heldout_rays=128, empty_batch_size=64, encoding=SinusoidalEncodingConfig(3))


@pytest.fixture(scope="module")
def scene():
    return make_procedural_scene({"n_views": 2, "n_test_views": 1, "height": 16, "width": 16}, seed=0)


def params(net):
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


class TestSchedule:
    def test_alpha_midpoint(self):
        assert alpha_at(500, JointScheduleConfig(1.0, 0.5, 1000)) == 0.75

    def test_alpha_clamped(self):
        s = JointScheduleConfig(1.0, 0.5, 10)
        assert alpha_at(-3, s) == 1.0 and alpha_at(10, s) == 0.5 and alpha_at(10**6, s) == 0.5

    def test_bad_schedule(self):
        with pytest.raises(ValueError):
            JointScheduleConfig(0.5, 1.0, 10)


class TestStages:
    def test_zero_iterations_is_initialization(self, scene):
        cfg = StageConfig(iterations=0, **TINY)
        res = stage1_train_lo(scene, cfg)
        fresh = init_point_field(cfg.point_arch(), cfg.seed)
        for k, v in fresh.state_dict().items():
            assert torch.equal(res.field.state_dict()[k], v)

    def test_deterministic(self, scene):
        cfg = StageConfig(iterations=5, **TINY)
        a, b = stage1_train_lo(scene, cfg), stage1_train_lo(scene, cfg)
        assert a.report == b.report
        assert all(torch.equal(x, y) for x, y in zip(a.field.parameters(), b.field.parameters()))

    def test_earlier_fields_stay_frozen(self, scene):
        lo = stage1_train_lo(scene, StageConfig(iterations=3, **TINY))
        ray = stage2_distill_ray(lo.field, scene, StageConfig(iterations=3, **TINY))
        lo_before, ray_before = params(lo.field), params(ray.field)
        hi_cfg = StageConfig(iterations=3, loss=LossWeights(lambda_empty=0.1), **TINY)
        stage3_train_hi(ray.field, lo.field, scene, hi_cfg)
        assert all(torch.equal(v, lo.field.state_dict()[k]) for k, v in lo_before.items())
        assert all(torch.equal(v, ray.field.state_dict()[k]) for k, v in ray_before.items())

    def test_distill_reports_heldout_error(self, scene):
        lo = stage1_train_lo(scene, StageConfig(iterations=3, **TINY))
        rep = stage2_distill_ray(lo.field, scene, StageConfig(iterations=3, **TINY)).report
        assert {"heldout_depth_mae", "heldout_mae_fraction", "heldout_gated_rays"} <= set(rep)

    def test_guided_needs_ray_field(self, scene):
        with pytest.raises(ValueError, match="ray field"):
            stage3_train_hi(None, None, scene, StageConfig(iterations=1, **TINY))

    def test_empty_loss_needs_lo(self, scene):
        cfg = StageConfig(iterations=1, uniform_fraction=1.0, loss=LossWeights(lambda_empty=0.1), **TINY)
        with pytest.raises(ValueError, match="low-frequency"):
            stage3_train_hi(None, None, scene, cfg)

    def test_divergence_is_reported(self, scene):
        bad = dataclasses.replace(scene, images=np.full_like(scene.images, np.nan))
        with pytest.raises(TrainingDiverged, match="iteration 0"):
            stage1_train_lo(bad, StageConfig(iterations=3, **TINY))

    def test_resume_matches_uninterrupted(self, scene, tmp_path):
        full = stage1_train_lo(scene, StageConfig(iterations=6, lr_final=1e-3, learning_rate=1e-3, **TINY))
        half = stage1_train_lo(scene, StageConfig(iterations=3, lr_final=1e-3, learning_rate=1e-3, **TINY))
        half.checkpoint.save(tmp_path / "h.ckpt")
        resumed = stage1_train_lo(scene, StageConfig(iterations=6, lr_final=1e-3, learning_rate=1e-3, **TINY),
                                  resume=Checkpoint.load(tmp_path / "h.ckpt"))
        for a, b in zip(full.field.parameters(), resumed.field.parameters()):
            torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_checkpoint_restores_field(self, scene, tmp_path):
        res = stage1_train_lo(scene, StageConfig(iterations=2, **TINY))
        res.checkpoint.save(tmp_path / "lo.ckpt")
        net = point_field_from_checkpoint(Checkpoint.load(tmp_path / "lo.ckpt"))
        pts, dirs = torch.randn(8, 3), torch.nn.functional.normalize(torch.randn(8, 3), dim=-1)
        assert torch.equal(net(pts, dirs)[0], res.field(pts, dirs)[0])


@pytest.mark.slow
def test_lo_field_fits_scene():
    run = load_config()
    scene = make_procedural_scene(run.procedural_spec(), seed=0)
    cfg = run.stages["lo"]
    assert cfg.iterations == 2000 and cfg.encoding.bands == 4
    res = stage1_train_lo(scene, cfg)
    ev = evaluate_views(res.field, scene.subset("train"), 48)
    assert ev["mean_psnr"] > 20.0 and np.isfinite(ev["mean_ssim"])
