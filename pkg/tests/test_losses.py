import pytest
import torch

from halo.encoding import SinusoidalEncodingConfig
from halo.fields import PointFieldArch, RayFieldArch, SceneBounds, eval_ray_field, init_point_field, init_ray_field
from halo.losses import (
    LossWeights,
    gate_warnings,
    loss_consist,
    loss_empty,
    loss_ray_distill,
    loss_reconstruction,
    loss_total,
)
from halo.rendering import Rays, render_rays, stratified_sample

from helpers import module_fd_check

T = lambda *v: torch.tensor(v, dtype=torch.float64)


class TestReconstruction:
    def test_fixed_point(self):
        x = torch.rand(5, 3)
        assert loss_reconstruction(x, x).item() == 0.0

    def test_single_ray(self):
        assert loss_reconstruction(T([1.0, 0, 0]), T([0.0, 0, 0])).item() == 1.0

    def test_mean_over_rays(self):
        pred = T([1.0, 0, 0], [0.5, 0, 0])
        assert loss_reconstruction(pred, torch.zeros_like(pred)).item() == pytest.approx(0.625)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_reconstruction(torch.zeros(2, 3), torch.zeros(3, 3))


class TestRayDistill:
    def test_exact_match(self):
        d = T(2.5, 3.1)
        assert loss_ray_distill(d, d, T(0.9, 0.8), 0.01).item() == 0.0

    def test_single_ray(self):
        assert loss_ray_distill(T(3.0), T(2.5), T(0.9), 0.01).item() == pytest.approx(0.25)

    def test_gated_out(self):
        before = gate_warnings["ray_distill_empty_batch"]
        assert loss_ray_distill(T(3.0), T(2.5), T(0.005), 0.01).item() == 0.0
        assert gate_warnings["ray_distill_empty_batch"] == before + 1

    def test_no_gradient_into_target(self):
        target = T(2.5, 3.0).requires_grad_(True)
        pred = T(3.0, 3.5).requires_grad_(True)
        loss_ray_distill(pred, target, T(0.9, 0.9), 0.01).backward()
        assert target.grad is None and pred.grad is not None


class TestEmpty:
    def test_zero_occupancy(self):
        assert loss_empty(torch.zeros(4), T(0.0, 0.0, 0.5, 0.001), 0.01).item() == 0.0

    def test_no_qualifying_rays(self):
        assert loss_empty(T(0.3, 0.7), T(0.5, 0.9), 0.01).item() == 0.0

    def test_single_ray(self):
        assert loss_empty(T(0.3), T(0.0), 0.01).item() == pytest.approx(0.3)

    def test_subset_form(self):
        lo = T(0.0, 0.5, 0.001, 0.9)
        assert loss_empty(T(0.2, 0.4), lo, 0.01).item() == pytest.approx(0.15)

    def test_monotone_in_density(self):
        ts = torch.linspace(2, 6, 17, dtype=torch.float64)[:-1]
        base = torch.rand(16, dtype=torch.float64)
        acc = lambda s: render_acc(s, ts)
        for i in range(16):
            bumped = base.clone()
            bumped[i] += 0.5
            assert loss_empty(acc(bumped), T(0.0), 0.01) >= loss_empty(acc(base), T(0.0), 0.01)


def render_acc(sigmas, ts):
    from halo.rendering import composite
    return composite(sigmas, torch.zeros(len(ts), 3, dtype=torch.float64), ts, 6.0).acc.reshape(1)


class TestConsist:
    def test_equal(self):
        assert loss_consist(T(0.4, 0.2), T(0.4, 0.2)).item() == 0.0

    def test_single(self):
        assert loss_consist(T(0.4), T(0.1)).item() == pytest.approx(0.09)

    def test_mean(self):
        assert loss_consist(T(0.4, 0.2), T(0.1, 0.1)).item() == pytest.approx(0.05)

    def test_target_detached(self):
        nerf = T(0.1).requires_grad_(True)
        ray = T(0.4).requires_grad_(True)
        loss_consist(ray, nerf).backward()
        assert nerf.grad is None


class TestTotal:
    def test_values(self):
        assert loss_total(0.5, 0.3, LossWeights(lambda_empty=0.0)) == 0.5
        assert loss_total(0.5, 0.3, LossWeights(lambda_empty=0.1)) == pytest.approx(0.53)
        assert loss_total(0.0, 0.0, LossWeights()) == 0.0

    def test_tau_range(self):
        with pytest.raises(ValueError):
            LossWeights(tau=0.0)
        with pytest.raises(ValueError):
            LossWeights(lambda_empty=-1.0)


def _tiny_rays(n=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    o = torch.randn(n, 3, generator=g, dtype=torch.float64)
    o = 4.0 * o / o.norm(dim=-1, keepdim=True)
    d = torch.nn.functional.normalize(-o + 0.5 * torch.randn(n, 3, generator=g, dtype=torch.float64), dim=-1)
    return Rays(o, d, torch.tensor(2.0, dtype=torch.float64), torch.tensor(6.0, dtype=torch.float64))


class TestLossGradients:
    """Each loss differentiated through a width-8 field, against central differences."""

    arch = PointFieldArch(depth=2, width=8, skip=1, pos_encoding=SinusoidalEncodingConfig(2),
                          dir_encoding=SinusoidalEncodingConfig(1))

    def setup_method(self):
        self.net = init_point_field(self.arch, 0, dtype=torch.float64)
        self.rays = _tiny_rays()
        self.ts = stratified_sample(self.rays.near, self.rays.far, 8, torch.Generator().manual_seed(1))

    def test_reconstruction(self):
        gt = torch.rand(6, 3, dtype=torch.float64)
        loss = lambda: loss_reconstruction(render_rays(self.net, self.rays, self.ts, 1.0).rgb, gt)
        assert module_fd_check(self.net, loss) < 1e-4

    def test_empty(self):
        lo_acc = T(0.0, 0.5, 0.001, 0.2, 0.0, 0.003)
        loss = lambda: loss_empty(render_rays(self.net, self.rays, self.ts).acc, lo_acc, 0.01)
        assert module_fd_check(self.net, loss) < 1e-4

    def test_ray_distill(self):
        ray_net = init_ray_field(RayFieldArch(depth=2, width=8, encoding=SinusoidalEncodingConfig(2)),
                                 0.0, 8.8, seed=2, dtype=torch.float64)
        bounds = SceneBounds(2.0, 6.0, 4.4)
        target = torch.rand(6, dtype=torch.float64) * 3 + 2
        acc = T(0.9, 0.5, 0.001, 0.2, 0.7, 0.9)
        loss = lambda: loss_ray_distill(eval_ray_field(ray_net, self.rays.origins, self.rays.dirs, bounds),
                                        target, acc, 0.01)
        assert module_fd_check(ray_net, loss) < 1e-4

    def test_consist(self):
        ray_net = init_ray_field(RayFieldArch(depth=2, width=8, encoding=SinusoidalEncodingConfig(1),
                                              input_kind="lightfield"), 1.2, 1.5, seed=3, dtype=torch.float64)
        uvst = torch.rand(6, 4, dtype=torch.float64) * 2 - 1
        target = torch.rand(6, dtype=torch.float64) * 0.3 + 1.2
        loss = lambda: loss_consist(ray_net(uvst), target)
        assert module_fd_check(ray_net, loss) < 1e-4
