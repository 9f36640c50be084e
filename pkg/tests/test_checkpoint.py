import numpy as np
import pytest
import torch

from halo.checkpoint import (
    Checkpoint,
    adam_state,
    load_module_params,
    module_params,
    read_container,
    restore_adam_state,
    write_container,
)
from halo.encoding import SinusoidalEncodingConfig
from halo.fields import PointFieldArch, SceneBounds, init_point_field

ARCH = PointFieldArch(depth=2, width=8, skip=1, pos_encoding=SinusoidalEncodingConfig(2),
                      dir_encoding=SinusoidalEncodingConfig(1))


def trained_pair(steps=3):
    net = init_point_field(ARCH, 0)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    g = torch.Generator().manual_seed(0)
    for _ in range(steps):
        rgb, sigma = net(torch.randn(8, 3, generator=g), torch.randn(8, 3, generator=g))
        opt.zero_grad()
        (rgb.sum() + sigma.sum()).backward()
        opt.step()
    return net, opt, g


def make_checkpoint():
    net, opt, g = trained_pair()
    return Checkpoint(kind="point", arch=ARCH.to_dict(), params=module_params(net), iteration=3,
                      bounds=SceneBounds().to_dict(), encoding=ARCH.pos_encoding.to_dict(),
                      optimizer=adam_state(opt, net), rng_state=g.get_state().numpy(), extra={"stage": "lo"})


class TestContainer:
    def test_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}
        write_container(tmp_path / "c", {"x": 1}, arrays)
        meta, back = read_container(tmp_path / "c")
        assert meta == {"x": 1}
        for k in arrays:
            assert back[k].dtype == arrays[k].dtype and back[k].tobytes() == arrays[k].tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c").write_bytes(b"NOTACKPT" + b"\0" * 32)
        with pytest.raises(ValueError):
            read_container(tmp_path / "c")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_container(tmp_path / "none")


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        make_checkpoint().save(tmp_path / "a.ckpt")
        Checkpoint.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_params_restore_outputs(self, tmp_path):
        ck = make_checkpoint()
        ck.save(tmp_path / "a.ckpt")
        net = init_point_field(ARCH, 99)
        load_module_params(net, Checkpoint.load(tmp_path / "a.ckpt").params)
        ref = init_point_field(ARCH, 99)
        load_module_params(ref, ck.params)
        p, d = torch.randn(5, 3), torch.randn(5, 3)
        assert torch.equal(net(p, d)[1], ref(p, d)[1])

    def test_resumed_optimizer_matches_uninterrupted(self, tmp_path):
        # three steps, checkpoint, one more step == four uninterrupted steps
        ck = make_checkpoint()
        ck.save(tmp_path / "a.ckpt")
        ck = Checkpoint.load(tmp_path / "a.ckpt")
        net = init_point_field(ARCH, 5)
        load_module_params(net, ck.params)
        opt = torch.optim.Adam(net.parameters(), lr=1e-3)
        restore_adam_state(opt, net, ck.optimizer)
        g = torch.Generator()
        g.set_state(torch.from_numpy(ck.rng_state))
        rgb, sigma = net(torch.randn(8, 3, generator=g), torch.randn(8, 3, generator=g))
        opt.zero_grad()
        (rgb.sum() + sigma.sum()).backward()
        opt.step()
        ref, _, _ = trained_pair(4)
        for a, b in zip(net.parameters(), ref.parameters()):
            assert torch.equal(a, b)
