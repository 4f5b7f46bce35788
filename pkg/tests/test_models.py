import time

import pytest
import torch

from aicsd.errors import CheckpointError, ConfigurationError
from aicsd.models import (
    FORMAT_VERSION,
    ToyNetConfig,
    build_toy_segnet,
    count_parameters,
    freeze,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    student_config,
    teacher_config,
)


def params_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


class TestBuild:
    def test_seeded_determinism(self):
        cfg = ToyNetConfig(width=8, depth=2, num_classes=3, seed=7)
        assert params_equal(build_toy_segnet(cfg), build_toy_segnet(cfg))
        other = build_toy_segnet(ToyNetConfig(width=8, depth=2, num_classes=3, seed=8))
        assert not params_equal(build_toy_segnet(cfg), other)

    def test_does_not_disturb_global_rng(self):
        torch.manual_seed(0)
        expected = torch.rand(3)
        torch.manual_seed(0)
        build_toy_segnet(ToyNetConfig(width=4, depth=1))
        assert torch.equal(torch.rand(3), expected)

    def test_shape_contract(self):
        net = build_toy_segnet(student_config(num_classes=4))
        out = net(torch.rand(2, 3, 64, 64))
        assert out.shape == (2, 4, 64, 64)

    @pytest.mark.parametrize("hw", [(17, 23), (1, 1), (30, 64)])
    def test_odd_sizes_preserved(self, hw):
        net = build_toy_segnet(ToyNetConfig(width=4, depth=3, num_classes=2)).eval()
        assert net(torch.rand(1, 3, *hw)).shape == (1, 2, *hw)

    def test_preset_ratio(self):
        t = count_parameters(build_toy_segnet(teacher_config()))
        s = count_parameters(build_toy_segnet(student_config()))
        assert t / s >= 4

    @pytest.mark.parametrize("kwargs", [{"width": 3}, {"depth": 0}, {"num_classes": 1}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            ToyNetConfig(**kwargs)

    def test_student_step_is_fast(self):
        net = build_toy_segnet(student_config())
        x = torch.rand(4, 3, 64, 64)
        net(x).mean().backward()  # warm-up
        start = time.perf_counter()
        net(x).mean().backward()
        assert time.perf_counter() - start < 1.0


class TestFreeze:
    def test_freeze_contract(self):
        net = freeze(build_toy_segnet(ToyNetConfig(width=4, depth=1)))
        assert all(not p.requires_grad for p in net.parameters())
        net.train()
        assert not net.training
        x = torch.rand(2, 3, 8, 8)
        a, b = net(x), net(x)
        assert torch.equal(a, b)
        assert not a.requires_grad
        before = {k: v.clone() for k, v in net.state_dict().items()}
        freeze(net)
        assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())

    def test_teacher_unchanged_by_student_training(self):
        teacher = freeze(build_toy_segnet(ToyNetConfig(width=4, depth=1, seed=1)))
        student = build_toy_segnet(ToyNetConfig(width=4, depth=1, seed=2))
        before = {k: v.clone() for k, v in teacher.state_dict().items()}
        opt = torch.optim.SGD(student.parameters(), lr=0.1)
        x = torch.rand(2, 3, 8, 8)
        for _ in range(3):
            loss = (student(x) - teacher(x)).pow(2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert all(torch.equal(before[k], v) for k, v in teacher.state_dict().items())


class TestCheckpoint:
    def make(self):
        net = build_toy_segnet(ToyNetConfig(width=4, depth=2, num_classes=3, seed=3))
        net(torch.rand(2, 3, 8, 8))  # touch BN running stats
        return net.eval()

    def test_round_trip(self, tmp_path):
        net = self.make()
        save_checkpoint(net, tmp_path / "n.ckpt", meta={"epoch": 4})
        loaded = load_checkpoint(tmp_path / "n.ckpt").eval()
        assert params_equal(net, loaded)
        assert loaded.config == net.config
        x = torch.rand(1, 3, 8, 8)
        assert torch.equal(net(x), loaded(x))
        _, _, meta = read_checkpoint(tmp_path / "n.ckpt")
        assert meta == {"epoch": 4}

    def test_mismatched_classes(self, tmp_path):
        save_checkpoint(self.make(), tmp_path / "n.ckpt")
        with pytest.raises(CheckpointError, match="num_classes"):
            load_checkpoint(tmp_path / "n.ckpt", expected_config=ToyNetConfig(width=4, depth=2, num_classes=5))

    def test_truncated(self, tmp_path):
        p = tmp_path / "n.ckpt"
        save_checkpoint(self.make(), p)
        data = p.read_bytes()
        for cut in (5, len(data) // 2, len(data) - 1):
            p.write_bytes(data[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(p)

    def test_bit_flip(self, tmp_path):
        p = tmp_path / "n.ckpt"
        save_checkpoint(self.make(), p)
        data = bytearray(p.read_bytes())
        data[len(data) // 2] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(p)

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "n.ckpt"
        save_checkpoint(self.make(), p)
        data = bytearray(p.read_bytes())
        data[8:12] = (FORMAT_VERSION + 1).to_bytes(4, "little")
        p.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
