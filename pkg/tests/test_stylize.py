"""Inference: identity rule, state carry-over, exports, forward-only mode."""

import hashlib
import random

import pytest
import torch

from vnca.grid import CellGrid, DensityField, VelocityField, positional_encoding
from vnca.io import read_vnv
from vnca.render import CameraPose, render_color
from vnca.stylize import SequenceSpec, export_frames, stylize_sequence, stylize_unseen
from vnca.synthetic import plume_sequence
from vnca.update import UpdateRule, readout, rollout


def randomized_rule(seed=0, scale=0.05, **kwargs):
    rule = UpdateRule(channels=12, hidden_dim=8, **kwargs)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        rule.fc2.weight.copy_(torch.randn(rule.fc2.weight.shape, generator=gen) * scale)
        rule.fc2.bias.copy_(torch.randn(rule.fc2.bias.shape, generator=gen) * scale)
    return rule


@pytest.fixture(scope="module")
def small_seq():
    return SequenceSpec(plume_sequence((10, 10, 10), 3, sigma=2.0))


class TestSequenceSpec:
    def test_mismatched_dims_rejected(self):
        frames = plume_sequence((8, 8, 8), 1) + plume_sequence((8, 8, 9), 1)
        frames[1] = (DensityField(frames[1][0].data, 1),
                     VelocityField(frames[1][1].data, 1))
        with pytest.raises(ValueError, match="shape"):
            SequenceSpec(frames)

    def test_nonincreasing_indices_rejected(self):
        a = plume_sequence((6, 6, 6), 1)[0]
        with pytest.raises(ValueError, match="strictly increasing"):
            SequenceSpec([a, a])

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no frames"):
            SequenceSpec([])


class TestIdentityRule:
    def test_untrained_rule_passes_density_through(self, small_seq):
        rule = UpdateRule(channels=12, hidden_dim=8)
        frames = list(stylize_sequence(rule, small_seq, steps_per_frame=4, seed=1))
        assert len(frames) == 3
        for out, (density, _) in zip(frames, small_seq.frames):
            assert out.rgb.abs().max() == 0.0
            assert out.delta_d.abs().max() == 0.0
            assert torch.equal(out.effective_density, density.data)
            assert out.frame_index == density.frame_index


class TestStatefulness:
    def test_state_carries_across_frames(self, small_seq):
        rule = randomized_rule(seed=2)
        frames = list(stylize_sequence(rule, small_seq, steps_per_frame=4, seed=3,
                                       burn_in=8))
        single = list(stylize_sequence(rule,
                                       SequenceSpec(small_seq.frames[1:2]),
                                       steps_per_frame=4, seed=3, burn_in=8))
        assert not torch.equal(frames[1].rgb, single[0].rgb)

    def test_single_frame_equals_rollout_definition(self, small_seq):
        rule = randomized_rule(seed=4)
        seq = SequenceSpec(small_seq.frames[:1])
        steps = 5
        seed = 11
        out = next(iter(stylize_sequence(rule, seq, steps_per_frame=steps, seed=seed,
                                         burn_in=0)))
        rng = random.Random(seed)
        rng.randrange(2**31)  # burn-in seed slot
        frame_seed = rng.randrange(2**31)
        density, velocity = seq.frames[0]
        pos = positional_encoding(density.shape)
        cells = rollout(CellGrid.zeros(density.shape, 12), rule,
                        (pos, density, velocity), steps, frame_seed)
        rgb, delta_d = readout(cells)
        assert torch.equal(out.rgb, rgb)
        assert torch.equal(out.delta_d, delta_d)

    def test_deterministic_given_seed(self, small_seq):
        rule = randomized_rule(seed=5)
        a = list(stylize_sequence(rule, small_seq, 4, seed=9, burn_in=4))
        b = list(stylize_sequence(rule, small_seq, 4, seed=9, burn_in=4))
        for x, y in zip(a, b):
            assert torch.equal(x.rgb, y.rgb)
            assert torch.equal(x.delta_d, y.delta_d)

    def test_forward_only(self, small_seq):
        rule = randomized_rule(seed=6)
        for out in stylize_sequence(rule, small_seq, 2, seed=0, burn_in=2):
            assert not out.rgb.requires_grad
            assert out.rgb.grad_fn is None
            assert not out.delta_d.requires_grad


class TestUnseen:
    def test_same_sequence_matches_bitwise(self, small_seq):
        rule = randomized_rule(seed=7)
        a = list(stylize_sequence(rule, small_seq, 3, seed=2, burn_in=4))
        b = list(stylize_unseen(rule, small_seq, 3, seed=2, burn_in=4))
        for x, y in zip(a, b):
            assert torch.equal(x.rgb, y.rgb)
            assert torch.equal(x.effective_density, y.effective_density)

    def test_shifted_plume_stays_in_bounds(self):
        rule = randomized_rule(seed=8, scale=0.2)
        seq = SequenceSpec(plume_sequence((10, 10, 10), 2, sigma=2.0,
                                          center=(7.0, 5.0, 4.0)))
        for out in stylize_unseen(rule, seq, 4, seed=0, burn_in=16):
            assert torch.isfinite(out.rgb).all()
            assert out.delta_d.min() >= -0.5 and out.delta_d.max() <= 0.5
            occupied = seq.frames[0][0].data > 0.1
            assert out.rgb[occupied].abs().max() > 0
            assert (out.effective_density >= 0).all()

    def test_empty_density_frame(self):
        shape = (6, 6, 6)
        seq = SequenceSpec([(DensityField(torch.zeros(shape)),
                             VelocityField(torch.zeros(*shape, 3)))])
        rule = randomized_rule(seed=9)
        out = next(iter(stylize_unseen(rule, seq, 2, seed=0, burn_in=2)))
        assert out.effective_density.abs().max() == 0.0
        view = render_color(DensityField(out.effective_density), out.rgb,
                            torch.zeros_like(out.delta_d), CameraPose(0.0), gamma=0.5)
        assert view.pixels.abs().max() == 0.0

    def test_missing_velocity_rejected_with_rule_expectation(self):
        rule = randomized_rule(seed=10)  # with_velocity=True by default
        seq = SequenceSpec([(DensityField(torch.zeros(4, 4, 4)), None)])
        with pytest.raises(ValueError, match="velocity"):
            next(iter(stylize_sequence(rule, seq, 2, seed=0)))


class TestExport:
    def test_numbered_pngs_and_volumes(self, small_seq, tmp_path):
        rule = randomized_rule(seed=11)
        frames = stylize_sequence(rule, small_seq, 2, seed=1, burn_in=2)
        poses = [CameraPose(0.0), CameraPose(1.57)]
        written = export_frames(frames, poses, gamma=0.3, out_dir=tmp_path,
                                export_volumes=True)
        pngs = sorted(p.name for p in tmp_path.glob("*.png"))
        assert pngs == [
            "frame_0000_pose00.png", "frame_0000_pose01.png",
            "frame_0001_pose00.png", "frame_0001_pose01.png",
            "frame_0002_pose00.png", "frame_0002_pose01.png",
        ]
        vols = sorted(p.name for p in tmp_path.glob("*.vnv"))
        assert vols == ["stylized_0000.vnv", "stylized_0001.vnv", "stylized_0002.vnv"]
        assert len(written) == 9

    def test_volume_dump_round_trips(self, small_seq, tmp_path):
        rule = randomized_rule(seed=12)
        frames = list(stylize_sequence(rule, small_seq, 2, seed=1, burn_in=2))
        export_frames(frames, [CameraPose(0.0)], 0.3, tmp_path, export_volumes=True)
        back = read_vnv(tmp_path / "stylized_0001.vnv")
        assert torch.equal(back[..., 0:3], frames[1].rgb)
        assert torch.equal(back[..., 3], frames[1].delta_d)

    def test_reexport_is_byte_identical(self, small_seq, tmp_path):
        rule = randomized_rule(seed=13)

        def run(where):
            frames = stylize_sequence(rule, small_seq, 2, seed=5, burn_in=2)
            export_frames(frames, [CameraPose(0.0)], 0.3, where, export_volumes=True)
            return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                    for p in sorted(where.iterdir())}

        first = run(tmp_path / "a")
        second = run(tmp_path / "b")
        assert first == second
