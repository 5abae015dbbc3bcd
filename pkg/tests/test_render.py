"""Renderer: rotation oracles, analytic compositing, gradients, projection."""

import math

import numpy as np
import pytest
import torch

from vnca.grid import DensityField, VelocityField
from vnca.render import (
    CameraPose,
    default_gamma,
    project_velocity,
    render_color,
    render_gray,
    resample_to_camera,
    rotation_matrix,
    tone_map,
)


def reference_render_color(d, rgb, dd, gamma):
    """Independent per-ray scalar renderer: exclusive front-to-back compositing."""
    d = np.asarray(d, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    dd = np.asarray(dd, dtype=np.float64)
    h, w, depth = d.shape
    out = np.zeros((h, w, 3))
    for i in range(h):
        for j in range(w):
            accumulated = 0.0
            for k in range(depth):
                d_eff = max(d[i, j, k] * (1.0 + dd[i, j, k]), 0.0)
                tau = math.exp(-gamma * accumulated)
                out[i, j] += rgb[i, j, k] * d_eff * tau
                accumulated += d_eff
    return out


def random_volume(seed, n=8, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    d = torch.rand(n, n, n, generator=gen, dtype=dtype)
    rgb = torch.rand(n, n, n, 3, generator=gen, dtype=dtype)
    dd = torch.rand(n, n, n, generator=gen, dtype=dtype) - 0.5
    return d, rgb, dd


class TestResample:
    def test_azimuth_zero_is_identity(self):
        gen = torch.Generator().manual_seed(0)
        vol = torch.rand(8, 8, 8, generator=gen, dtype=torch.float64)
        out = resample_to_camera(vol, CameraPose(0.0))
        assert (out - vol).abs().max() < 1e-6

    def test_azimuth_pi_mirrors_transverse_axes(self):
        gen = torch.Generator().manual_seed(1)
        vol = torch.rand(8, 8, 8, generator=gen, dtype=torch.float64)
        out = resample_to_camera(vol, CameraPose(math.pi))
        expected = torch.flip(vol, dims=(0, 2))
        assert (out - expected).abs().max() < 1e-9

    def test_azimuth_half_pi_permutes_axes(self):
        n = 8
        gen = torch.Generator().manual_seed(2)
        vol = torch.rand(n, n, n, generator=gen, dtype=torch.float64)
        out = resample_to_camera(vol, CameraPose(math.pi / 2))
        expected = torch.empty_like(vol)
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    expected[i, j, k] = vol[k, j, n - 1 - i]
        assert (out - expected).abs().max() < 1e-9

    def test_rotation_matrix_orthonormal(self):
        rot = rotation_matrix(CameraPose(0.7, 0.3), dtype=torch.float64)
        assert torch.allclose(rot @ rot.T, torch.eye(3, dtype=torch.float64), atol=1e-12)
        assert rot.det().item() == pytest.approx(1.0)

    def test_channelled_volume_and_image_size(self):
        gen = torch.Generator().manual_seed(3)
        vol = torch.rand(8, 8, 8, 2, generator=gen)
        out = resample_to_camera(vol, CameraPose(0.0, image_size=(12, 10)))
        assert out.shape == (12, 10, 8, 2)


class TestRenderColor:
    def test_empty_density_is_black(self):
        d = DensityField(torch.zeros(4, 4, 4))
        rgb = torch.rand(4, 4, 4, 3)
        dd = torch.zeros(4, 4, 4)
        view = render_color(d, rgb, dd, CameraPose(0.0), gamma=1.0)
        assert view.pixels.abs().max() == 0.0

    def test_single_voxel_fully_visible(self):
        d = torch.zeros(3, 3, 3, dtype=torch.float64)
        d[1, 1, 0] = 1.0
        rgb = torch.zeros(3, 3, 3, 3, dtype=torch.float64)
        rgb[1, 1, 0, 0] = 1.0
        dd = torch.zeros(3, 3, 3, dtype=torch.float64)
        view = render_color(DensityField(d), rgb, dd, CameraPose(0.0), gamma=1.0)
        assert torch.allclose(view.pixels[1, 1],
                              torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64),
                              atol=1e-6)

    def test_two_stacked_voxels(self):
        d = torch.zeros(1, 1, 2, dtype=torch.float64)
        d[0, 0, :] = 1.0
        rgb = torch.zeros(1, 1, 2, 3, dtype=torch.float64)
        rgb[0, 0, 0, 0] = 1.0  # front voxel red
        rgb[0, 0, 1, 1] = 1.0  # back voxel green
        dd = torch.zeros(1, 1, 2, dtype=torch.float64)
        view = render_color(DensityField(d), rgb, dd, CameraPose(0.0), gamma=1.0)
        expected = torch.tensor([1.0, math.exp(-1.0), 0.0], dtype=torch.float64)
        assert torch.allclose(view.pixels[0, 0], expected, atol=1e-6)

    def test_matches_reference_renderer(self):
        for seed in range(5):
            d, rgb, dd = random_volume(seed)
            view = render_color(DensityField(d), rgb, dd, CameraPose(0.0), gamma=0.3)
            expected = reference_render_color(d.numpy(), rgb.numpy(), dd.numpy(), 0.3)
            assert np.abs(view.pixels.numpy() - expected).max() < 1e-5

    def test_gamma_must_be_positive(self):
        d, rgb, dd = random_volume(6)
        with pytest.raises(ValueError, match="gamma"):
            render_color(DensityField(d), rgb, dd, CameraPose(0.0), gamma=0.0)

    def test_shape_mismatch_rejected(self):
        d, rgb, dd = random_volume(7)
        with pytest.raises(ValueError, match="shape"):
            render_color(DensityField(d), rgb[:4], dd, CameraPose(0.0), gamma=1.0)


class TestRenderGray:
    def test_empty_density_is_black(self):
        d = DensityField(torch.zeros(4, 4, 4))
        view = render_gray(d, torch.zeros(4, 4, 4), CameraPose(0.0), gamma=1.0)
        assert view.pixels.abs().max() == 0.0
        assert view.pixels.shape == (4, 4, 4 - 4 + 1)  # (H', W', 1)

    def test_zero_delta_equals_plain_occupancy_render(self):
        gen = torch.Generator().manual_seed(8)
        d = torch.rand(6, 6, 6, generator=gen, dtype=torch.float64)
        gamma = 0.4
        view = render_gray(DensityField(d), torch.zeros_like(d), CameraPose(0.0), gamma)
        accumulated = torch.cumsum(d, dim=-1) - d
        expected = (d * torch.exp(-gamma * accumulated)).sum(-1, keepdim=True)
        assert torch.allclose(view.pixels, expected, atol=1e-9)

    def test_negative_delta_dims_image(self):
        d = torch.ones(4, 4, 4, dtype=torch.float64)
        gamma = 0.5
        base = render_gray(DensityField(d), torch.zeros_like(d), CameraPose(0.0), gamma)
        dimmed = render_gray(DensityField(d), torch.full_like(d, -0.5),
                             CameraPose(0.0), gamma)
        assert (dimmed.pixels < base.pixels).all()


class TestGradients:
    def test_color_gradients_match_finite_differences(self):
        d, rgb, dd = random_volume(9, n=4)
        pose = CameraPose(0.0)
        gamma = 0.7
        rgb_leaf = rgb.clone().requires_grad_(True)
        dd_leaf = dd.clone().requires_grad_(True)
        render_color(DensityField(d), rgb_leaf, dd_leaf, pose, gamma).pixels.sum().backward()

        eps = 1e-3
        for leaf, grad in ((rgb_leaf, rgb_leaf.grad), (dd_leaf, dd_leaf.grad)):
            flat = leaf.detach().view(-1)
            numeric = torch.zeros_like(flat)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = render_color(DensityField(d), rgb_leaf.detach(), dd_leaf.detach(),
                                  pose, gamma).pixels.sum().item()
                flat[idx] = orig - eps
                down = render_color(DensityField(d), rgb_leaf.detach(), dd_leaf.detach(),
                                    pose, gamma).pixels.sum().item()
                flat[idx] = orig
                numeric[idx] = (up - down) / (2 * eps)
            numeric = numeric.view_as(grad)
            denom = torch.maximum(grad.abs(), numeric.abs()).clamp_min(1e-6)
            assert ((grad - numeric).abs() / denom).max() < 1e-3

    def test_energy_monotonic_in_gamma(self):
        d, rgb, dd = random_volume(10)
        lo = render_color(DensityField(d), rgb, dd, CameraPose(0.0), gamma=0.2)
        hi = render_color(DensityField(d), rgb, dd, CameraPose(0.0), gamma=0.9)
        assert (hi.pixels <= lo.pixels + 1e-12).all()

    def test_view_consistency(self):
        gen = torch.Generator().manual_seed(11)
        vol = torch.rand(8, 8, 8, generator=gen, dtype=torch.float64)
        rgb = torch.rand(8, 8, 8, 3, generator=gen, dtype=torch.float64)
        dd = torch.zeros(8, 8, 8, dtype=torch.float64)
        b = math.pi / 4
        # rotating the object by +b equals rotating the camera by -b
        rotated = torch.cat([vol.unsqueeze(-1), dd.unsqueeze(-1), rgb], dim=-1)
        rotated = resample_to_camera(rotated, CameraPose(-b))
        lhs = render_color(DensityField(rotated[..., 0].clamp_min(0)), rotated[..., 2:5],
                           rotated[..., 1], CameraPose(0.0), gamma=0.3)
        rhs = render_color(DensityField(vol), rgb, dd, CameraPose(-b), gamma=0.3)
        assert (lhs.pixels - rhs.pixels).abs().mean() < 1e-3


class TestProjectVelocity:
    def test_zero_velocity_gives_zero_flow(self):
        d = DensityField(torch.rand(4, 4, 4))
        v = VelocityField(torch.zeros(4, 4, 4, 3))
        flow = project_velocity(d, v, CameraPose(0.0), gamma=0.5)
        assert flow.abs().max() == 0.0

    def test_uniform_velocity_frontal(self):
        d = torch.zeros(6, 6, 6)
        d[2:4, 2:4, 2:4] = 1.0
        v = torch.zeros(6, 6, 6, 3)
        v[..., 0] = 1.0
        flow = project_velocity(DensityField(d), VelocityField(v), CameraPose(0.0),
                                gamma=0.5)
        occupied = d.sum(-1) > 0
        assert torch.allclose(flow[occupied],
                              torch.tensor([1.0, 0.0]).expand(int(occupied.sum()), 2),
                              atol=1e-6)
        assert flow[~occupied].abs().max() == 0.0

    def test_uniform_velocity_side_view_vanishes(self):
        d = torch.zeros(6, 6, 6)
        d[2:4, 2:4, 2:4] = 1.0
        v = torch.zeros(6, 6, 6, 3)
        v[..., 0] = 1.0
        flow = project_velocity(DensityField(d), VelocityField(v),
                                CameraPose(math.pi / 2), gamma=0.5)
        assert flow.abs().max() < 1e-6

    def test_pixel_scaling_with_image_size(self):
        d = torch.ones(4, 4, 4)
        v = torch.zeros(4, 4, 4, 3)
        v[..., 0] = 1.0
        pose = CameraPose(0.0, image_size=(8, 8))
        flow = project_velocity(DensityField(d), VelocityField(v), pose, gamma=0.5)
        assert flow.shape == (8, 8, 2)
        # doubling image resolution doubles the flow in pixel units
        assert flow[4, 4, 0].item() == pytest.approx(2.0, abs=1e-5)


class TestToneMap:
    def test_clamps_and_scales(self):
        img = torch.tensor([[-0.5, 0.25, 3.0]])
        out = tone_map(img, exposure=2.0)
        assert out.tolist() == [[0.0, 0.5, 1.0]]

    def test_default_gamma_scales_with_depth(self):
        assert default_gamma(64) == pytest.approx(0.05)
        assert default_gamma(32) == pytest.approx(0.1)
