"""Differentiable orthographic emission-absorption volume renderer.

The camera orbits the volume: azimuth rotates about the j (world-up) axis,
elevation tilts toward or away from it. Rendering first resamples the
volume so rays run along the k axis, then composites front to back with
exclusive transmittance, so an isolated front voxel is fully visible.

Rendered images are (H', W', C) tensors indexed [i, j]; 2D flow fields use
channel order (di, dj) in pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .grid import DensityField, VelocityField


@dataclass(frozen=True)
class CameraPose:
    """Orthographic camera: azimuth/elevation in radians, optional image size."""

    azimuth: float
    elevation: float = 0.0
    image_size: tuple[int, int] | None = None  # (H', W'); None = volume (H, W)


@dataclass
class RenderedView:
    """Nonnegative image produced by the renderer, with its camera pose."""

    pixels: torch.Tensor  # (H', W', 3) color or (H', W', 1) grayscale
    pose: CameraPose

    def __post_init__(self):
        if not torch.isfinite(self.pixels).all():
            raise ValueError("rendered image contains non-finite values")


def rotation_matrix(pose: CameraPose, dtype: torch.dtype = torch.float32,
                    device=None) -> torch.Tensor:
    """3x3 matrix R with p_source = R @ p_camera for (i, j, k) coordinates."""
    ca, sa = math.cos(pose.azimuth), math.sin(pose.azimuth)
    ce, se = math.cos(pose.elevation), math.sin(pose.elevation)
    r_az = torch.tensor([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]],
                        dtype=dtype, device=device)
    r_el = torch.tensor([[1.0, 0.0, 0.0], [0.0, ce, se], [0.0, -se, ce]],
                        dtype=dtype, device=device)
    return r_az @ r_el


def resample_to_camera(volume: torch.Tensor, pose: CameraPose,
                       out_depth: int | None = None) -> torch.Tensor:
    """Trilinearly resample a volume so camera rays align with the k axis.

    Accepts (H, W, D) or (H, W, D, C); returns the same layout with spatial
    shape (H', W', D_out). Output coordinates span the source extent per
    axis; samples falling outside the source volume are zero.
    """
    squeeze = volume.ndim == 3
    vol = volume.unsqueeze(-1) if squeeze else volume
    if vol.ndim != 4:
        raise ValueError(f"expected (H, W, D) or (H, W, D, C) volume, got {tuple(volume.shape)}")
    h, w, d, c = vol.shape
    out_h, out_w = pose.image_size if pose.image_size is not None else (h, w)
    out_d = out_depth if out_depth is not None else d

    dtype, device = vol.dtype, vol.device
    # World coordinates in voxel units, centered on the volume.
    def centers(n_out: int, n_src: int) -> torch.Tensor:
        idx = torch.arange(n_out, dtype=dtype, device=device)
        return ((2.0 * idx + 1.0) / n_out - 1.0) * (n_src / 2.0)

    ci, cj, ck = torch.meshgrid(centers(out_h, h), centers(out_w, w),
                                centers(out_d, d), indexing="ij")
    p_dst = torch.stack([ci, cj, ck], dim=-1)  # (H', W', D_out, 3)
    rot = rotation_matrix(pose, dtype=dtype, device=device)
    p_src = p_dst @ rot.T

    # grid_sample normalized coords, last grid channel addresses the first
    # spatial dim of the input; our (H, W, D) map to its (D_in, H_in, W_in).
    scale = torch.tensor([h, w, d], dtype=dtype, device=device) / 2.0
    g = p_src / scale
    grid = torch.stack([g[..., 2], g[..., 1], g[..., 0]], dim=-1).unsqueeze(0)
    x = vol.permute(3, 0, 1, 2).unsqueeze(0)
    y = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros",
                      align_corners=False)
    y = y.squeeze(0).permute(1, 2, 3, 0)
    return y.squeeze(-1) if squeeze else y


def _compositing_weights(d_eff: torch.Tensor, gamma: float) -> torch.Tensor:
    """Per-sample contribution d_eff * tau with exclusive front-to-back tau."""
    accumulated = torch.cumsum(d_eff, dim=-1) - d_eff
    tau = torch.exp(-gamma * accumulated)
    return d_eff * tau


def render_color(density: DensityField, rgb: torch.Tensor, delta_d: torch.Tensor,
                 pose: CameraPose, gamma: float) -> RenderedView:
    """Composite NCA radiance over the residual-modulated density field."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    shape = density.shape
    if tuple(rgb.shape) != (*shape, 3):
        raise ValueError(f"rgb shape {tuple(rgb.shape)} does not match density shape {shape}")
    if tuple(delta_d.shape) != shape:
        raise ValueError(f"delta_d shape {tuple(delta_d.shape)} does not match density shape {shape}")

    stacked = torch.cat([
        density.data.to(rgb.dtype).unsqueeze(-1),
        delta_d.unsqueeze(-1),
        rgb,
    ], dim=-1)
    res = resample_to_camera(stacked, pose)
    d_eff = torch.clamp_min(res[..., 0] * (1.0 + res[..., 1]), 0.0)
    weights = _compositing_weights(d_eff, gamma)
    pixels = torch.einsum("ijkc,ijk->ijc", res[..., 2:5], weights)
    return RenderedView(pixels, pose)


def render_gray(density: DensityField, delta_d: torch.Tensor, pose: CameraPose,
                gamma: float) -> RenderedView:
    """Composite unit radiance: the occupancy image of the modulated density."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    shape = density.shape
    if tuple(delta_d.shape) != shape:
        raise ValueError(f"delta_d shape {tuple(delta_d.shape)} does not match density shape {shape}")

    stacked = torch.stack([density.data.to(delta_d.dtype), delta_d], dim=-1)
    res = resample_to_camera(stacked, pose)
    d_eff = torch.clamp_min(res[..., 0] * (1.0 + res[..., 1]), 0.0)
    weights = _compositing_weights(d_eff, gamma)
    return RenderedView(weights.sum(dim=-1, keepdim=True), pose)


def project_velocity(density: DensityField, velocity: VelocityField,
                     pose: CameraPose, gamma: float) -> torch.Tensor:
    """Density-weighted projection of the velocity field onto the image plane.

    Per ray, the in-plane velocity components are averaged with the same
    d * tau weights the renderer uses; empty rays yield zero flow. Values
    are converted from voxels per frame to pixels per frame. Returns an
    (H', W', 2) tensor with channel order (di, dj).
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if velocity.shape != density.shape:
        raise ValueError(f"velocity shape {velocity.shape} does not match density shape {density.shape}")

    v = velocity.data
    rot = rotation_matrix(pose, dtype=v.dtype, device=v.device)
    v_cam = v @ rot  # row-vector form of R^T v
    stacked = torch.cat([density.data.to(v.dtype).unsqueeze(-1), v_cam], dim=-1)
    res = resample_to_camera(stacked, pose)

    d_res = torch.clamp_min(res[..., 0], 0.0)
    weights = _compositing_weights(d_res, gamma)
    wsum = weights.sum(dim=-1)
    num = torch.einsum("ijkc,ijk->ijc", res[..., 1:3], weights)
    flow = torch.where(wsum.unsqueeze(-1) > 0, num / wsum.clamp_min(1e-30).unsqueeze(-1),
                       torch.zeros_like(num))

    h, w, _ = density.shape
    out_h, out_w = pose.image_size if pose.image_size is not None else (h, w)
    scale = torch.tensor([out_h / h, out_w / w], dtype=flow.dtype, device=flow.device)
    return flow * scale


def tone_map(pixels: torch.Tensor, exposure: float = 1.0) -> torch.Tensor:
    """Scale raw radiance by a fixed exposure and clamp into [0, 1]."""
    return (pixels * exposure).clamp(0.0, 1.0)


def default_gamma(depth: int) -> float:
    """Absorption constant scaled inversely with volume depth (0.05 at D=64)."""
    return 3.2 / depth
