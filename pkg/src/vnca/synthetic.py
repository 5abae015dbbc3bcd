"""Analytic test data: a rising Gaussian plume and striped style exemplars.

The plume is a Gaussian puff carried by an accelerating updraft along the
j (world-up) axis, v_j = v0 + v1 * (j - j0). The transport equation for
that field has a closed-form backward flow map, so every frame is an
exact analytic function and the velocity field is known everywhere.
"""

from __future__ import annotations

import math
from pathlib import Path

import torch

from .grid import DensityField, VelocityField
from .io import density_path, velocity_path, write_vnv


def plume_frame(shape: tuple[int, int, int], frame: int,
                center: tuple[float, float, float] | None = None,
                sigma: float | None = None, amplitude: float = 1.0,
                v0: float = 0.5, v1: float = 0.03,
                dtype: torch.dtype = torch.float32) -> tuple[DensityField, VelocityField]:
    """Density and velocity of the analytic plume at one frame."""
    h, w, d = shape
    if sigma is None:
        sigma = h / 8.0
    if center is None:
        center = (h / 2.0, w / 4.0, d / 2.0)
    ci, cj, ck = center
    j_ref = 0.0  # updraft reference height

    ii = torch.arange(h, dtype=dtype).view(h, 1, 1)
    jj = torch.arange(w, dtype=dtype).view(1, w, 1)
    kk = torch.arange(d, dtype=dtype).view(1, 1, d)

    # Backward flow map of dj/dt = v0 + v1 (j - j_ref) over `frame` frames.
    if abs(v1) > 1e-12:
        decay = math.exp(-v1 * frame)
        j_src = j_ref + (jj - j_ref + v0 / v1) * decay - v0 / v1
    else:
        j_src = jj - v0 * frame

    r2 = (ii - ci) ** 2 + (j_src - cj) ** 2 + (kk - ck) ** 2
    density = amplitude * torch.exp(-r2 / (2.0 * sigma**2))

    vel = torch.zeros(h, w, d, 3, dtype=dtype)
    vel[..., 1] = v0 + v1 * (jj - j_ref)
    return DensityField(density, frame), VelocityField(vel, frame)


def plume_sequence(shape: tuple[int, int, int], n_frames: int,
                   **kwargs) -> list[tuple[DensityField, VelocityField]]:
    return [plume_frame(shape, t, **kwargs) for t in range(n_frames)]


def write_plume_dataset(out_dir: str | Path, shape: tuple[int, int, int],
                        n_frames: int, **kwargs) -> Path:
    """Write the plume as density_%04d.vnv / velocity_%04d.vnv files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t in range(n_frames):
        density, velocity = plume_frame(shape, t, **kwargs)
        write_vnv(density_path(out_dir, t), density.data)
        write_vnv(velocity_path(out_dir, t), velocity.data)
    return out_dir


def stripes_image(size: int = 128, period: float = 24.0, angle_deg: float = 45.0,
                  color_a: tuple[float, float, float] = (0.9, 0.55, 0.15),
                  color_b: tuple[float, float, float] = (0.1, 0.25, 0.6),
                  dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Diagonal two-color stripes, (size, size, 3) in [0, 1].

    Diagonal stripes are chirally asymmetric: a mirrored view flips the
    stripe direction, which multi-view consistency checks rely on.
    """
    theta = math.radians(angle_deg)
    ii = torch.arange(size, dtype=dtype).view(size, 1)
    jj = torch.arange(size, dtype=dtype).view(1, size)
    phase = (ii * math.cos(theta) + jj * math.sin(theta)) * (2.0 * math.pi / period)
    blend = 0.5 * (1.0 + torch.sin(phase))
    a = torch.tensor(color_a, dtype=dtype)
    b = torch.tensor(color_b, dtype=dtype)
    return blend.unsqueeze(-1) * a + (1.0 - blend.unsqueeze(-1)) * b
