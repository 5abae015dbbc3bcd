"""Grid data types, fixed perception stencils, and prior encodings.

Volumes are channel-last torch tensors. A volume of shape (H, W, D) is
indexed [i, j, k]; cell states carry a trailing channel axis (H, W, D, C).
Axis j is treated as world-up by the camera model, axis k is the view
axis of the frontal camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

DEFAULT_CHANNELS = 12
RGB_SLICE = slice(0, 3)
DELTA_D_CHANNEL = 3

PAD_MODES = ("replicate", "circular")

# Sobel stencil: [-1, 0, 1] derivative, [1, 2, 1] x [1, 2, 1] transverse
# smoothing, normalized so a unit-slope ramp yields exactly 1.
_SOBEL_DERIV = (-1.0, 0.0, 1.0)
_SOBEL_SMOOTH = (1.0, 2.0, 1.0)
_SOBEL_NORM = 32.0

# Compact 27-point Laplacian: corners 2, edges 3, faces 6, center -88,
# all divided by 26. Weights sum to zero; response on i^2+j^2+k^2 is 6.
_LAP_WEIGHT_BY_NONZERO = {0: -88.0, 1: 6.0, 2: 3.0, 3: 2.0}
_LAP_NORM = 26.0

AXES = ("x", "y", "z")


@dataclass
class DensityField:
    """Scalar occupancy of one simulation frame, shape (H, W, D), values >= 0."""

    data: torch.Tensor
    frame_index: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"density must have shape (H, W, D), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("density contains non-finite values")
        if (self.data < 0).any():
            raise ValueError("density values must be >= 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class VelocityField:
    """Per-voxel 3-vector motion in grid units per frame, shape (H, W, D, 3).

    Component order matches the volume axes: (v_i, v_j, v_k).
    """

    data: torch.Tensor
    frame_index: int = 0

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ValueError(f"velocity must have shape (H, W, D, 3), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("velocity contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])


@dataclass
class CellGrid:
    """Cell states of the automaton, shape (H, W, D, C).

    Channels 0..2 hold RGB, channel 3 the residual density update, the
    rest are hidden memory. States start at zero and are unconstrained
    until readout clamps the visible channels.
    """

    state: torch.Tensor

    def __post_init__(self):
        if self.state.ndim != 4:
            raise ValueError(f"cell state must have shape (H, W, D, C), got {tuple(self.state.shape)}")
        if not torch.isfinite(self.state).all():
            raise ValueError("cell state contains non-finite values")

    @classmethod
    def zeros(cls, shape: tuple[int, int, int], channels: int = DEFAULT_CHANNELS,
              dtype: torch.dtype = torch.float32, device=None) -> "CellGrid":
        h, w, d = shape
        return cls(torch.zeros(h, w, d, channels, dtype=dtype, device=device))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.state.shape[:3])

    @property
    def channels(self) -> int:
        return self.state.shape[-1]


@dataclass
class PositionalEncoding:
    """Normalized cell coordinates, shape (H, W, D, 3), each in [-1, 1)."""

    data: torch.Tensor

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])


@dataclass
class PerceptionVolume:
    """Per-cell perception vectors, shape (H, W, D, K).

    Channel layout: state (C), d/dx (C), d/dy (C), d/dz (C), Laplacian (C),
    then position (3), density (1, when provided), velocity (3, when
    provided). K = 5C + 7 with both priors, 5C + 4 without velocity.
    """

    data: torch.Tensor
    channels: int = field(init=False)

    def __post_init__(self):
        self.channels = self.data.shape[-1]


def perception_channels(channels: int, with_density: bool = True,
                        with_velocity: bool = True) -> int:
    """Input width of the update rule for a given channel count and priors."""
    return 5 * channels + 3 + (1 if with_density else 0) + (3 if with_velocity else 0)


def sobel_kernel(axis: str, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """3x3x3 Sobel derivative kernel for one axis of an (i, j, k) volume."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    deriv = torch.tensor(_SOBEL_DERIV, dtype=dtype)
    smooth = torch.tensor(_SOBEL_SMOOTH, dtype=dtype)
    taps = {
        "x": (deriv, smooth, smooth),
        "y": (smooth, deriv, smooth),
        "z": (smooth, smooth, deriv),
    }[axis]
    kernel = torch.einsum("i,j,k->ijk", *taps)
    return kernel / _SOBEL_NORM


def laplacian_kernel(dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """3x3x3 compact 27-point Laplacian kernel (zero-sum)."""
    kernel = torch.empty(3, 3, 3, dtype=dtype)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for dk in (-1, 0, 1):
                nonzero = (di != 0) + (dj != 0) + (dk != 0)
                kernel[di + 1, dj + 1, dk + 1] = _LAP_WEIGHT_BY_NONZERO[nonzero]
    return kernel / _LAP_NORM


def _check_stencil_input(grid: torch.Tensor, padding: str) -> None:
    if grid.ndim not in (3, 4):
        raise ValueError(f"expected (H, W, D) or (H, W, D, C) tensor, got shape {tuple(grid.shape)}")
    if padding not in PAD_MODES:
        raise ValueError(f"padding must be one of {PAD_MODES}, got {padding!r}")
    if not torch.isfinite(grid).all():
        raise ValueError("stencil input contains non-finite values")


def _apply_stencil(grid: torch.Tensor, kernel: torch.Tensor, padding: str) -> torch.Tensor:
    """Per-channel 3x3x3 convolution with the given kernel, same-size output."""
    squeeze = grid.ndim == 3
    vol = grid.unsqueeze(-1) if squeeze else grid
    c = vol.shape[-1]
    x = vol.permute(3, 0, 1, 2).unsqueeze(0)  # (1, C, H, W, D)
    x = F.pad(x, (1, 1, 1, 1, 1, 1), mode=padding)
    weight = kernel.to(dtype=vol.dtype, device=vol.device).view(1, 1, 3, 3, 3).expand(c, 1, 3, 3, 3)
    y = F.conv3d(x, weight, groups=c)
    y = y.squeeze(0).permute(1, 2, 3, 0)
    return y.squeeze(-1) if squeeze else y


def sobel3d(grid: torch.Tensor, axis: str, padding: str = "replicate") -> torch.Tensor:
    """Smoothed finite-difference gradient along one axis, per channel."""
    _check_stencil_input(grid, padding)
    return _apply_stencil(grid, sobel_kernel(axis, grid.dtype), padding)


def laplacian27(grid: torch.Tensor, padding: str = "replicate") -> torch.Tensor:
    """27-point discrete Laplacian, per channel."""
    _check_stencil_input(grid, padding)
    return _apply_stencil(grid, laplacian_kernel(grid.dtype), padding)


def positional_encoding(shape: tuple[int, int, int],
                        dtype: torch.dtype = torch.float32,
                        device=None) -> PositionalEncoding:
    """Per-cell coordinates ((2i+1)/H - 1, (2j+1)/W - 1, (2k+1)/D - 1)."""
    h, w, d = shape
    if min(h, w, d) < 1:
        raise ValueError(f"grid dimensions must be >= 1, got {shape}")
    axes = [
        (2.0 * torch.arange(n, dtype=dtype, device=device) + 1.0) / n - 1.0
        for n in (h, w, d)
    ]
    grids = torch.meshgrid(*axes, indexing="ij")
    return PositionalEncoding(torch.stack(grids, dim=-1))


def build_perception(cells: CellGrid,
                     pos: PositionalEncoding,
                     density: DensityField | None,
                     velocity: VelocityField | None,
                     padding: str = "replicate") -> PerceptionVolume:
    """Concatenate cell state, stencil responses, and prior encodings.

    The stencil weights are fixed constants; only the cell state carries
    gradients. Density and velocity channels are appended when provided.
    """
    shape = cells.shape
    if pos.shape != shape:
        raise ValueError(f"positional encoding shape {pos.shape} != cell grid shape {shape}")
    if density is not None and density.shape != shape:
        raise ValueError(f"density shape {density.shape} != cell grid shape {shape}")
    if velocity is not None and velocity.shape != shape:
        raise ValueError(f"velocity shape {velocity.shape} != cell grid shape {shape}")

    state = cells.state
    parts = [
        state,
        sobel3d(state, "x", padding),
        sobel3d(state, "y", padding),
        sobel3d(state, "z", padding),
        laplacian27(state, padding),
        pos.data.to(state.dtype),
    ]
    if density is not None:
        parts.append(density.data.to(state.dtype).unsqueeze(-1))
    if velocity is not None:
        parts.append(velocity.data.to(state.dtype))
    return PerceptionVolume(torch.cat(parts, dim=-1))
