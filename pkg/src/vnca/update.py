"""Trainable cell update rule and its stochastic integration.

Each step maps every cell's perception vector through a shared two-layer
MLP and adds the masked result to the state: s <- s + dt * mask * mlp(z).
The output layer starts at zero, so an untrained rule is the identity.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import torch
import torch.nn as nn

from .grid import (
    CellGrid,
    DensityField,
    PerceptionVolume,
    PositionalEncoding,
    VelocityField,
    build_perception,
    perception_channels,
)

Priors = tuple[PositionalEncoding, "DensityField | None", "VelocityField | None"]


class NonFiniteError(RuntimeError):
    """A NaN or Inf appeared in a named intermediate of the update."""


@dataclass
class StepMask:
    """Per-cell Bernoulli firing mask for one update step."""

    data: torch.Tensor  # (H, W, D), 0/1
    seed: int

    @property
    def density(self) -> float:
        return float(self.data.mean())


def _seeded_linear_init(linear: nn.Linear, seed: int) -> None:
    """Default Linear init (kaiming uniform) drawn from a seeded generator."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        nn.init.kaiming_uniform_(linear.weight, a=math.sqrt(5), generator=gen)
        bound = 1.0 / math.sqrt(linear.in_features)
        linear.bias.uniform_(-bound, bound, generator=gen)


def make_step_mask(shape: tuple[int, int, int], fire_rate: float, seed: int,
                   dtype: torch.dtype = torch.float32, device=None) -> StepMask:
    """i.i.d. Bernoulli(fire_rate) mask, reproducible from the seed."""
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    draws = torch.rand(shape, generator=gen)
    mask = (draws < fire_rate).to(dtype=dtype)
    if device is not None:
        mask = mask.to(device)
    return StepMask(mask, int(seed))


class UpdateRule(nn.Module):
    """Shared two-layer MLP update with ReLU, zero-initialized output layer."""

    def __init__(self, channels: int = 12, hidden_dim: int = 128,
                 fire_rate: float = 0.5, step_size: float = 1.0,
                 with_density: bool = True, with_velocity: bool = True,
                 padding: str = "replicate", state_clamp: float | None = 8.0,
                 init_seed: int | None = None):
        super().__init__()
        self.channels = channels
        self.hidden_dim = hidden_dim
        self.fire_rate = fire_rate
        self.step_size = step_size
        self.with_density = with_density
        self.with_velocity = with_velocity
        self.padding = padding
        self.state_clamp = state_clamp
        self.in_dim = perception_channels(channels, with_density, with_velocity)

        self.fc1 = nn.Linear(self.in_dim, hidden_dim)
        if init_seed is not None:
            _seeded_linear_init(self.fc1, init_seed)
        self.fc2 = nn.Linear(hidden_dim, channels)
        # Identity at init: zero output layer means zero state delta.
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, perception: torch.Tensor) -> torch.Tensor:
        """Map flattened perception vectors (N, in_dim) to state deltas (N, C)."""
        hidden = torch.relu(self.fc1(perception))
        if not torch.isfinite(hidden).all():
            raise NonFiniteError("non-finite values in MLP hidden activations")
        delta = self.fc2(hidden)
        if not torch.isfinite(delta).all():
            raise NonFiniteError("non-finite values in MLP output delta")
        return delta

    def meta(self) -> dict:
        return {
            "channels": self.channels,
            "hidden_dim": self.hidden_dim,
            "fire_rate": self.fire_rate,
            "step_size": self.step_size,
            "with_density": self.with_density,
            "with_velocity": self.with_velocity,
            "padding": self.padding,
            "state_clamp": self.state_clamp,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "UpdateRule":
        return cls(**meta)


def step(cells: CellGrid, rule: UpdateRule, priors: Priors, mask_seed: int,
         fire_rate: float | None = None) -> CellGrid:
    """One synchronous update of every cell, gated by a fresh Bernoulli mask."""
    pos, density, velocity = priors
    if rule.with_density and density is None:
        raise ValueError("rule was built with a density prior but none was given")
    if rule.with_velocity and velocity is None:
        raise ValueError("rule was built with a velocity prior but none was given")

    perc = build_perception(
        cells, pos,
        density if rule.with_density else None,
        velocity if rule.with_velocity else None,
        padding=rule.padding,
    )
    if not torch.isfinite(perc.data).all():
        raise NonFiniteError("non-finite values in perception volume")

    flat = perc.data.reshape(-1, perc.channels)
    delta = rule(flat).reshape(*cells.shape, rule.channels)

    rate = rule.fire_rate if fire_rate is None else fire_rate
    mask = make_step_mask(cells.shape, rate, mask_seed,
                          dtype=cells.state.dtype, device=cells.state.device)
    fired = rule.step_size * mask.data.unsqueeze(-1) * delta
    new_state = cells.state + fired
    if rule.state_clamp is not None:
        # Bound the recurrent dynamics: cells that received a nonzero update
        # clamp into [-B, B], keeping thousand-step rollouts finite. Cells
        # with a zero delta pass through untouched, so an untrained rule
        # stays an exact identity.
        bound = rule.state_clamp
        new_state = torch.where(fired != 0, new_state.clamp(-bound, bound), new_state)
    return CellGrid(new_state)


def rollout(cells: CellGrid, rule: UpdateRule, priors: Priors, n_steps: int,
            seed: int, fire_rate: float | None = None) -> CellGrid:
    """Apply n_steps sequential updates with per-step seeds derived from seed."""
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    rng = random.Random(seed)
    out = cells
    for _ in range(n_steps):
        out = step(out, rule, priors, rng.randrange(2**31), fire_rate=fire_rate)
    return out


def readout(cells: CellGrid) -> tuple[torch.Tensor, torch.Tensor]:
    """Visible channels: rgb clamped to [0, 1], residual density to [-0.5, 0.5]."""
    rgb = cells.state[..., 0:3].clamp(0.0, 1.0)
    delta_d = cells.state[..., 3].clamp(-0.5, 0.5)
    return rgb, delta_d
