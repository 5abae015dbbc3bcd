"""Feed-forward stylization of density sequences with a trained rule.

Cell state persists across frames: each frame conditions the priors on
its own density and velocity, advances the automaton a fixed number of
steps, and emits the visible channels. Frames stream one at a time so
long sequences never materialize in memory.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import torch

from .grid import CellGrid, DensityField, VelocityField, positional_encoding
from .io import load_checkpoint, rule_from_checkpoint, save_image, write_vnv
from .render import CameraPose, render_color, tone_map
from .update import NonFiniteError, UpdateRule, readout, rollout

DEFAULT_BURN_IN = 96


@dataclass
class SequenceSpec:
    """Ordered density/velocity frame pairs sharing one grid resolution."""

    frames: list[tuple[DensityField, VelocityField | None]]
    frame_rate: float = 24.0

    def __post_init__(self):
        if not self.frames:
            raise ValueError("sequence has no frames")
        shape = self.frames[0][0].shape
        last_index = None
        for density, velocity in self.frames:
            if density.shape != shape:
                raise ValueError(
                    f"frame {density.frame_index}: density shape {density.shape} "
                    f"!= sequence shape {shape}")
            if velocity is not None and velocity.shape != shape:
                raise ValueError(
                    f"frame {density.frame_index}: velocity shape {velocity.shape} "
                    f"!= sequence shape {shape}")
            if last_index is not None and density.frame_index <= last_index:
                raise ValueError(
                    f"frame indices must be strictly increasing, got {last_index} "
                    f"then {density.frame_index}")
            last_index = density.frame_index

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames[0][0].shape


@dataclass
class StylizedFrame:
    """Readout of one frame: colors, residual, and the modulated density."""

    rgb: torch.Tensor
    delta_d: torch.Tensor
    effective_density: torch.Tensor
    frame_index: int


def _resolve_rule(rule_or_checkpoint) -> UpdateRule:
    if isinstance(rule_or_checkpoint, UpdateRule):
        return rule_or_checkpoint
    if isinstance(rule_or_checkpoint, (str, Path)):
        return rule_from_checkpoint(load_checkpoint(rule_or_checkpoint))
    if isinstance(rule_or_checkpoint, dict):
        return rule_from_checkpoint(rule_or_checkpoint)
    raise TypeError(f"expected UpdateRule, checkpoint payload or path, "
                    f"got {type(rule_or_checkpoint).__name__}")


def stylize_sequence(rule_or_checkpoint, seq: SequenceSpec, steps_per_frame: int,
                     seed: int = 0, burn_in: int = DEFAULT_BURN_IN,
                     fire_rate_override: float | None = None) -> Iterator[StylizedFrame]:
    """Yield one StylizedFrame per input frame, carrying cell state across.

    The first frame starts from zeros warmed up by `burn_in` extra steps.
    Rollout seeds derive deterministically from `seed`, one per rollout in
    emission order (burn-in first).
    """
    rule = _resolve_rule(rule_or_checkpoint)
    if steps_per_frame < 1:
        raise ValueError(f"steps_per_frame must be >= 1, got {steps_per_frame}")
    rng = random.Random(seed)
    shape = seq.shape

    with torch.inference_mode():
        pos = positional_encoding(shape)
        cells = CellGrid.zeros(shape, rule.channels)

        burn_seed = rng.randrange(2**31)
        first_density, first_velocity = seq.frames[0]
        if rule.with_velocity and first_velocity is None:
            raise ValueError(
                f"rule expects a velocity prior but frame {first_density.frame_index} has none")
        if burn_in > 0:
            cells = rollout(cells, rule, (pos, first_density, first_velocity),
                            burn_in, burn_seed, fire_rate=fire_rate_override)

        for density, velocity in seq.frames:
            if rule.with_velocity and velocity is None:
                raise ValueError(
                    f"rule expects a velocity prior but frame {density.frame_index} has none")
            frame_seed = rng.randrange(2**31)
            try:
                cells = rollout(cells, rule, (pos, density, velocity),
                                steps_per_frame, frame_seed,
                                fire_rate=fire_rate_override)
            except NonFiniteError as err:
                raise NonFiniteError(f"frame {density.frame_index}: {err}") from err
            rgb, delta_d = readout(cells)
            effective = torch.clamp_min(density.data * (1.0 + delta_d), 0.0)
            yield StylizedFrame(rgb.clone(), delta_d.clone(), effective,
                                density.frame_index)


def stylize_unseen(rule_or_checkpoint, seq: SequenceSpec, steps_per_frame: int,
                   seed: int = 0, burn_in: int = DEFAULT_BURN_IN,
                   fire_rate_override: float | None = None) -> Iterator[StylizedFrame]:
    """Stylize data never seen in training; same machinery, same contracts."""
    return stylize_sequence(rule_or_checkpoint, seq, steps_per_frame, seed=seed,
                            burn_in=burn_in, fire_rate_override=fire_rate_override)


def export_frames(frames: Iterable[StylizedFrame], poses: list[CameraPose],
                  gamma: float, out_dir: str | Path, exposure: float = 1.0,
                  export_volumes: bool = False) -> list[Path]:
    """Render each frame from each pose to numbered PNGs, optionally dump VNV1.

    PNG names are frame_{index:04d}_pose{p:02d}.png; volume dumps hold the
    4 visible channels (rgb, delta_d) as stylized_{index:04d}.vnv.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for frame in frames:
        density = DensityField(frame.effective_density, frame.frame_index)
        zero_delta = torch.zeros_like(frame.delta_d)
        for p, pose in enumerate(poses):
            view = render_color(density, frame.rgb, zero_delta, pose, gamma)
            path = out_dir / f"frame_{frame.frame_index:04d}_pose{p:02d}.png"
            written.append(save_image(path, tone_map(view.pixels, exposure)))
        if export_volumes:
            volume = torch.cat([frame.rgb, frame.delta_d.unsqueeze(-1)], dim=-1)
            written.append(write_vnv(out_dir / f"stylized_{frame.frame_index:04d}.vnv",
                                     volume))
    return written
