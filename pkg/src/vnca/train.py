"""Single-frame training loop.

Each epoch: sample a camera pose, draw a state from the pool (sometimes
reseeding it to zeros), render before, roll the automaton a random number
of steps, render after, then optimize the rule on appearance loss against
the exemplar plus motion loss against the projected velocity field.
Gradients are L2-normalized per parameter tensor before the Adam step.
"""

from __future__ import annotations

import csv
import hashlib
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import TrainConfig, config_to_dict
from .determinism import apply_env
from .grid import CellGrid, DensityField, VelocityField, positional_encoding
from .io import (
    density_path,
    load_image,
    read_density,
    read_velocity,
    save_checkpoint,
    save_image,
    sha256_file,
    velocity_path,
)
from .adapters import load_feature_extractor, load_flow_estimator
from .losses import appearance_loss, motion_loss, precompute_style_features
from .render import (
    CameraPose,
    default_gamma,
    project_velocity,
    render_color,
    render_gray,
    tone_map,
)
from .update import NonFiniteError, UpdateRule, readout, rollout

RUN_LOG_COLUMNS = (
    "epoch", "l_style", "l_moment", "l_app", "l_dir", "l_mag", "l_motion",
    "total", "n_steps", "pose_azimuth", "pose_elevation", "pool_index",
    "reseeded", "epoch_seed",
)

GRAD_NOISE_FLOOR = 1e-6


@dataclass
class LossReport:
    """Scalar loss terms of one epoch plus bookkeeping for the run log."""

    epoch: int
    l_style: float
    l_moment: float
    l_app: float
    l_dir: float
    l_mag: float
    l_motion: float
    total: float
    n_steps: int
    pose_azimuth: float
    pose_elevation: float
    pool_index: int
    reseeded: bool
    epoch_seed: int
    per_layer: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def row(self) -> list[str]:
        values = [getattr(self, col) for col in RUN_LOG_COLUMNS]
        return [repr(v) if isinstance(v, float) else str(v) for v in values]


class StatePool:
    """Reservoir of evolved cell states reused across epochs."""

    def __init__(self, size: int, shape: tuple[int, int, int], channels: int,
                 dtype: torch.dtype = torch.float32, device=None):
        self.states = [torch.zeros(*shape, channels, dtype=dtype, device=device)
                       for _ in range(size)]
        self.ages = [0] * size

    def __len__(self) -> int:
        return len(self.states)

    def fetch(self, index: int, reseed: bool) -> tuple[torch.Tensor, bool]:
        """Return a detached state; zeros it when asked or when non-finite."""
        state = self.states[index]
        if reseed or not torch.isfinite(state).all():
            state = torch.zeros_like(state)
            self.ages[index] = 0
            reseed = True
        return state, reseed

    def store(self, index: int, state: torch.Tensor, steps: int) -> None:
        self.states[index] = state.detach()
        self.ages[index] += steps


def epoch_seed(base_seed: int, epoch: int) -> int:
    return base_seed * 1_000_003 + epoch


def build_poses(cfg: TrainConfig) -> list[CameraPose]:
    size = tuple(cfg.render.image_size)
    elev = math.radians(cfg.render.elevation_deg)
    return [CameraPose(math.radians(az), elev, size) for az in cfg.render.azimuths_deg]


def resolve_gamma(cfg: TrainConfig, depth: int) -> float:
    return cfg.render.gamma if cfg.render.gamma is not None else default_gamma(depth)


def _make_scheduler(optimizer, cfg: TrainConfig, last_epoch: int = -1):
    milestones = sorted({max(1, int(cfg.epochs * f)) for f in cfg.lr_milestones})
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones,
                                                gamma=cfg.lr_decay,
                                                last_epoch=last_epoch)


@dataclass
class TrainSetup:
    """Everything one run owns: model, optimiser, pool, adapters, caches."""

    rule: UpdateRule
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    pool: StatePool
    pos: object
    poses: list[CameraPose]
    target_flows: list[torch.Tensor] | None
    extractor: object
    flow: object
    style_img: torch.Tensor
    style_feats: object
    gamma: float


def make_setup(cfg: TrainConfig, frame: tuple[DensityField, VelocityField | None],
               style_img: torch.Tensor) -> TrainSetup:
    density, velocity = frame
    if velocity is not None and velocity.shape != density.shape:
        raise ValueError(f"velocity shape {velocity.shape} != density shape {density.shape}")
    if cfg.encoding.velocity and velocity is None:
        raise ValueError("velocity encoding enabled but the frame has no velocity field")

    device = torch.device(cfg.device)
    rule = UpdateRule(
        channels=cfg.grid.channels, hidden_dim=cfg.grid.hidden_dim,
        fire_rate=cfg.grid.fire_rate, step_size=cfg.grid.step_size,
        with_density=cfg.encoding.density, with_velocity=cfg.encoding.velocity,
        padding=cfg.grid.padding, state_clamp=cfg.grid.state_clamp,
        init_seed=cfg.seed,
    ).to(device)
    optimizer = torch.optim.Adam(rule.parameters(), lr=cfg.lr)
    scheduler = _make_scheduler(optimizer, cfg)

    pool = StatePool(cfg.pool_size, density.shape, cfg.grid.channels, device=device)
    pos = positional_encoding(density.shape, device=device)
    poses = build_poses(cfg)
    gamma = resolve_gamma(cfg, density.shape[2])

    extractor = load_feature_extractor(cfg.loss.extractor.spec()).to(device)
    flow = load_flow_estimator(cfg.loss.flow.spec()).to(device)
    style_img = style_img.to(device)
    style_feats = precompute_style_features(style_img, extractor)

    target_flows = None
    if velocity is not None:
        with torch.no_grad():
            target_flows = [project_velocity(density, velocity, pose, gamma)
                            for pose in poses]

    return TrainSetup(rule, optimizer, scheduler, pool, pos, poses, target_flows,
                      extractor, flow, style_img, style_feats, gamma)


def train_epoch(setup: TrainSetup, frame: tuple[DensityField, VelocityField | None],
                cfg: TrainConfig, epoch: int, seed: int) -> LossReport:
    """One optimization step; mutates the rule, optimizer and pool in place."""
    rng = random.Random(seed)
    density, velocity = frame
    pose_index = rng.randrange(len(setup.poses)) if cfg.render.multiview else 0
    pose = setup.poses[pose_index]
    pool_index = rng.randrange(len(setup.pool))
    want_reseed = rng.random() < cfg.reseed_prob
    n_steps = rng.randint(*cfg.n_range)
    rollout_seed = rng.randrange(2**31)
    subsample_seed = rng.randrange(2**31)

    state, reseeded = setup.pool.fetch(pool_index, want_reseed)
    cells = CellGrid(state)
    priors = (setup.pos, density, velocity if cfg.encoding.velocity else None)
    exposure = cfg.render.exposure

    with torch.no_grad():
        rgb_b, dd_b = readout(cells)
        before_color = tone_map(render_color(density, rgb_b, dd_b, pose, setup.gamma).pixels,
                                exposure)
        before_gray = tone_map(render_gray(density, dd_b, pose, setup.gamma).pixels,
                               exposure)

    cells_after = rollout(cells, setup.rule, priors, n_steps, rollout_seed)
    rgb_f, dd_f = readout(cells_after)
    after_color = tone_map(render_color(density, rgb_f, dd_f, pose, setup.gamma).pixels,
                           exposure)
    after_gray = tone_map(render_gray(density, dd_f, pose, setup.gamma).pixels,
                          exposure)

    app = appearance_loss(after_color, after_gray, setup.style_img, setup.extractor,
                          max_positions=cfg.loss.style_max_positions,
                          seed=subsample_seed, style_features=setup.style_feats)

    if setup.target_flows is not None:
        if cfg.loss.flow_input == "color":
            flow_pred = setup.flow(before_color, after_color)
        else:
            flow_pred = setup.flow(before_gray, after_gray)
        mot = motion_loss(flow_pred, setup.target_flows[pose_index],
                          n_steps, cfg.steps_per_frame,
                          lam_dir=cfg.loss.lambda_dir, lam_mag=cfg.loss.lambda_mag,
                          invert_gate=cfg.loss.invert_motion_gate)
        l_dir, l_mag, l_motion = mot.l_dir, mot.l_mag, mot.l_motion
        zero_frac = mot.zero_flow_fraction
    else:
        zero = app.l_app.new_zeros(())
        l_dir = l_mag = l_motion = zero
        zero_frac = 0.0

    total = cfg.loss.lambda_app * app.l_app + cfg.loss.lambda_motion * l_motion

    report = LossReport(
        epoch=epoch,
        l_style=float(app.l_style.detach()), l_moment=float(app.l_moment.detach()),
        l_app=float(app.l_app.detach()),
        l_dir=float(l_dir.detach()), l_mag=float(l_mag.detach()),
        l_motion=float(l_motion.detach()),
        total=float(total.detach()),
        n_steps=n_steps,
        pose_azimuth=pose.azimuth, pose_elevation=pose.elevation,
        pool_index=pool_index, reseeded=reseeded, epoch_seed=seed,
        per_layer=app.per_layer,
        metadata={"exposure": exposure, "gamma": setup.gamma,
                  "zero_flow_fraction": zero_frac,
                  "lr": setup.optimizer.param_groups[0]["lr"]},
    )
    if not math.isfinite(report.total):
        raise NonFiniteError(
            f"non-finite total loss at epoch {epoch} (seed {seed}): {report}")

    setup.optimizer.zero_grad()
    total.backward()
    grads = [p.grad for p in setup.rule.parameters() if p.grad is not None]
    total_norm = torch.sqrt(sum(g.square().sum() for g in grads))
    # Below the floor the gradient is float noise at an optimum; normalizing
    # it would amplify the noise to a unit-norm step, so skip instead.
    if total_norm > GRAD_NOISE_FLOOR:
        for g in grads:
            g.div_(g.norm() + 1e-8)
        setup.optimizer.step()

    setup.pool.store(pool_index, cells_after.state, n_steps)
    return report


def load_training_frame(cfg: TrainConfig) -> tuple[DensityField, VelocityField | None]:
    if cfg.data.density_dir is None:
        raise ValueError("config has no data.density_dir")
    density = read_density(density_path(cfg.data.density_dir, cfg.data.frame_index),
                           cfg.data.frame_index)
    velocity = None
    if cfg.data.velocity_dir is not None:
        velocity = read_velocity(velocity_path(cfg.data.velocity_dir, cfg.data.frame_index),
                                 cfg.data.frame_index)
    return density, velocity


def _style_provenance(cfg: TrainConfig, style_img: torch.Tensor) -> dict:
    if cfg.data.style_image is not None:
        style_hash = sha256_file(cfg.data.style_image)
    else:
        style_hash = hashlib.sha256(style_img.numpy().tobytes()).hexdigest()
    return {"style_sha256": style_hash, "frame_index": cfg.data.frame_index}


def train(cfg: TrainConfig,
          frame: tuple[DensityField, VelocityField | None] | None = None,
          style_img: torch.Tensor | None = None,
          resume: str | Path | None = None,
          log_every: int = 0) -> Path:
    """Run the full loop; returns the final checkpoint path.

    `frame` and `style_img` may be passed directly (tests, library use);
    otherwise they are loaded from the paths in the config.
    """
    apply_env()
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if frame is None:
        frame = load_training_frame(cfg)
    if style_img is None:
        if cfg.data.style_image is None:
            raise ValueError("config has no data.style_image")
        style_img = load_image(cfg.data.style_image, cfg.data.style_size)

    setup = make_setup(cfg, frame, style_img)
    provenance = _style_provenance(cfg, style_img)
    start_epoch = 0
    if resume is not None:
        from .io import load_checkpoint

        payload = load_checkpoint(resume)
        setup.rule.load_state_dict(payload["state_dict"])
        if payload.get("optimizer_state"):
            setup.optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload.get("epoch", 0)
        if start_epoch > 0:
            setup.scheduler = _make_scheduler(setup.optimizer, cfg,
                                              last_epoch=start_epoch - 1)

    runlog = out_dir / "runlog.csv"
    mode = "a" if (resume is not None and runlog.exists()) else "w"
    with open(runlog, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(RUN_LOG_COLUMNS)
        for epoch in range(start_epoch, cfg.epochs):
            report = train_epoch(setup, frame, cfg, epoch, epoch_seed(cfg.seed, epoch))
            writer.writerow(report.row())
            setup.scheduler.step()
            if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
                print(f"[{epoch:5d}/{cfg.epochs}] total={report.total:.4f} "
                      f"app={report.l_app:.4f} motion={report.l_motion:.4f}")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                provenance["epochs_trained"] = epoch + 1
                save_checkpoint(out_dir / f"checkpoint_{epoch + 1:06d}.pt", setup.rule,
                                config=config_to_dict(cfg), provenance=provenance,
                                optimizer_state=setup.optimizer.state_dict(),
                                epoch=epoch + 1)

    provenance["epochs_trained"] = cfg.epochs
    final = save_checkpoint(out_dir / "checkpoint.pt", setup.rule,
                            config=config_to_dict(cfg), provenance=provenance,
                            optimizer_state=setup.optimizer.state_dict(),
                            epoch=cfg.epochs)

    _save_previews(setup, frame, cfg, out_dir)
    if cfg.epochs > 0:
        from .report import render_report

        render_report(runlog, out_dir)
    return final


def _save_previews(setup: TrainSetup, frame, cfg: TrainConfig, out_dir: Path) -> None:
    """Render the trained texture from every pose for a quick visual check."""
    density, velocity = frame
    priors = (setup.pos, density, velocity if cfg.encoding.velocity else None)
    with torch.no_grad():
        cells = CellGrid.zeros(density.shape, cfg.grid.channels)
        cells = rollout(cells, setup.rule, priors, cfg.steps_per_frame * 4,
                        seed=epoch_seed(cfg.seed, cfg.epochs))
        rgb, dd = readout(cells)
        for idx, pose in enumerate(setup.poses):
            view = render_color(density, rgb, dd, pose, setup.gamma)
            save_image(out_dir / f"preview_pose{idx:02d}.png",
                       tone_map(view.pixels, cfg.render.exposure))
