"""Appearance and motion supervision.

Appearance compares sets of deep features between rendered and exemplar
images: a relaxed transport distance (mean nearest-neighbor cosine
distance, symmetrized by the max of both directions) plus first- and
second-moment matching, summed over the extractor's layers for both the
color and grayscale image pairs.

Motion compares the optical flow perceived between two renders against
the projected velocity field of the input smoke, prioritizing direction
alignment and gating the magnitude term on poor alignment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch

from .adapters import FeatureExtractor

log = logging.getLogger(__name__)

_TINY = 1e-30


@dataclass
class FeatureSet:
    """Feature vectors of one layer, flattened over spatial positions (N, C')."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"feature set must be (N, C'), got shape {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("feature set contains non-finite values")

    @classmethod
    def from_feature_map(cls, fmap: torch.Tensor) -> "FeatureSet":
        """(C', h, w) feature map -> (h*w, C') set."""
        if fmap.ndim != 3:
            raise ValueError(f"feature map must be (C', h, w), got shape {tuple(fmap.shape)}")
        return cls(fmap.reshape(fmap.shape[0], -1).T)


def _set_data(features) -> torch.Tensor:
    return features.data if isinstance(features, FeatureSet) else features


def luminance(image: torch.Tensor) -> torch.Tensor:
    """Rec. 601 luma of an (H, W, 3) image, shape (H, W, 1)."""
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {tuple(image.shape)}")
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=image.dtype, device=image.device)
    return (image * weights).sum(-1, keepdim=True)


def cosine_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """1 - cos(x, y) along the last axis; zero-norm vectors count as orthogonal."""
    dot = (x * y).sum(-1)
    nx = torch.linalg.vector_norm(x, dim=-1)
    ny = torch.linalg.vector_norm(y, dim=-1)
    ok = (nx > 0) & (ny > 0)
    cos = torch.where(ok, dot / (nx * ny).clamp_min(_TINY), torch.zeros_like(dot))
    n_zero = int((~ok).sum())
    if n_zero:
        log.debug("cosine_distance: %d zero-norm pairs treated as orthogonal", n_zero)
    return 1.0 - cos


def style_distance(a, b) -> torch.Tensor:
    """Relaxed transport cost: mean over rows of a of the nearest row of b."""
    x = _set_data(a)
    y = _set_data(b)
    if x.numel() == 0 or y.numel() == 0:
        raise ValueError("style_distance requires non-empty feature sets")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature widths differ: {x.shape[1]} vs {y.shape[1]}")
    xn = x / torch.linalg.vector_norm(x, dim=1, keepdim=True).clamp_min(_TINY)
    yn = y / torch.linalg.vector_norm(y, dim=1, keepdim=True).clamp_min(_TINY)
    dist = 1.0 - xn @ yn.T
    return dist.min(dim=1).values.mean()


def bidirectional_style(a, b) -> torch.Tensor:
    """Symmetric transport distance: max of both one-sided costs."""
    return torch.maximum(style_distance(a, b), style_distance(b, a))


def moment_distance(a, b) -> torch.Tensor:
    """L1 gap between feature means (per channel) and covariances (per pair)."""
    x = _set_data(a)
    y = _set_data(b)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("moment_distance requires at least 2 rows per set")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature widths differ: {x.shape[1]} vs {y.shape[1]}")
    c = x.shape[1]
    mu_x = x.mean(dim=0)
    mu_y = y.mean(dim=0)
    xc = x - mu_x
    yc = y - mu_y
    cov_x = xc.T @ xc / x.shape[0]
    cov_y = yc.T @ yc / y.shape[0]
    return (mu_x - mu_y).abs().sum() / c + (cov_x - cov_y).abs().sum() / c**2


@dataclass
class StyleFeatures:
    """Precomputed exemplar features so training extracts them only once."""

    color: list[torch.Tensor]
    gray: list[torch.Tensor]


def precompute_style_features(style_img: torch.Tensor,
                              extractor: FeatureExtractor) -> StyleFeatures:
    with torch.no_grad():
        color = extractor.extract(style_img)
        gray = extractor.extract(luminance(style_img))
    return StyleFeatures(color=color, gray=gray)


@dataclass
class AppearanceLoss:
    l_style: torch.Tensor
    l_moment: torch.Tensor
    l_app: torch.Tensor
    per_layer: dict = field(default_factory=dict)


def _subsample(a: torch.Tensor, b: torch.Tensor, max_positions: int,
               gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Cap both sets at max_positions rows; equal-sized sets share indices."""
    if max_positions <= 0 or (a.shape[0] <= max_positions and b.shape[0] <= max_positions):
        return a, b
    idx_a = torch.randperm(a.shape[0], generator=gen)[:max_positions]
    idx_b = idx_a if b.shape[0] == a.shape[0] else \
        torch.randperm(b.shape[0], generator=gen)[:max_positions]
    return a[idx_a.to(a.device)], b[idx_b.to(b.device)]


def appearance_loss(render_color_img: torch.Tensor,
                    render_gray_img: torch.Tensor,
                    style_img: torch.Tensor,
                    extractor: FeatureExtractor,
                    max_positions: int = 1024,
                    seed: int = 0,
                    style_features: StyleFeatures | None = None) -> AppearanceLoss:
    """Transport + moment distances between render and exemplar features.

    Style-image features may be passed precomputed. Feature sets larger
    than max_positions are subsampled with a seeded generator to keep the
    transport distance tractable.
    """
    if style_features is None:
        style_features = precompute_style_features(style_img, extractor)
    feats_color = extractor.extract(render_color_img)
    feats_gray = extractor.extract(render_gray_img)

    gen = torch.Generator().manual_seed(int(seed))
    zero = render_color_img.new_zeros(())
    l_style, l_moment = zero, zero
    per_layer = {}
    pairs = zip(feats_color, feats_gray, style_features.color, style_features.gray)
    for layer, (f_c, f_g, s_c, s_g) in enumerate(pairs):
        terms = {}
        for name, render_map, style_map in (("color", f_c, s_c), ("gray", f_g, s_g)):
            a = FeatureSet.from_feature_map(render_map).data
            b = FeatureSet.from_feature_map(style_map).data
            a, b = _subsample(a, b, max_positions, gen)
            terms[name] = (bidirectional_style(a, b), moment_distance(a, b))
        layer_style = terms["color"][0] + terms["gray"][0]
        layer_moment = terms["color"][1] + terms["gray"][1]
        l_style = l_style + layer_style
        l_moment = l_moment + layer_moment
        per_layer[layer] = {"style": float(layer_style.detach()),
                            "moment": float(layer_moment.detach())}
    return AppearanceLoss(l_style, l_moment, l_style + l_moment, per_layer)


@dataclass
class MotionTerms:
    l_dir: torch.Tensor
    l_mag: torch.Tensor
    l_motion: torch.Tensor
    zero_flow_fraction: float = 0.0


def motion_loss(flow_pred: torch.Tensor, flow_target: torch.Tensor,
                n_steps: int, steps_per_frame: int,
                lam_dir: float = 1.0, lam_mag: float = 1.0,
                invert_gate: bool = False) -> MotionTerms:
    """Direction + gated magnitude alignment of predicted vs target flow.

    The predicted flow spans n_steps updates and is rescaled by
    steps_per_frame / n_steps to the per-frame magnitude of the target.
    """
    if n_steps < 1 or steps_per_frame < 1:
        raise ValueError(f"step counts must be >= 1, got n={n_steps}, N={steps_per_frame}")
    if flow_pred.shape != flow_target.shape or flow_pred.shape[-1] != 2:
        raise ValueError(
            f"flow shapes must match and end in 2, got {tuple(flow_pred.shape)} "
            f"vs {tuple(flow_target.shape)}")

    dmap = cosine_distance(flow_pred, flow_target)
    l_dir = dmap.mean()
    norm_pred = torch.linalg.vector_norm(flow_pred, dim=-1)
    norm_target = torch.linalg.vector_norm(flow_target, dim=-1)
    l_mag = ((steps_per_frame / n_steps) * norm_pred - norm_target).abs().mean()

    if invert_gate:
        gate = torch.clamp_min(1.0 - l_dir, 0.0)
    else:
        gate = torch.clamp_min(l_dir - 1.0, 0.0)
    l_motion = gate * lam_mag * l_mag + lam_dir * l_dir

    zero_frac = float(((norm_pred == 0) | (norm_target == 0)).float().mean())
    return MotionTerms(l_dir, l_mag, l_motion, zero_frac)
