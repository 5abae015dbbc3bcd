"""Frozen external networks behind small adapter interfaces.

Two adapters feed the losses: a convolutional feature extractor whose
activations drive appearance supervision, and an optical-flow estimator
that measures perceived motion between two renders. Both keep their own
weights frozen while letting gradients flow to their inputs.

`RandomConvFeatures` (deterministic seeded weights) and `LucasKanadeFlow`
(closed-form brightness constancy) work without any downloaded weights
and are the defaults; a VGG16 extractor and TorchScript flow modules can
be plugged in through the config when weight files are available.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

VGG16_WIDTHS = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
                512, 512, 512, "M", 512, 512, 512)
# Post-activation output of the first convolution in each of the 5 stages.
VGG16_TAPS = (1, 6, 11, 18, 25)

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def _as_batched_rgb(image: torch.Tensor) -> torch.Tensor:
    """(H, W), (H, W, 1) or (H, W, 3) image -> (1, 3, H, W)."""
    if image.ndim == 2:
        image = image.unsqueeze(-1)
    if image.ndim != 3 or image.shape[-1] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {tuple(image.shape)}")
    if image.shape[-1] == 1:
        image = image.expand(*image.shape[:2], 3)
    return image.permute(2, 0, 1).unsqueeze(0)


class FeatureExtractor(nn.Module):
    """Frozen conv trunk reporting activations at a fixed list of layers."""

    def __init__(self, trunk: nn.Sequential, taps: tuple[int, ...],
                 input_size: int, mean: tuple[float, ...], std: tuple[float, ...]):
        super().__init__()
        self.trunk = trunk
        self.taps = taps
        self.input_size = input_size
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def n_layers(self) -> int:
        return len(self.taps)

    def preprocess(self, image: torch.Tensor) -> torch.Tensor:
        """Resize to the extractor's input size and normalize channels."""
        x = _as_batched_rgb(image)
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size),
                              mode="bilinear", align_corners=False)
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def extract(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Feature maps (C', h, w) at each tap for one (H, W, 1|3) image."""
        x = self.preprocess(image)
        feats = []
        for idx, layer in enumerate(self.trunk):
            x = layer(x)
            if idx in self.taps:
                feats.append(x.squeeze(0))
        return feats


class RandomConvFeatures(FeatureExtractor):
    """Five-stage conv pyramid with fixed seeded random weights.

    Random oriented filters are weight-free stand-ins for a pretrained
    trunk: they stay frozen, respond to color and orientation statistics,
    and make the appearance loss usable without any downloads.
    """

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (16, 32, 48, 64, 64),
                 input_size: int = 128):
        gen = torch.Generator().manual_seed(int(seed))
        layers: list[nn.Module] = []
        taps = []
        in_ch = 3
        for stage, out_ch in enumerate(widths):
            conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
            with torch.no_grad():
                nn.init.kaiming_normal_(conv.weight.data, generator=gen)
                conv.bias.data.zero_()
            layers.append(conv)
            layers.append(nn.ReLU())
            taps.append(len(layers) - 1)
            if stage < len(widths) - 1:
                layers.append(nn.AvgPool2d(2))
            in_ch = out_ch
        super().__init__(nn.Sequential(*layers), tuple(taps), input_size,
                         mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))


class VggFeatures(FeatureExtractor):
    """VGG16 conv trunk tapped after the first ReLU of each stage.

    Weights load from a state-dict file in the torchvision layout; with
    `weights="download"` the torchvision pretrained weights are fetched.
    Without weights the filters stay at their random initialization.
    """

    def __init__(self, weights: str | None = None, input_size: int = 256):
        trunk = self._build_trunk()
        if weights == "download":
            import torchvision

            tv = torchvision.models.vgg16(weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1)
            trunk.load_state_dict(tv.features.state_dict())
        elif weights is not None:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            if any(key.startswith("features.") for key in state):
                state = {k[len("features."):]: v for k, v in state.items()
                         if k.startswith("features.")}
            trunk.load_state_dict(state)
        super().__init__(trunk, VGG16_TAPS, input_size,
                         mean=_IMAGENET_MEAN, std=_IMAGENET_STD)

    @staticmethod
    def _build_trunk() -> nn.Sequential:
        layers: list[nn.Module] = []
        in_ch = 3
        for item in VGG16_WIDTHS:
            if item == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers.append(nn.Conv2d(in_ch, item, 3, padding=1))
                layers.append(nn.ReLU())
                in_ch = item
        return nn.Sequential(*layers)


class LucasKanadeFlow(nn.Module):
    """Differentiable single-level Lucas-Kanade optical flow.

    Solves the windowed brightness-constancy system in closed form per
    pixel, which keeps the estimate differentiable with respect to both
    input images. Flow is the forward displacement from the first image
    to the second, channel order (di, dj) in pixels.
    """

    def __init__(self, window: int = 7, sigma: float = 1.5, eps: float = 1e-4):
        super().__init__()
        self.eps = eps
        half = window // 2
        coords = torch.arange(window, dtype=torch.float32) - half
        g = torch.exp(-coords**2 / (2 * sigma**2))
        kernel = torch.outer(g, g)
        self.register_buffer("window", (kernel / kernel.sum()).view(1, 1, window, window))
        self.pad = half

    @staticmethod
    def _luminance(image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 2:
            return image.unsqueeze(0).unsqueeze(0)
        if image.ndim != 3 or image.shape[-1] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) image, got shape {tuple(image.shape)}")
        if image.shape[-1] == 3:
            weights = torch.tensor([0.299, 0.587, 0.114],
                                   dtype=image.dtype, device=image.device)
            image = (image * weights).sum(-1, keepdim=True)
        return image.permute(2, 0, 1).unsqueeze(0)

    def _window_sum(self, x: torch.Tensor) -> torch.Tensor:
        kernel = self.window.to(x.dtype)
        return F.conv2d(F.pad(x, [self.pad] * 4, mode="replicate"), kernel)

    def forward(self, image_a: torch.Tensor, image_b: torch.Tensor) -> torch.Tensor:
        a = self._luminance(image_a)
        b = self._luminance(image_b)
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {tuple(image_a.shape)} vs {tuple(image_b.shape)}")
        mean = 0.5 * (a + b)
        # Central differences along image rows (i) and columns (j).
        pad_i = F.pad(mean, (0, 0, 1, 1), mode="replicate")
        pad_j = F.pad(mean, (1, 1, 0, 0), mode="replicate")
        gi = 0.5 * (pad_i[:, :, 2:, :] - pad_i[:, :, :-2, :])
        gj = 0.5 * (pad_j[:, :, :, 2:] - pad_j[:, :, :, :-2])
        gt = b - a

        a11 = self._window_sum(gi * gi) + self.eps
        a12 = self._window_sum(gi * gj)
        a22 = self._window_sum(gj * gj) + self.eps
        b1 = self._window_sum(gi * gt)
        b2 = self._window_sum(gj * gt)

        det = a11 * a22 - a12 * a12
        di = -(a22 * b1 - a12 * b2) / det
        dj = -(a11 * b2 - a12 * b1) / det
        return torch.cat([di, dj], dim=1).squeeze(0).permute(1, 2, 0)


def load_feature_extractor(spec: dict | None) -> FeatureExtractor:
    """Build a feature extractor from a config mapping."""
    spec = dict(spec or {})
    kind = spec.pop("kind", "random")
    if kind == "random":
        return RandomConvFeatures(**spec)
    if kind == "vgg16":
        return VggFeatures(**spec)
    raise ValueError(f"unknown feature extractor kind {kind!r}")


def load_flow_estimator(spec: dict | None) -> nn.Module:
    """Build an optical-flow estimator from a config mapping."""
    spec = dict(spec or {})
    kind = spec.pop("kind", "lucas_kanade")
    if kind == "lucas_kanade":
        return LucasKanadeFlow(**spec)
    if kind == "torchscript":
        path = spec.pop("path", None)
        if path is None:
            raise ValueError("torchscript flow estimator requires a 'path'")
        module = torch.jit.load(path, map_location="cpu")
        module.eval()
        return module
    raise ValueError(f"unknown flow estimator kind {kind!r}")
