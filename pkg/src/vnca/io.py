"""File formats: VNV1 volumes, checkpoints, PNG images, sequence directories.

VNV1 layout: magic bytes ``VNV1``, four little-endian u32 (H, W, D, C),
then H*W*D*C little-endian float32 values with c fastest, then k, j, i.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .grid import DensityField, VelocityField

VNV_MAGIC = b"VNV1"
CHECKPOINT_FORMAT = "vnca-checkpoint-v1"


def write_vnv(path: str | Path, volume: torch.Tensor | np.ndarray) -> Path:
    """Write an (H, W, D) or (H, W, D, C) volume as a VNV1 file."""
    arr = volume.detach().cpu().numpy() if isinstance(volume, torch.Tensor) else np.asarray(volume)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(f"volume must be 3- or 4-dimensional, got shape {arr.shape}")
    path = Path(path)
    h, w, d, c = arr.shape
    with open(path, "wb") as f:
        f.write(VNV_MAGIC)
        f.write(struct.pack("<4I", h, w, d, c))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_vnv(path: str | Path) -> torch.Tensor:
    """Read a VNV1 file into an (H, W, D, C) float32 tensor."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != VNV_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {VNV_MAGIC!r}")
        header = f.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated header")
        h, w, d, c = struct.unpack("<4I", header)
        payload = f.read()
    expected = h * w * d * c * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, d, c)
    return torch.from_numpy(arr.copy())


def read_density(path: str | Path, frame_index: int = 0) -> DensityField:
    vol = read_vnv(path)
    if vol.shape[-1] != 1:
        raise ValueError(f"{path}: density volume must have C=1, got C={vol.shape[-1]}")
    return DensityField(vol[..., 0], frame_index)


def read_velocity(path: str | Path, frame_index: int = 0) -> VelocityField:
    vol = read_vnv(path)
    if vol.shape[-1] != 3:
        raise ValueError(f"{path}: velocity volume must have C=3, got C={vol.shape[-1]}")
    return VelocityField(vol, frame_index)


def density_path(directory: str | Path, index: int) -> Path:
    return Path(directory) / f"density_{index:04d}.vnv"


def velocity_path(directory: str | Path, index: int) -> Path:
    return Path(directory) / f"velocity_{index:04d}.vnv"


def save_image(path: str | Path, image: torch.Tensor) -> Path:
    """Save an (H, W, 1|3) image in [0, 1] as PNG, rotated so +j points up."""
    arr = image.detach().cpu().numpy()
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    arr = np.clip(arr, 0.0, 1.0)
    arr = np.rot90(arr, k=1)  # image axes are (i, j); put the j axis upward
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    path = Path(path)
    Image.fromarray(data).save(path)
    return path


def load_image(path: str | Path, size: int | None = None) -> torch.Tensor:
    """Load a PNG/JPEG as an (H, W, 3) float tensor in [0, 1]."""
    img = Image.open(path).convert("RGB")
    if size is not None:
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(path: str | Path, rule, config: dict | None = None,
                    provenance: dict | None = None,
                    optimizer_state: dict | None = None,
                    epoch: int = 0) -> Path:
    """Atomically write a self-describing checkpoint (write-temp-then-rename)."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "rule_meta": rule.meta(),
        "state_dict": {k: v.detach().cpu() for k, v in rule.state_dict().items()},
        "config": config or {},
        "provenance": provenance or {},
        "optimizer_state": optimizer_state,
        "epoch": epoch,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return payload


def rule_from_checkpoint(payload: dict):
    from .update import UpdateRule

    rule = UpdateRule.from_meta(payload["rule_meta"])
    rule.load_state_dict(payload["state_dict"])
    return rule
