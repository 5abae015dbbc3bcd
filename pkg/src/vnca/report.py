"""Loss-curve figures rendered from a training run log."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def read_runlog(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a runlog.csv into column arrays."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: run log has no data rows")
    out: dict[str, np.ndarray] = {}
    for col in rows[0]:
        values = [row[col] for row in rows]
        try:
            out[col] = np.array([float(v) for v in values])
        except ValueError:
            out[col] = np.array(values)
    return out


def _smooth(values: np.ndarray, window: int = 25) -> np.ndarray:
    if len(values) < 2 * window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def render_report(runlog: str | Path, out_dir: str | Path) -> list[Path]:
    """Write loss-curve figures next to the run log; returns the file paths."""
    data = read_runlog(runlog)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = data["epoch"]

    fig, axes = plt.subplots(3, 1, figsize=(8, 10), sharex=True)
    panels = [
        ("total", [("total", "tab:red")]),
        ("appearance", [("l_style", "tab:blue"), ("l_moment", "tab:cyan"),
                        ("l_app", "tab:purple")]),
        ("motion", [("l_dir", "tab:green"), ("l_mag", "tab:olive"),
                    ("l_motion", "tab:orange")]),
    ]
    for ax, (title, series) in zip(axes, panels):
        for name, color in series:
            values = data[name]
            ax.plot(epochs, values, color=color, alpha=0.25)
            smoothed = _smooth(values)
            offset = len(values) - len(smoothed)
            ax.plot(epochs[offset:], smoothed, color=color, label=name)
        ax.set_ylabel(title)
        ax.legend(loc="upper right", fontsize=8)
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("epoch")
    fig.tight_layout()

    out_path = out_dir / "loss_curves.png"
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return [out_path]
