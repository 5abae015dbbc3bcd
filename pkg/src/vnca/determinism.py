"""Deterministic-execution switch.

All stochastic operations in the package take explicit seeds; the env var
``VNCA_DETERMINISTIC=1`` additionally pins torch to deterministic kernels
and a single thread so repeated runs are byte-identical.
"""

from __future__ import annotations

import os

import torch

ENV_FLAG = "VNCA_DETERMINISTIC"


def deterministic_requested() -> bool:
    return os.environ.get(ENV_FLAG, "") == "1"


def enable_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def apply_env() -> bool:
    """Enable deterministic execution if the env var asks for it."""
    if deterministic_requested():
        enable_determinism()
        return True
    return False
