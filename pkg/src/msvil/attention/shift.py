from __future__ import annotations

import numpy as np

DEFAULT_SWITCH = 0.75


def sample_shift_mode(rng: np.random.Generator, step: int, total_steps: int,
                      switch_fraction: float = DEFAULT_SWITCH) -> int:
    """Random single-neighbour mode (1..8) early in training, full 8-neighbour mode 0 afterwards."""
    if not 0.0 <= switch_fraction <= 1.0:
        raise ValueError("switch_fraction must lie in [0, 1]")
    if step < switch_fraction * total_steps:
        return int(rng.integers(1, 9))
    return 0
