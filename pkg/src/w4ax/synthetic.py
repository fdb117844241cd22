"""Seeded synthetic activations with planted outlier channels."""

from __future__ import annotations

import numpy as np


def planted_channels(C: int, outliers: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed + 7919)
    return np.sort(rng.choice(C, size=outliers, replace=False))


def synthetic_activations(
    rows: int, C: int, outliers: int = 0, gain: float = 50.0, seed: int = 0
) -> np.ndarray:
    """Standard-normal (rows, C) activations; ``outliers`` channels scaled by ``gain``."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, C))
    if outliers:
        x[:, planted_channels(C, outliers, seed)] *= gain
    return x


def llama_like_activations(rows: int = 256, C: int = 4096, frac: float = 0.01, seed: int = 0) -> np.ndarray:
    """Heavy-ish tailed activations with ``frac`` of channels 20-100x larger."""
    rng = np.random.default_rng(seed)
    x = rng.standard_t(df=8, size=(rows, C)) * rng.uniform(0.5, 1.5, size=C)
    n_out = max(1, int(round(frac * C)))
    chans = rng.choice(C, size=n_out, replace=False)
    x[:, chans] *= rng.uniform(20, 100, size=n_out)
    return x
