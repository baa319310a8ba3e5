"""Seeded synthetic token grids.

Patterns:

``uniform-noise``
    i.i.d. uniform values in [-1, 1).
``blobs``
    ``groups`` Gaussian clusters in embedding space, each tied to a contiguous
    band of grid columns (the same band in every frame).
``stripes``
    row-parity stripes within each frame plus a temporal regime vector that
    switches ``groups`` times over the clip; frames in a regime look alike.

Values are rounded to float32 so token files round-trip exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .merge import TokenSet

PATTERNS = ("blobs", "stripes", "uniform-noise")


def gen_synthetic(T: int, H: int, W: int, embed_width: int = 32, pattern: str = "blobs",
                  seed: int = 0, groups: int = 2, noise: float = 0.3) -> TokenSet:
    if min(T, H, W, embed_width) <= 0:
        raise ParameterError(f"dimensions must be positive, got T={T} H={H} W={W} "
                             f"width={embed_width}")
    if pattern not in PATTERNS:
        raise ParameterError(f"unknown pattern {pattern!r}; choose from {PATTERNS}")
    if groups <= 0:
        raise ParameterError(f"groups must be positive, got {groups}")
    rng = np.random.default_rng(seed)
    shape = (T, H, W, embed_width)
    if pattern == "uniform-noise":
        x = rng.uniform(-1.0, 1.0, size=shape)
    elif pattern == "blobs":
        centers = rng.normal(0.0, 4.0, size=(groups, embed_width))
        band = np.arange(W) * groups // W
        x = centers[band][None, None, :, :] + rng.normal(0.0, noise, size=shape)
    else:
        regimes = rng.normal(0.0, 4.0, size=(groups, embed_width))
        stripe = rng.normal(0.0, 1.0, size=(2, embed_width))
        regime = np.arange(T) * groups // T
        x = (regimes[regime][:, None, None, :] + stripe[np.arange(H) % 2][None, :, None, :]
             + rng.normal(0.0, noise, size=shape))
    x = x.astype(np.float32).astype(np.float64)
    return TokenSet.from_grid(x.reshape(T * H * W, embed_width), (T, H, W))
