"""Seeded stream derivation shared by all randomized operations.

Every random draw in the library comes from a Philox counter-based
generator keyed by a (seed, *tags) tuple, so a stream depends only on
its key, never on call order or thread count. Philox output is
platform-stable, which is what makes rerun outputs byte-identical.
"""

from __future__ import annotations

import numpy as np

# Tags namespace the streams so e.g. (seed=3, image=5) for noise can never
# collide with (seed=3, step=5) for partition shuffling.
TAG_NOISE = 0x4E4F4953  # "NOIS"
TAG_PHANTOM = 0x5048414E  # "PHAN"
TAG_INIT = 0x494E4954  # "INIT"
TAG_SHUFFLE = 0x53485546  # "SHUF"
TAG_BATCH = 0x42415443  # "BATC"
TAG_PATCH = 0x50415443  # "PATC"
TAG_SUBSAMPLE = 0x53554253  # "SUBS"


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Return an independent generator keyed by (seed, *tags)."""
    ss = np.random.SeedSequence((int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(t) & 0xFFFFFFFFFFFFFFFF for t in tags]))
    return np.random.Generator(np.random.Philox(ss))
