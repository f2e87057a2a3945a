"""Counter-based seeded substreams.

Every random draw in the pipeline comes from ``substream(seed, *key)``: a
Philox generator whose key is derived from the run seed and an integer path
such as ``(PERTURB, pair, frame, stage)``. Substreams with different keys are
statistically independent and can be created in any order or in parallel.
"""

from __future__ import annotations

import numpy as np

# purpose tags; first element of every key path
SYNTH = 1
RESAMPLE = 2
PERTURB = 3
INIT = 4
SHUFFLE = 5
EVAL = 6

PAIR_IDS = {"rgb": 0, "ev": 1}


def substream(seed: int, *key: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
