"""Named deterministic random streams derived from one master seed.

Every consumer of randomness pulls from its own stream so that enabling or
disabling one feature (say, diagnostics) can never perturb the draws seen
by another (say, the reparameterization noise). Streams may be keyed
further, e.g. per epoch, so a run can be reproduced from any epoch boundary.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 0,
    "data_order": 1,
    "eps": 2,
    "gumbel": 3,
    "diag": 4,
    "fvm": 5,
    "dataset": 6,
    "diagnose": 7,
}


def stream_rng(master_seed: int, name: str, *key: int) -> np.random.Generator:
    """Generator for stream `name` under `master_seed`, refined by `key`."""
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    master_seed = int(master_seed)
    if master_seed < 0:
        raise ValueError(f"master seed must be non-negative, got {master_seed}")
    entropy = [master_seed, STREAMS[name], *(int(k) for k in key)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
