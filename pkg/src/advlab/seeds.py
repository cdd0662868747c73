"""Deterministic RNG derivation: one master seed, named sub-streams.

Every consumer of randomness derives its generator here, so ablations can
share initialization and data order while differing only in regime. Streams
are independent by SeedSequence spawning; extra integer indices (epoch, step)
give per-use generators that do not depend on call order.
"""

import numpy as np

_STREAMS = {"init": 0, "shuffle": 1, "attack": 2, "data": 3, "subset": 4}


def stream_seed(master, name, *indices):
    if name not in _STREAMS:
        raise ValueError(f"unknown rng stream {name!r}")
    seq = np.random.SeedSequence([int(master), _STREAMS[name], *map(int, indices)])
    return int(seq.generate_state(1)[0])


def stream_rng(master, name, *indices):
    return np.random.default_rng(stream_seed(master, name, *indices))
