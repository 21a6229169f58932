# seeding.py
#
# Per-purpose random streams. Every stochastic step (environment
# construction, offline sampling, demo sampling, training, Monte Carlo
# trials) draws from its own stream derived from the master seed and a
# purpose tag, so adding a sweep axis or a replication never shifts the
# numbers any other step sees.
#
#----------------------------------------------------------------------

import hashlib

import numpy as np
import torch

SEED_BITS = 63


def derive_seed(master, *tags):
    """Hash (master, tag, tag, ...) into a non-negative 63-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "big") >> (64 - SEED_BITS)


def numpy_rng(master, *tags):
    return np.random.default_rng(derive_seed(master, *tags))


def torch_generator(master, *tags):
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master, *tags))
    return gen
