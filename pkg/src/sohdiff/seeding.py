"""Deterministic derivation of named random streams from one master seed.

Every stochastic stage of the pipeline draws from its own generator so that
reruns with the same master seed reproduce results bit-exactly regardless of
how many draws other stages consumed.  The scheme is
``SeedSequence((master_seed, PURPOSE_CODE[, index...]))``; the purpose codes
below are frozen and must never be renumbered.
"""

from __future__ import annotations

import numpy as np

# Frozen purpose codes. New purposes append at the end.
PURPOSES = {
    "init": 0,      # model parameter initialization
    "batch": 1,     # training batch assembly
    "loss": 2,      # timestep / noise / condition-dropout draws
    "sample": 3,    # ancestral sampling noise
    "data": 4,      # synthetic dataset generation and splitting
    "synth": 5,     # condition perturbation during synthesis
    "forest": 6,    # random-forest bootstrap
    "eval": 7,      # per-cell evaluation sampling
}


def stream(master_seed: int, purpose: str, *index: int) -> np.random.Generator:
    """Return the named random stream for ``master_seed``.

    ``index`` distinguishes repeated uses of one purpose (per-cell, per-tree,
    per-seed loops).
    """
    code = PURPOSES[purpose]
    return np.random.default_rng(np.random.SeedSequence((master_seed, code, *index)))


def torch_seed(master_seed: int, purpose: str, *index: int) -> int:
    """A 63-bit integer seed for torch generators, derived like `stream`."""
    return int(stream(master_seed, purpose, *index).integers(2**63))
