"""
Counter-based random substreams.

Every random draw in the simulators comes from a Philox generator keyed by
(seed, purpose, index). Two substreams with different purposes or indices are
statistically independent, and changing one simulator parameter never shifts
the draws of an unrelated purpose.
"""
from enum import IntEnum
from typing import Tuple

import numpy as np


class Purpose(IntEnum):
    """Stable identifiers of random substreams. Values must never be reused."""
    COEFF_COVARIATE = 1
    COEFF_TREATMENT = 2
    COEFF_OUTCOME = 3
    COEFF_OUTCOME_RISK = 4
    MIXTURE_MEANS = 5
    COVARIATE_NOISE = 10
    TREATMENT_NOISE = 11
    ADJUSTMENT = 12
    OUTCOME_NOISE = 13
    PATIENT_PARAMS = 20
    PATIENT_TRAJECTORY = 21
    SPLIT = 30
    BATCH = 31


def substream(seed: int, purpose: Purpose, *index: int) -> np.random.Generator:
    """
    Build an independent generator for (seed, purpose, index...).

    Args:
        seed: Experiment seed
        purpose: What the draws are used for
        *index: Further keys such as a unit id or an epoch

    Returns:
        numpy Generator backed by Philox
    """
    key: Tuple[int, ...] = (int(purpose),) + tuple(int(i) for i in index)
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(sequence))
