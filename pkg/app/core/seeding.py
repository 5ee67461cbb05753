from enum import IntEnum

import numpy as np
import torch


class Stream(IntEnum):
    """Stable ids of the per-purpose random streams; never renumber"""

    INIT = 1
    DISTORTION = 2
    SAMPLING = 3
    DROPOUT = 4
    SPLIT = 5
    HOLDOUT = 6
    INFONCE = 7


def stream_generator(root_seed: int, stream: Stream, counter: int = 0) -> np.random.Generator:
    """Philox generator keyed by (root seed, stream, counter).

    Each purpose draws from its own key, so switching a feature on or off
    never shifts the numbers another purpose sees.
    """
    sequence = np.random.SeedSequence(int(root_seed), spawn_key=(int(stream), int(counter)))
    return np.random.Generator(np.random.Philox(sequence))


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return generator


def derive_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**32 - 1))
