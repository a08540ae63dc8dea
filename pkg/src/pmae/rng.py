"""Named random streams derived from one global seed.

Every consumer gets its own generator keyed by integers, so switching an
ablation on or off never shifts the randomness seen elsewhere.
"""

import numpy as np

SHUFFLE = 1
TRAIN_MASK = 2
RESTORE_PICK = 3
RESTORE_MASK = 4
PROMPT_INIT = 5
TASK_SPLIT = 6
PARTITION = 7
SERVER_SHUFFLE = 8
PRETRAIN = 9


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
