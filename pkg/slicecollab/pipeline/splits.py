"""Train/test splits and annotated-slice positions."""

import logging
from typing import List, NamedTuple, Sequence

import numpy as np

from slicecollab.pipeline.config import SplitStrategy

logger = logging.getLogger(__name__)

NUM_FOLDS = 5
TEST_FRACTION = 0.2


class Fold(NamedTuple):
    index: int
    train: List[str]
    test: List[str]


def split_dataset(cases: Sequence[str], strategy, seed: int) -> List[Fold]:
    """
    Partition case ids into train/test folds by a seeded shuffle.

    Args:
        cases: Case identifiers
        strategy: ``five_fold`` or ``fixed_80_20``
        seed: Shuffle seed

    Returns:
        Folds; within a fold both lists are sorted

    Raises:
        ValueError: If there are too few cases for the strategy
    """
    strategy = SplitStrategy(strategy)
    cases = sorted(cases)
    if len(set(cases)) != len(cases):
        raise ValueError("case ids must be unique")
    order = [cases[i] for i in np.random.default_rng(seed).permutation(len(cases))]

    if strategy is SplitStrategy.FIVE_FOLD:
        if len(cases) < NUM_FOLDS:
            raise ValueError(
                f"five_fold needs at least {NUM_FOLDS} cases, got {len(cases)}"
            )
        chunks = np.array_split(np.arange(len(order)), NUM_FOLDS)
        folds = []
        for index, chunk in enumerate(chunks):
            test = {order[i] for i in chunk}
            folds.append(Fold(index, sorted(set(cases) - test), sorted(test)))
        return folds

    if len(cases) < 2:
        raise ValueError(f"fixed_80_20 needs at least 2 cases, got {len(cases)}")
    n_test = min(len(cases) - 1, max(1, int(round(TEST_FRACTION * len(cases)))))
    return [Fold(0, sorted(order[n_test:]), sorted(order[:n_test]))]


def annotated_slice_indices(num_slices: int, k: int) -> List[int]:
    """
    ``k`` evenly spaced annotated slices that always include the central one.

    Slices step outward from the center by ``max(1, N // (k + 1))``,
    alternating above and below; positions beyond the volume are replaced by
    the nearest unused slices.

    Raises:
        ValueError: Unless ``1 <= k <= num_slices``
    """
    if not 1 <= k <= num_slices:
        raise ValueError(f"k must lie in [1, {num_slices}], got {k}")
    center = num_slices // 2
    step = max(1, num_slices // (k + 1))
    chosen = [center]
    offset = 1
    while len(chosen) < k and offset * step < num_slices:
        for candidate in (center + offset * step, center - offset * step):
            if len(chosen) < k and 0 <= candidate < num_slices:
                chosen.append(candidate)
        offset += 1
    if len(chosen) < k:
        by_distance = sorted(range(num_slices), key=lambda n: (abs(n - center), n))
        for n in by_distance:
            if len(chosen) == k:
                break
            if n not in chosen:
                chosen.append(n)
    return sorted(chosen)
