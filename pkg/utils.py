"""
Small helpers shared by the commands: per-step random generators, the
learning-rate schedule, batch sampling and count aggregation.
"""

import logging
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """
    Generator for one training step. Derived from (seed, stream, step) only, so a
    resumed run draws exactly what an uninterrupted run would at the same step.
    """
    return np.random.default_rng([int(seed), int(stream), int(step)])


def warmup_lr(step: int, total_steps: int, base_lr: float, warmup_proportion: float) -> float:
    """Linear warm-up over the first ``warmup_proportion`` of steps, then constant. ``step`` counts from 0."""
    warmup = int(round(total_steps * warmup_proportion))
    if warmup <= 0 or step >= warmup:
        return base_lr
    return base_lr * (step + 1) / warmup


def sample_batch(rng: np.random.Generator, n_items: int, batch_size: int) -> List[int]:
    """Indices for one batch; without replacement when the pool is large enough."""
    if n_items <= 0:
        return []
    if batch_size <= n_items:
        return [int(i) for i in rng.choice(n_items, size=batch_size, replace=False)]
    return [int(i) for i in rng.integers(0, n_items, size=batch_size)]


def merge_counts(dicts: Sequence[Optional[Dict[str, int]]]) -> Dict[str, int]:
    """Sum count dictionaries key by key; None entries are skipped."""
    total: Counter = Counter()
    for d in dicts:
        total.update(d or {})
    return dict(total)


def mean_spread(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation; (nan, nan) for no values."""
    if not len(values):
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def token_accuracy(predicted: Sequence[int], gold: Sequence[int]) -> Tuple[int, int]:
    """(correct, total) over aligned tag sequences."""
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predicted tags vs {len(gold)} gold tags")
    return int(sum(1 for p, g in zip(predicted, gold) if p == g)), len(gold)
