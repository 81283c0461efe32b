"""Monte Carlo permutation estimator of per-feature action attributions."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..schema import PatientState, RAW


def _default_score(policy, action_index: int) -> Callable[[np.ndarray], float]:
    """Scalar score hook: the policy's own probability if exposed, else an indicator."""
    if hasattr(policy, "action_score"):
        return lambda values: float(
            policy.action_score(PatientState(values, space=RAW), action_index)
        )
    return lambda values: float(
        policy.act(PatientState(values, space=RAW)).bits[action_index]
    )


def shapley_attribution(
    policy,
    states: Sequence[PatientState] | np.ndarray,
    action_index: int,
    n_samples: int = 200,
    seed: int = 42,
    baseline: np.ndarray | None = None,
    score_fn: Callable[[np.ndarray], float] | None = None,
) -> np.ndarray:
    """Average per-feature contribution to the action score over *states*.

    For each sampled feature ordering, features flip one by one from the
    baseline (cohort mean by default) to the explained state; the marginal
    score changes accumulate per feature. Within every ordering the
    contributions telescope to score(state) - score(baseline) exactly.
    """
    if isinstance(states, np.ndarray):
        matrix = np.atleast_2d(np.asarray(states, dtype=float))
    else:
        matrix = np.stack([s.values for s in states])
    if baseline is None:
        baseline = matrix.mean(axis=0)
    baseline = np.asarray(baseline, dtype=float)
    score = score_fn or _default_score(policy, action_index)

    rng = np.random.default_rng(seed)
    d = matrix.shape[1]
    total = np.zeros(d)
    for x in matrix:
        attrib = np.zeros(d)
        for _ in range(n_samples):
            order = rng.permutation(d)
            current = baseline.copy()
            prev = score(current)
            for j in order:
                current[j] = x[j]
                nxt = score(current)
                attrib[j] += nxt - prev
                prev = nxt
        total += attrib / n_samples
    return total / matrix.shape[0]
