"""Cross-entropy policy search over a linear scoring rule.

The in-repo learner: candidate parameter vectors are drawn from a diagonal
Gaussian, scored by mean episode return over a handful of shared-seed
rollouts, and the sampling distribution is refitted to the elite set each
iteration. The policy standardizes observations internally (mirroring the
normalizing wrapper used around external agents) and is constraint-repaired.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensorio
from ..env import Env, rollout
from ..schema import ActionVector, FeatureSchema, PatientState, ScalerStats
from .base import repair_action


@dataclass(frozen=True)
class CemConfig:
    population: int = 64
    elite_fraction: float = 0.1
    iterations: int = 30
    rollouts_per_candidate: int = 4
    init_mean: float = 0.0
    init_sd: float = 1.0
    sd_floor: float = 0.01

    def __post_init__(self) -> None:
        if not (0.0 < self.elite_fraction <= 1.0):
            raise ValueError("elite_fraction must lie in (0, 1]")
        if self.population < 1:
            raise ValueError("population must be >= 1")

    @property
    def n_elite(self) -> int:
        return max(1, int(round(self.population * self.elite_fraction)))


class LinearScorePolicy:
    """Per-action linear score with threshold at zero, constraint-repaired."""

    deterministic = True

    def __init__(
        self,
        schema: FeatureSchema,
        stats: ScalerStats,
        theta: np.ndarray,
        name: str = "cem",
    ):
        self.schema = schema
        self.stats = stats
        expected = schema.n_actions * (schema.n_features + 1)
        theta = np.asarray(theta, dtype=float)
        if theta.size != expected:
            raise ValueError(f"theta must have {expected} entries")
        self.theta = theta
        self.name = name
        self._w = theta[: schema.n_actions * schema.n_features].reshape(
            schema.n_actions, schema.n_features
        )
        self._b = theta[schema.n_actions * schema.n_features :]

    def scores(self, observation: PatientState) -> np.ndarray:
        z = (observation.values - self.stats.mean) / self.stats.std
        return self._w @ z + self._b

    def act(self, observation: PatientState) -> ActionVector:
        return repair_action(self.scores(observation) > 0.0, self.schema)

    def action_score(self, observation: PatientState, action_index: int) -> float:
        """Selection probability via a logistic squash of the linear score."""
        return float(1.0 / (1.0 + np.exp(-self.scores(observation)[action_index])))

    def save(self, path: str | Path, schema_fingerprint: str = "") -> None:
        tensorio.save_tensors(
            path,
            kind="linear-policy",
            meta={"name": self.name, "schema_fingerprint": schema_fingerprint},
            tensors={"theta": self.theta},
        )


@dataclass
class CemResult:
    policy: LinearScorePolicy
    elite_mean_curve: list[float] = field(default_factory=list)
    best_score: float = -np.inf


def cem_train(
    env_factory: Callable[[], Env],
    schema: FeatureSchema,
    stats: ScalerStats,
    config: CemConfig | None = None,
    seed: int = 42,
) -> CemResult:
    """Iteratively refit a diagonal Gaussian over policy parameters to the elites.

    All candidates within an iteration share the same rollout seeds, so
    scores are comparable; the returned policy is the best-scoring
    distribution mean seen across iterations.
    """
    config = config or CemConfig()
    rng = np.random.default_rng(seed)
    dim = schema.n_actions * (schema.n_features + 1)
    mu = np.full(dim, config.init_mean, dtype=float)
    sd = np.full(dim, config.init_sd, dtype=float)
    env = env_factory()

    def score(theta: np.ndarray, seeds: np.ndarray) -> float:
        policy = LinearScorePolicy(schema, stats, theta)
        returns = [
            rollout(policy, env, seed=int(s)).cumulative_reward for s in seeds
        ]
        return float(np.mean(returns))

    result = CemResult(policy=LinearScorePolicy(schema, stats, mu))
    for it in range(config.iterations):
        seeds = rng.integers(0, 2**31 - 1, size=config.rollouts_per_candidate)
        candidates = mu[None, :] + sd[None, :] * rng.standard_normal((config.population, dim))
        scores = np.array([score(c, seeds) for c in candidates])
        elite_idx = np.argsort(scores)[::-1][: config.n_elite]
        elites = candidates[elite_idx]
        mu = elites.mean(axis=0)
        sd = np.maximum(elites.std(axis=0), config.sd_floor)
        elite_mean = float(scores[elite_idx].mean())
        result.elite_mean_curve.append(elite_mean)

        mean_score = score(mu, seeds)
        if mean_score > result.best_score:
            result.best_score = mean_score
            result.policy = LinearScorePolicy(schema, stats, mu.copy())
    return result
