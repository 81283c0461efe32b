"""Episode state machine: constrained actions, forecasted transitions, rewards.

An episode starts from a sampled (or supplied) patient state and advances in
fixed six-month strides. Each step runs a fixed gate sequence: action
validity, forecast, demographic pinning and analytic age advance, raw-space
plausibility bounds, then the memory-score reward. Episodes truncate at the
horizon; invalid actions and out-of-distribution forecasts terminate early.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics.interface import DynamicsModel
from .schema import (
    ActionVector,
    FeatureSchema,
    PatientState,
    ScalerStats,
    Visit,
    ZSCALED,
    action_is_valid,
    inverse_scale,
)
from .startstate import Cohort, GmmModel, sample as sample_start


class EpisodeDone(RuntimeError):
    """Raised when stepping an episode that has already ended."""


class EnvError(RuntimeError):
    """Raised on configuration problems (e.g. missing start-state model)."""


REASON_NONE = "none"
REASON_INVALID_ACTION = "invalid_action"
REASON_OUT_OF_DISTRIBUTION = "out_of_distribution"
REASON_HORIZON = "horizon"


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 22
    dt_months: float = 6.0
    validity_sigma: float = 3.0
    rxx: float = 0.91
    reward_clip: float = 10.0
    penalty: float = -10.0
    cohort: Cohort = Cohort.ALL

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise EnvError("horizon must be >= 1")
        if self.dt_months <= 0:
            raise EnvError("dt_months must be positive")
        if not (0.0 < self.rxx < 1.0):
            raise EnvError("rxx must lie in (0, 1)")


def reward(m_t: float, m_t1: float, config: EnvConfig) -> float:
    """Memory-score change scaled by the standard error of difference, clipped.

    Both arguments are standardized memory scores (unit variance), so the
    standard error of difference reduces to sqrt(2 * (1 - rxx)).
    """
    m_diff = np.sqrt(2.0 * (1.0 - config.rxx))
    value = 10.0 * (m_t1 - m_t) / m_diff
    return float(np.clip(value, -config.reward_clip, config.reward_clip))


@dataclass(frozen=True)
class StepResult:
    observation: PatientState  # raw units
    reward: float
    terminated: bool
    truncated: bool
    info: dict

    def __post_init__(self) -> None:
        if self.terminated and self.truncated:
            raise EnvError("terminated and truncated cannot both be set")


class Env:
    """One mutable episode; spawn one instance per concurrent rollout."""

    def __init__(
        self,
        schema: FeatureSchema,
        config: EnvConfig,
        dynamics: DynamicsModel,
        stats: ScalerStats,
        start_models: dict[str, GmmModel] | None = None,
    ):
        self.schema = schema
        self.config = config
        self.dynamics = dynamics
        self.stats = stats
        self.start_models = start_models or {}
        self._pinned_indices = np.concatenate(
            [idx for idx in schema.onehot_group_indices().values()]
        ) if schema.onehot_groups else np.array([], dtype=int)
        self._rng: np.random.Generator | None = None
        self._visits: list[Visit] = []
        self._state: PatientState | None = None  # current z state
        self._pinned_values: np.ndarray | None = None
        self.step_index = 0
        self.done = False
        self.termination_reason = REASON_NONE

    # -- episode lifecycle --------------------------------------------------

    def reset(
        self,
        seed: int | None = None,
        initial: PatientState | None = None,
    ) -> PatientState:
        """Start a new episode; returns the initial observation in raw units."""
        self._rng = np.random.default_rng(seed)
        if initial is None:
            model = self.start_models.get(self.config.cohort.value)
            if model is None:
                raise EnvError(
                    f"no start-state model loaded for cohort {self.config.cohort.value!r}"
                )
            state = sample_start(model, self._rng, self.schema)
        else:
            state = (
                initial
                if initial.space == ZSCALED
                else PatientState((initial.values - self.stats.mean) / self.stats.std, ZSCALED)
            )
        self._state = state
        self._visits = []
        self._pinned_values = state.values[self._pinned_indices].copy()
        self.step_index = 0
        self.done = False
        self.termination_reason = REASON_NONE
        return inverse_scale(state, self.stats)

    def _observation(self) -> PatientState:
        assert self._state is not None
        return inverse_scale(self._state, self.stats)

    def step(self, action: ActionVector) -> StepResult:
        """Advance one stride through the gate sequence."""
        if self._state is None:
            raise EnvError("reset the environment before stepping")
        if self.done:
            raise EpisodeDone("episode already ended; call reset")

        cfg = self.config
        schema = self.schema
        prev = self._state
        mem_i = schema.memory_index
        raw_prev = inverse_scale(prev, self.stats)

        # Gate 1: action constraints. The forecaster is never consulted.
        if not action_is_valid(action, schema):
            self.done = True
            self.termination_reason = REASON_INVALID_ACTION
            return StepResult(
                observation=raw_prev,
                reward=cfg.penalty,
                terminated=True,
                truncated=False,
                info={
                    "termination_reason": REASON_INVALID_ACTION,
                    "step_index": self.step_index,
                    "mem_raw_before": float(raw_prev.values[mem_i]),
                    "mem_raw_after": float(raw_prev.values[mem_i]),
                },
            )

        # Gate 2: forecast at the fixed stride.
        visit = Visit(state=prev, action=action, months_to_next=cfg.dt_months)
        history = self._visits + [visit]
        forecast = self.dynamics.predict_next(history, self.stats, self._rng)

        values = forecast.values.copy()
        if self._pinned_indices.size:
            values[self._pinned_indices] = self._pinned_values
        age_i = schema.age_index
        raw_age = raw_prev.values[age_i] + cfg.dt_months / 12.0
        values[age_i] = (raw_age - self.stats.mean[age_i]) / self.stats.std[age_i]
        nxt = PatientState(values, space=ZSCALED)

        # Gate 3: raw-space plausibility. Indicator features are exempt
        # (their pinned unit scale makes sigma bounds meaningless).
        raw_next = inverse_scale(nxt, self.stats)
        cont = schema.continuous_mask
        lo = self.stats.mean - cfg.validity_sigma * self.stats.std
        hi = self.stats.mean + cfg.validity_sigma * self.stats.std
        ok = (raw_next.values >= lo) & (raw_next.values <= hi) | ~cont
        if not ok.all():
            self.done = True
            self.termination_reason = REASON_OUT_OF_DISTRIBUTION
            return StepResult(
                observation=raw_prev,
                reward=0.0,
                terminated=True,
                truncated=False,
                info={
                    "termination_reason": REASON_OUT_OF_DISTRIBUTION,
                    "step_index": self.step_index,
                    "validity": ok.tolist(),
                    "rejected_state": raw_next.values.tolist(),
                    "mem_raw_before": float(raw_prev.values[mem_i]),
                    "mem_raw_after": float(raw_next.values[mem_i]),
                },
            )

        # Gate 4: reward on standardized memory score; commit the transition.
        r = reward(float(prev.values[mem_i]), float(nxt.values[mem_i]), cfg)
        self._visits.append(visit)
        self._state = nxt
        self.step_index += 1

        # Gate 5: horizon.
        truncated = self.step_index >= cfg.horizon
        if truncated:
            self.done = True
            self.termination_reason = REASON_HORIZON
        return StepResult(
            observation=raw_next,
            reward=r,
            terminated=False,
            truncated=truncated,
            info={
                "termination_reason": self.termination_reason if truncated else REASON_NONE,
                "step_index": self.step_index,
                "validity": ok.tolist(),
                "mem_raw_before": float(raw_prev.values[mem_i]),
                "mem_raw_after": float(raw_next.values[mem_i]),
            },
        )

    def fork(self) -> "Env":
        """Deep copy of the live episode; the copies diverge independently."""
        child = Env(self.schema, self.config, self.dynamics, self.stats, self.start_models)
        child._rng = np.random.default_rng() if self._rng is None else _clone_rng(self._rng)
        child._visits = list(self._visits)
        child._state = self._state
        child._pinned_values = None if self._pinned_values is None else self._pinned_values.copy()
        child.step_index = self.step_index
        child.done = self.done
        child.termination_reason = self.termination_reason
        return child


def _clone_rng(rng: np.random.Generator) -> np.random.Generator:
    clone = np.random.default_rng()
    clone.bit_generator.state = rng.bit_generator.state
    return clone


# -- episode records ----------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    step: int
    action: tuple[int, ...]
    observation: tuple[float, ...]
    reward: float
    terminated: bool
    truncated: bool
    reason: str


@dataclass
class EpisodeRecord:
    initial_observation: tuple[float, ...]
    steps: list[StepRecord] = field(default_factory=list)
    seed: int | None = None
    cohort: str = Cohort.ALL.value

    @property
    def cumulative_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))

    @property
    def termination_reason(self) -> str:
        return self.steps[-1].reason if self.steps else REASON_NONE

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "type": "reset",
                    "observation": list(self.initial_observation),
                    "seed": self.seed,
                    "cohort": self.cohort,
                }
            )
        ]
        for s in self.steps:
            lines.append(
                json.dumps(
                    {
                        "type": "step",
                        "step": s.step,
                        "action": list(s.action),
                        "observation": list(s.observation),
                        "reward": s.reward,
                        "terminated": s.terminated,
                        "truncated": s.truncated,
                        "reason": s.reason,
                    }
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeRecord":
        lines = [json.loads(l) for l in text.strip().splitlines() if l.strip()]
        if not lines or lines[0].get("type") != "reset":
            raise ValueError("episode log must start with a reset line")
        rec = cls(
            initial_observation=tuple(lines[0]["observation"]),
            seed=lines[0].get("seed"),
            cohort=lines[0].get("cohort", Cohort.ALL.value),
        )
        for doc in lines[1:]:
            rec.steps.append(
                StepRecord(
                    step=doc["step"],
                    action=tuple(doc["action"]),
                    observation=tuple(doc["observation"]),
                    reward=doc["reward"],
                    terminated=doc["terminated"],
                    truncated=doc["truncated"],
                    reason=doc["reason"],
                )
            )
        return rec


def rollout(
    policy,
    env: Env,
    seed: int | None = None,
    max_steps: int | None = None,
    initial: PatientState | None = None,
    action_script: Sequence[ActionVector] | None = None,
) -> EpisodeRecord:
    """Alternate policy.act and env.step until the episode ends.

    An explicit *action_script* overrides the policy (used for scripted
    replays); the episode still ends early on termination.
    """
    obs = env.reset(seed=seed, initial=initial)
    record = EpisodeRecord(
        initial_observation=tuple(obs.values.tolist()),
        seed=seed,
        cohort=env.config.cohort.value,
    )
    limit = env.config.horizon if max_steps is None else min(max_steps, env.config.horizon)
    k = 0
    while not env.done and k < limit:
        if action_script is not None:
            if k >= len(action_script):
                break
            action = action_script[k]
        else:
            action = policy.act(obs)
        result = env.step(action)
        k += 1
        reason = result.info.get("termination_reason", REASON_NONE)
        record.steps.append(
            StepRecord(
                step=k,
                action=tuple(int(b) for b in action.bits),
                observation=tuple(result.observation.values.tolist()),
                reward=result.reward,
                terminated=result.terminated,
                truncated=result.truncated,
                reason=reason,
            )
        )
        obs = result.observation
    return record
