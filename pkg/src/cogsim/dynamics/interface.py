"""Uniform forecaster interface plus a closed-form reference dynamics.

The episode engine only ever calls ``predict_next(history, stats, rng)``;
anything honoring that contract (full transformer, trained surrogate, linear
reference) plugs in unchanged.
"""

from __future__ import annotations

from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from ..schema import (
    ActionVector,
    FeatureSchema,
    PatientState,
    ScalerStats,
    Trajectory,
    Visit,
    ZSCALED,
)
from .. import tensorio
from .moe import WeightsBundle, moe_forward


@runtime_checkable
class DynamicsModel(Protocol):
    """Forecasts the next standardized state from a visit history.

    Implementations must be causal: the prediction may depend only on the
    visits supplied, never on anything appended later.
    """

    def predict_next(
        self,
        history: Sequence[Visit],
        stats: ScalerStats,
        rng: np.random.Generator | None = None,
    ) -> PatientState: ...


class LinearGaussianDynamics:
    """next = transition @ z + drift + effects.T @ action (+ noise).

    A reference dynamics with closed-form rollouts; deterministic when the
    noise scale is zero. Operates on the last visit only.
    """

    def __init__(
        self,
        n_features: int,
        n_actions: int,
        transition: np.ndarray | None = None,
        drift: np.ndarray | None = None,
        action_effects: np.ndarray | None = None,
        noise_scale: float = 0.0,
    ):
        self.transition = (
            np.eye(n_features) if transition is None else np.asarray(transition, dtype=float)
        )
        self.drift = np.zeros(n_features) if drift is None else np.asarray(drift, dtype=float)
        self.action_effects = (
            np.zeros((n_actions, n_features))
            if action_effects is None
            else np.asarray(action_effects, dtype=float)
        )
        if self.transition.shape != (n_features, n_features):
            raise ValueError("transition must be (n_features, n_features)")
        if self.action_effects.shape != (n_actions, n_features):
            raise ValueError("action_effects must be (n_actions, n_features)")
        self.noise_scale = float(noise_scale)

    def predict_next(
        self,
        history: Sequence[Visit],
        stats: ScalerStats,
        rng: np.random.Generator | None = None,
    ) -> PatientState:
        last = history[-1]
        state = last.state
        z = state.values if state.space == ZSCALED else (state.values - stats.mean) / stats.std
        nxt = self.transition @ z + self.drift + self.action_effects.T @ last.action.bits.astype(float)
        if self.noise_scale > 0:
            if rng is None:
                rng = np.random.default_rng()
            nxt = nxt + self.noise_scale * rng.standard_normal(nxt.shape)
        return PatientState(nxt, space=ZSCALED)

    def save(self, path: str | Path) -> None:
        tensorio.save_tensors(
            path,
            kind="linear-dynamics",
            meta={"noise_scale": self.noise_scale},
            tensors={
                "transition": self.transition,
                "drift": self.drift,
                "action_effects": self.action_effects,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "LinearGaussianDynamics":
        meta, tensors = tensorio.require_kind(path, "linear-dynamics")
        effects = tensors["action_effects"]
        return cls(
            n_features=effects.shape[1],
            n_actions=effects.shape[0],
            transition=tensors["transition"],
            drift=tensors["drift"],
            action_effects=effects,
            noise_scale=meta["noise_scale"],
        )


class MoEDynamics:
    """Forecaster interface over full transformer weights."""

    def __init__(self, weights: WeightsBundle, schema: FeatureSchema):
        if weights.schema_fingerprint != schema.fingerprint():
            raise ValueError("weights were produced for a different schema")
        self.weights = weights
        self.schema = schema

    def predict_next(
        self,
        history: Sequence[Visit],
        stats: ScalerStats,
        rng: np.random.Generator | None = None,
    ) -> PatientState:
        preds, _ = moe_forward(list(history), self.weights, stats)
        out = preds[-1].copy()
        binary = self.schema.binary_mask
        out[binary] = (out[binary] > 0.0).astype(float)
        return PatientState(out, space=ZSCALED)


def autoregressive_rollout(
    dynamics: DynamicsModel,
    initial: PatientState,
    actions: Sequence[ActionVector],
    deltas: Sequence[float],
    stats: ScalerStats,
    subject_id: str = "rollout",
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Roll the forecaster forward on its own predictions.

    The initial state is ground truth; every later state re-enters the history
    as predicted. Visit k carries action k and the elapsed months to visit
    k+1; the final visit carries a zero action and zero months.
    """
    if len(actions) != len(deltas):
        raise ValueError("actions and deltas must have equal length")
    z0 = initial if initial.space == ZSCALED else PatientState(
        (initial.values - stats.mean) / stats.std, space=ZSCALED
    )
    history: list[Visit] = []
    states = [z0]
    for action, delta in zip(actions, deltas):
        history.append(Visit(state=states[-1], action=action, months_to_next=float(delta)))
        states.append(dynamics.predict_next(history, stats, rng))
    n_actions = len(actions[0].bits) if actions else 0
    tail = Visit(
        state=states[-1],
        action=ActionVector(np.zeros(n_actions, dtype=bool)),
        months_to_next=0.0,
    )
    return Trajectory(subject_id=subject_id, visits=tuple(history) + (tail,))
