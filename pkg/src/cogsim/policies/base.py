"""Treatment-policy interface and the rule-based baselines."""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from ..schema import ActionVector, FeatureSchema, PatientState, action_is_valid


@runtime_checkable
class Policy(Protocol):
    """Maps a raw-unit observation to a medication selection."""

    name: str
    deterministic: bool

    def act(self, observation: PatientState) -> ActionVector: ...


def repair_action(bits: np.ndarray, schema: FeatureSchema) -> ActionVector:
    """Project arbitrary bits onto the valid action set.

    No-Medication loses to any co-selected treatment; an empty selection
    becomes No-Medication.
    """
    out = np.asarray(bits, dtype=bool).copy()
    no_med = schema.no_medication_index
    if out[no_med] and out.sum() > 1:
        out[no_med] = False
    if not out.any():
        out[no_med] = True
    action = ActionVector(out)
    assert action_is_valid(action, schema)
    return action


class NoMedicationPolicy:
    """Always selects the No-Medication class."""

    deterministic = True

    def __init__(self, schema: FeatureSchema):
        self.schema = schema
        self.name = "no_medication"
        self._action = ActionVector.no_medication(schema)

    def act(self, observation: PatientState) -> ActionVector:
        return self._action

    def action_score(self, observation: PatientState, action_index: int) -> float:
        return float(self._action.bits[action_index])


class HeuristicPolicy:
    """Guideline-style rule: treat only once the memory score falls below threshold.

    The comparison is strict; a score exactly at the threshold stays untreated.
    """

    deterministic = True

    def __init__(self, schema: FeatureSchema, threshold: float = -0.1):
        self.schema = schema
        self.threshold = threshold
        self.name = "heuristic"
        bits = np.zeros(schema.n_actions, dtype=bool)
        bits[schema.ad_treatment_index] = True
        self._treat = ActionVector(bits)
        self._no_med = ActionVector.no_medication(schema)

    def act(self, observation: PatientState) -> ActionVector:
        mem = float(observation.values[self.schema.memory_index])
        return self._treat if mem < self.threshold else self._no_med

    def action_score(self, observation: PatientState, action_index: int) -> float:
        return float(self.act(observation).bits[action_index])


class ConstantPolicy:
    """Emits one fixed (repaired) action regardless of state."""

    deterministic = True

    def __init__(self, schema: FeatureSchema, bits: np.ndarray, name: str = "constant"):
        self.schema = schema
        self.name = name
        self._action = repair_action(np.asarray(bits, dtype=bool), schema)

    def act(self, observation: PatientState) -> ActionVector:
        return self._action

    def action_score(self, observation: PatientState, action_index: int) -> float:
        return float(self._action.bits[action_index])
