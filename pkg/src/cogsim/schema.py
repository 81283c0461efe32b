"""Feature/action vocabulary, scaling, and action-validity rules.

Every other module speaks in terms of the :class:`FeatureSchema` loaded here.
The shipped default describes a 21-feature clinical state vector and a
17-class multi-binary medication action space; alternative cohorts can load
their own manifest without code changes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

CONTINUOUS = "continuous"
BINARY = "binary"

RAW = "raw"
ZSCALED = "zscaled"


class SchemaError(ValueError):
    """Raised when a manifest or a value vector violates the schema contract."""


def _readonly(a: np.ndarray, dtype=None) -> np.ndarray:
    # Always copy: freezing an aliased caller array in place would be a
    # surprising side effect.
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # CONTINUOUS or BINARY
    unit: str


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature and action vocabulary shared across the engine."""

    name: str
    features: tuple[FeatureSpec, ...]
    actions: tuple[str, ...]
    time_feature: str
    onehot_groups: dict[str, tuple[str, ...]] = field(default_factory=dict)
    no_medication_action: str = "No Medication_active"
    ad_treatment_action: str = "AD Treatment_active"
    memory_score_feature: str = "ADNI_MEM"
    age_feature: str = "subject_age"

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")
        if len(set(self.actions)) != len(self.actions):
            raise SchemaError("duplicate action names")
        for f in self.features:
            if f.kind not in (CONTINUOUS, BINARY):
                raise SchemaError(f"unknown feature kind {f.kind!r} for {f.name!r}")
        for required in (self.no_medication_action, self.ad_treatment_action):
            if required not in self.actions:
                raise SchemaError(f"required action {required!r} missing from manifest")
        for required in (self.memory_score_feature, self.age_feature):
            if required not in names:
                raise SchemaError(f"required feature {required!r} missing from manifest")
        for group, members in self.onehot_groups.items():
            for m in members:
                if m not in names:
                    raise SchemaError(f"one-hot group {group!r} references unknown feature {m!r}")

    # -- dimensions -------------------------------------------------------

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def input_dim(self) -> int:
        """Model input width: state + action bits + time-to-next scalar."""
        return self.n_features + self.n_actions + 1

    # -- name lookups -----------------------------------------------------

    def feature_index(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise SchemaError(f"unknown feature {name!r}")

    def action_index(self, name: str) -> int:
        try:
            return self.actions.index(name)
        except ValueError:
            raise SchemaError(f"unknown action {name!r}") from None

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @property
    def no_medication_index(self) -> int:
        return self.action_index(self.no_medication_action)

    @property
    def ad_treatment_index(self) -> int:
        return self.action_index(self.ad_treatment_action)

    @property
    def memory_index(self) -> int:
        return self.feature_index(self.memory_score_feature)

    @property
    def age_index(self) -> int:
        return self.feature_index(self.age_feature)

    @property
    def continuous_mask(self) -> np.ndarray:
        return _readonly(np.array([f.kind == CONTINUOUS for f in self.features]))

    @property
    def binary_mask(self) -> np.ndarray:
        return _readonly(np.array([f.kind == BINARY for f in self.features]))

    def onehot_group_indices(self) -> dict[str, np.ndarray]:
        return {
            g: np.array([self.feature_index(n) for n in members])
            for g, members in self.onehot_groups.items()
        }

    def action_class_names(self) -> tuple[str, ...]:
        """Action names with a trailing ``_active`` suffix stripped."""
        return tuple(a[: -len("_active")] if a.endswith("_active") else a for a in self.actions)

    # -- identity ---------------------------------------------------------

    def fingerprint(self) -> str:
        """Stable hash of the vocabulary; artifacts embed it for compatibility checks."""
        payload = json.dumps(
            {
                "features": [[f.name, f.kind] for f in self.features],
                "actions": list(self.actions),
                "time_feature": self.time_feature,
            },
            separators=(",", ":"),
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()


def load_schema(path: str | Path | None = None) -> FeatureSchema:
    """Load a schema manifest; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("cogsim.resources").joinpath("default_schema.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    return FeatureSchema(
        name=doc.get("name", "unnamed"),
        features=tuple(FeatureSpec(f["name"], f["kind"], f.get("unit", "")) for f in doc["features"]),
        actions=tuple(doc["actions"]),
        time_feature=doc["time_feature"],
        onehot_groups={g: tuple(m) for g, m in doc.get("onehot_groups", {}).items()},
        no_medication_action=doc.get("no_medication_action", "No Medication_active"),
        ad_treatment_action=doc.get("ad_treatment_action", "AD Treatment_active"),
        memory_score_feature=doc.get("memory_score_feature", "ADNI_MEM"),
        age_feature=doc.get("age_feature", "subject_age"),
    )


_DEFAULT: FeatureSchema | None = None


def default_schema() -> FeatureSchema:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_schema(None)
    return _DEFAULT


# -- value objects ---------------------------------------------------------


@dataclass(frozen=True)
class PatientState:
    """One visit's clinical feature vector, tagged with its scaling space."""

    values: np.ndarray
    space: str = RAW

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _readonly(self.values, dtype=float))
        if self.values.ndim != 1:
            raise SchemaError("state values must be a flat vector")
        if self.space not in (RAW, ZSCALED):
            raise SchemaError(f"unknown state space {self.space!r}")

    def validate(self, schema: FeatureSchema) -> "PatientState":
        if self.values.shape[0] != schema.n_features:
            raise SchemaError(
                f"state has {self.values.shape[0]} values, schema expects {schema.n_features}"
            )
        if self.space == RAW:
            binary = self.values[schema.binary_mask]
            if not np.all(np.isin(binary, (0.0, 1.0))):
                raise SchemaError("binary features must be 0/1 in raw space")
        return self


@dataclass(frozen=True)
class ActionVector:
    """Multi-binary medication selection, one bit per action class."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits", _readonly(self.bits, dtype=bool))
        if self.bits.ndim != 1:
            raise SchemaError("action bits must be a flat vector")

    @classmethod
    def from_names(cls, names: Iterable[str], schema: FeatureSchema) -> "ActionVector":
        bits = np.zeros(schema.n_actions, dtype=bool)
        for n in names:
            bits[schema.action_index(n)] = True
        return cls(bits)

    @classmethod
    def none_selected(cls, schema: FeatureSchema) -> "ActionVector":
        return cls(np.zeros(schema.n_actions, dtype=bool))

    @classmethod
    def no_medication(cls, schema: FeatureSchema) -> "ActionVector":
        bits = np.zeros(schema.n_actions, dtype=bool)
        bits[schema.no_medication_index] = True
        return cls(bits)

    def names(self, schema: FeatureSchema) -> tuple[str, ...]:
        return tuple(a for a, b in zip(schema.actions, self.bits) if b)


@dataclass(frozen=True)
class Visit:
    """One observed (state, action, time-to-next) triple."""

    state: PatientState
    action: ActionVector
    months_to_next: float
    present_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.months_to_next < 0:
            raise SchemaError("months_to_next must be nonnegative")
        if self.present_mask is not None:
            object.__setattr__(self, "present_mask", _readonly(self.present_mask, dtype=bool))


@dataclass(frozen=True)
class Trajectory:
    subject_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "visits", tuple(self.visits))

    def __len__(self) -> int:
        return len(self.visits)

    def states(self) -> np.ndarray:
        return np.stack([v.state.values for v in self.visits])


@dataclass(frozen=True)
class ScalerStats:
    """Per-feature standardization statistics, fitted on the training split only.

    Binary features are never rescaled: their mean is pinned to 0 and std to 1
    so that 0/1 semantics survive the round trip.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _readonly(self.mean, dtype=float))
        object.__setattr__(self, "std", _readonly(self.std, dtype=float))
        if self.mean.shape != self.std.shape:
            raise SchemaError("mean/std shape mismatch")
        if np.any(self.std <= 0):
            raise SchemaError("std must be positive for every feature")

    @classmethod
    def fit(cls, rows: np.ndarray, schema: FeatureSchema) -> "ScalerStats":
        """Fit from raw-space training rows (n, n_features)."""
        rows = np.asarray(rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != schema.n_features:
            raise SchemaError("training rows must be (n, n_features)")
        mean = rows.mean(axis=0)
        std = rows.std(axis=0, ddof=0)
        std = np.where(std < 1e-12, 1.0, std)
        binary = schema.binary_mask
        mean = np.where(binary, 0.0, mean)
        std = np.where(binary, 1.0, std)
        return cls(mean, std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ScalerStats":
        return cls(np.array(doc["mean"]), np.array(doc["std"]))


# -- operations -------------------------------------------------------------


def action_is_valid(a: ActionVector, schema: FeatureSchema) -> bool:
    """True iff at least one class is selected and No-Medication is exclusive."""
    bits = a.bits
    if bits.shape[0] != schema.n_actions:
        raise SchemaError("action width does not match schema")
    n_set = int(bits.sum())
    if n_set == 0:
        return False
    if bits[schema.no_medication_index] and n_set > 1:
        return False
    return True


def _check_dims(s: PatientState, stats: ScalerStats) -> None:
    if s.values.shape != stats.mean.shape:
        raise SchemaError(
            f"state width {s.values.shape[0]} does not match scaler width {stats.mean.shape[0]}"
        )


def zscale(s: PatientState, stats: ScalerStats) -> PatientState:
    """Map a raw state into standardized space; binary features pass through."""
    if s.space != RAW:
        raise SchemaError("zscale expects a raw-space state")
    _check_dims(s, stats)
    return PatientState((s.values - stats.mean) / stats.std, space=ZSCALED)


def inverse_scale(s: PatientState, stats: ScalerStats) -> PatientState:
    """Exact inverse of :func:`zscale`."""
    if s.space != ZSCALED:
        raise SchemaError("inverse_scale expects a zscaled state")
    _check_dims(s, stats)
    return PatientState(s.values * stats.std + stats.mean, space=RAW)


def assemble_model_input(v: Visit, stats: ScalerStats) -> np.ndarray:
    """Concatenate [zscaled state | action bits | months-to-next] for the forecaster."""
    state = v.state if v.state.space == ZSCALED else zscale(v.state, stats)
    return np.concatenate(
        [state.values, v.action.bits.astype(float), [float(v.months_to_next)]]
    )
