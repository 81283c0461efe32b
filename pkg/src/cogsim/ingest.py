"""Raw longitudinal records to model-ready trajectories.

Medication logs are consolidated into therapeutic-class activity windows,
short trajectories are dropped, missing values are imputed with an iterative
round-robin linear-regression scheme, and subjects are partitioned into
train/val/test splits. Imputer and scaler state derive from the training
partition only.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .schema import (
    BINARY,
    CONTINUOUS,
    ActionVector,
    FeatureSchema,
    PatientState,
    ScalerStats,
    Trajectory,
    Visit,
)

log = logging.getLogger(__name__)

DAYS_PER_MONTH = 30.4375  # mean Gregorian month; date offsets -> fractional months

SPLITS = ("train", "val", "test")


class IngestError(ValueError):
    """Raised on malformed input records."""


# -- medication records ------------------------------------------------------


@dataclass(frozen=True)
class MedicationRecord:
    subject_id: str
    drug_name: str
    start_date: dt.date
    end_date: dt.date | None = None

    def __post_init__(self) -> None:
        if self.end_date is not None and self.end_date < self.start_date:
            raise IngestError(
                f"medication record for {self.subject_id!r} ends before it starts"
            )

    def active_on(self, day: dt.date) -> bool:
        """Inclusive containment; a missing end date means an open interval."""
        if day < self.start_date:
            return False
        return self.end_date is None or day <= self.end_date


@dataclass(frozen=True)
class DrugClassMap:
    """Normalized drug name -> therapeutic class; unmapped names fall back."""

    entries: dict[str, str]
    fallback_class: str = "Other"

    def validate(self, schema: FeatureSchema) -> "DrugClassMap":
        known = set(schema.action_class_names())
        for name, cls in self.entries.items():
            if cls not in known:
                raise IngestError(f"drug class {cls!r} (for {name!r}) not in schema actions")
        if self.fallback_class not in known:
            raise IngestError(f"fallback class {self.fallback_class!r} not in schema actions")
        return self


def _normalize(name: str) -> str:
    return " ".join(name.split()).casefold()


def load_drug_map(path: str | Path | None = None) -> DrugClassMap:
    """Load a drug-class mapping; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("cogsim.resources").joinpath("drug_classes.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    entries = {
        _normalize(drug): cls for cls, drugs in doc["classes"].items() for drug in drugs
    }
    return DrugClassMap(entries=entries, fallback_class=doc.get("fallback_class", "Other"))


def map_drug(name: str, drug_map: DrugClassMap) -> str:
    """Case-insensitive, whitespace-trimmed class lookup with fallback."""
    if not name.strip():
        raise IngestError("empty drug name")
    return drug_map.entries.get(_normalize(name), drug_map.fallback_class)


def build_visits(
    records: list[MedicationRecord],
    visit_dates: list[dt.date],
    drug_map: DrugClassMap,
    schema: FeatureSchema,
) -> list[ActionVector]:
    """Per-visit action vectors from activity windows for one subject.

    A class bit is set when any mapped record's window contains the visit
    date. Visits with no active class get the No-Medication bit; an explicit
    no-medication record never overrides an active treatment.
    """
    if any(b < a for a, b in zip(visit_dates, visit_dates[1:])):
        raise IngestError("visit dates must be sorted ascending")
    class_index = {c: i for i, c in enumerate(schema.action_class_names())}
    out: list[ActionVector] = []
    for day in visit_dates:
        bits = np.zeros(schema.n_actions, dtype=bool)
        for rec in records:
            if rec.active_on(day):
                bits[class_index[map_drug(rec.drug_name, drug_map)]] = True
        treatments = bits.copy()
        treatments[schema.no_medication_index] = False
        if treatments.any():
            bits = treatments
        else:
            bits[:] = False
            bits[schema.no_medication_index] = True
        out.append(ActionVector(bits))
    return out


def recompute_age(baseline_age: float, visit_offset_months: float) -> float:
    """Age at a visit from the baseline age and the months elapsed."""
    if baseline_age <= 0:
        raise IngestError("baseline age must be positive")
    if visit_offset_months < 0:
        raise IngestError("visit offset must be nonnegative")
    return baseline_age + visit_offset_months / 12.0


def months_between(a: dt.date, b: dt.date) -> float:
    """Fractional months from *a* to *b* using exact day counts."""
    return (b - a).days / DAYS_PER_MONTH


def filter_min_visits(trajectories: list[Trajectory], k: int = 3) -> list[Trajectory]:
    """Retain subjects with at least *k* visits."""
    if k < 1:
        raise IngestError("k must be >= 1")
    return [t for t in trajectories if len(t) >= k]


# -- subject-level splitting --------------------------------------------------


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict[str, str]  # subject_id -> train|val|test
    seed: int

    def subjects(self, split: str) -> list[str]:
        return [s for s, v in self.assignment.items() if v == split]


def split_subjects(
    subject_ids: list[str],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 42,
) -> SplitAssignment:
    """Deterministic subject-level split via largest-remainder apportionment."""
    if not subject_ids:
        raise IngestError("cannot split an empty cohort")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise IngestError("split ratios must sum to 1")
    n = len(subject_ids)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [subject_ids[i] for i in order]

    quotas = np.array([n * r for r in ratios])
    counts = np.floor(quotas).astype(int)
    remainders = quotas - counts
    tie_order = rng.permutation(len(ratios))
    for idx in sorted(range(len(ratios)), key=lambda i: (-remainders[i], tie_order[i]))[
        : n - counts.sum()
    ]:
        counts[idx] += 1

    assignment: dict[str, str] = {}
    cursor = 0
    for split, c in zip(SPLITS, counts):
        for sid in shuffled[cursor : cursor + c]:
            assignment[sid] = split
        cursor += c
    return SplitAssignment(assignment=assignment, seed=seed)


# -- iterative imputation ------------------------------------------------------


@dataclass
class IterativeImputer:
    """Round-robin linear-regression imputer fitted on the training partition.

    Missing continuous entries start at train medians and are refined by
    cycling features, regressing each on all others over the currently filled
    matrix. Missing binary entries are filled with the train majority value
    and do not iterate. Transform replays the fitted rounds verbatim.
    """

    schema: FeatureSchema
    max_rounds: int = 10
    tol: float = 1e-4
    init_values: np.ndarray | None = None
    rounds: list[list[tuple[int, np.ndarray]]] = field(default_factory=list)

    def fit(self, rows: np.ndarray, present: np.ndarray) -> "IterativeImputer":
        rows = np.asarray(rows, dtype=float)
        present = np.asarray(present, dtype=bool)
        n, d = rows.shape
        if d != self.schema.n_features:
            raise IngestError("row width does not match schema")
        if np.any(~present.any(axis=0)):
            missing = [
                self.schema.features[j].name for j in np.where(~present.any(axis=0))[0]
            ]
            raise IngestError(f"features entirely missing in train split: {missing}")

        init = np.empty(d)
        for j, spec in enumerate(self.schema.features):
            observed = rows[present[:, j], j]
            if spec.kind == BINARY:
                init[j] = 1.0 if observed.mean() >= 0.5 else 0.0
            else:
                init[j] = np.median(observed)
        self.init_values = init

        filled = np.where(present, rows, init[None, :])
        cont = [j for j, f in enumerate(self.schema.features) if f.kind == CONTINUOUS]
        holes = {j: ~present[:, j] for j in cont}
        any_holes = any(h.any() for h in holes.values())
        self.rounds = []
        if not any_holes or self.max_rounds == 0:
            return self

        for _ in range(self.max_rounds):
            round_models: list[tuple[int, np.ndarray]] = []
            delta_sq, n_holes = 0.0, 0
            for j in cont:
                others = [k for k in range(d) if k != j]
                mask = present[:, j]
                a = np.column_stack([filled[mask][:, others], np.ones(mask.sum())])
                beta, *_ = np.linalg.lstsq(a, filled[mask, j], rcond=None)
                round_models.append((j, beta))
                if holes[j].any():
                    am = np.column_stack(
                        [filled[holes[j]][:, others], np.ones(holes[j].sum())]
                    )
                    new = am @ beta
                    delta_sq += float(np.sum((new - filled[holes[j], j]) ** 2))
                    n_holes += int(holes[j].sum())
                    filled[holes[j], j] = new
            self.rounds.append(round_models)
            if n_holes and np.sqrt(delta_sq / n_holes) < self.tol:
                break
        return self

    def transform(self, rows: np.ndarray, present: np.ndarray) -> np.ndarray:
        """Fill missing entries; observed entries are never altered."""
        if self.init_values is None:
            raise IngestError("imputer not fitted")
        rows = np.asarray(rows, dtype=float)
        present = np.asarray(present, dtype=bool)
        filled = np.where(present, rows, self.init_values[None, :])
        d = rows.shape[1]
        for round_models in self.rounds:
            for j, beta in round_models:
                hole = ~present[:, j]
                if not hole.any():
                    continue
                others = [k for k in range(d) if k != j]
                am = np.column_stack([filled[hole][:, others], np.ones(hole.sum())])
                filled[hole, j] = am @ beta
        return filled


# -- whole-cohort preprocessing ------------------------------------------------


@dataclass(frozen=True)
class ProcessedCohort:
    trajectories: tuple[Trajectory, ...]
    split: SplitAssignment
    stats: ScalerStats

    def subset(self, split: str) -> list[Trajectory]:
        wanted = {s for s, v in self.split.assignment.items() if v == split}
        return [t for t in self.trajectories if t.subject_id in wanted]


def _stack_rows(trajectories: list[Trajectory]) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    rows, masks, index = [], [], []
    for ti, t in enumerate(trajectories):
        for vi, v in enumerate(t.visits):
            rows.append(v.state.values)
            masks.append(
                v.present_mask
                if v.present_mask is not None
                else np.ones(len(v.state.values), dtype=bool)
            )
            index.append((ti, vi))
    return np.array(rows, dtype=float), np.array(masks, dtype=bool), index


def preprocess(
    trajectories: list[Trajectory],
    schema: FeatureSchema,
    seed: int = 42,
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    min_visits: int = 3,
    imputer_rounds: int = 10,
) -> ProcessedCohort:
    """Filter, split, impute, and fit the scaler; fits touch only the train split."""
    kept = filter_min_visits(trajectories, min_visits)
    if not kept:
        raise IngestError("no subjects remain after the minimum-visit filter")
    split = split_subjects([t.subject_id for t in kept], ratios, seed)

    rows, masks, index = _stack_rows(kept)
    train_rows = np.array(
        [split.assignment[kept[ti].subject_id] == "train" for ti, _ in index]
    )
    imputer = IterativeImputer(schema, max_rounds=imputer_rounds).fit(
        rows[train_rows], masks[train_rows]
    )
    filled = imputer.transform(rows, masks)

    rebuilt: list[Trajectory] = []
    cursor = 0
    for t in kept:
        visits = []
        for v in t.visits:
            mask = (
                v.present_mask
                if v.present_mask is not None
                else np.ones(schema.n_features, dtype=bool)
            )
            visits.append(
                Visit(
                    state=PatientState(filled[cursor], space="raw"),
                    action=v.action,
                    months_to_next=v.months_to_next,
                    present_mask=mask,
                )
            )
            cursor += 1
        rebuilt.append(Trajectory(t.subject_id, tuple(visits)))

    train_filled = filled[train_rows]
    stats = ScalerStats.fit(train_filled, schema)
    return ProcessedCohort(trajectories=tuple(rebuilt), split=split, stats=stats)
