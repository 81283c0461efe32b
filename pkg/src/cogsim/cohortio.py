"""File formats for cohorts, splits, and scaler statistics.

Input side: a visit table (one row per visit, empty cells for missing values)
plus a medication log (one row per prescription window), both CSV with
ISO-8601 dates. Output side: a processed-cohort CSV consumed by the
forecaster, start-state, and clinician trainers, a subject->split file, and a
JSON stats file. Formats are documented in ``docs/FORMATS.md``.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from pathlib import Path

import numpy as np

from .ingest import (
    DrugClassMap,
    IngestError,
    MedicationRecord,
    SplitAssignment,
    build_visits,
    months_between,
    recompute_age,
)
from .schema import (
    ActionVector,
    FeatureSchema,
    PatientState,
    ScalerStats,
    Trajectory,
    Visit,
)


def _parse_date(text: str, context: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as exc:
        raise IngestError(f"bad date {text!r} in {context}") from exc


def read_medication_log(path: str | Path) -> list[MedicationRecord]:
    """CSV columns: subject_id, drug_name, start_date, end_date (may be empty)."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"subject_id", "drug_name", "start_date", "end_date"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise IngestError(f"medication log {path} must have columns {sorted(required)}")
        for row in reader:
            end = row["end_date"].strip()
            records.append(
                MedicationRecord(
                    subject_id=row["subject_id"].strip(),
                    drug_name=row["drug_name"],
                    start_date=_parse_date(row["start_date"], str(path)),
                    end_date=_parse_date(end, str(path)) if end else None,
                )
            )
    return records


def read_visit_table(
    path: str | Path,
    schema: FeatureSchema,
) -> dict[str, list[tuple[dt.date, np.ndarray, np.ndarray]]]:
    """CSV columns: subject_id, visit_date, then the schema's feature names.

    Returns per-subject date-sorted (date, values, present_mask) rows; empty
    cells become NaN with a False mask.
    """
    per_subject: dict[str, list[tuple[dt.date, np.ndarray, np.ndarray]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError(f"empty visit table {path}")
        missing = [n for n in schema.feature_names if n not in reader.fieldnames]
        if "subject_id" not in reader.fieldnames or "visit_date" not in reader.fieldnames or missing:
            raise IngestError(
                f"visit table {path} must have subject_id, visit_date and all feature columns"
                + (f"; missing {missing}" if missing else "")
            )
        for row in reader:
            values = np.empty(schema.n_features)
            mask = np.ones(schema.n_features, dtype=bool)
            for j, name in enumerate(schema.feature_names):
                cell = row[name].strip()
                if cell == "":
                    values[j] = np.nan
                    mask[j] = False
                else:
                    try:
                        values[j] = float(cell)
                    except ValueError as exc:
                        raise IngestError(f"non-numeric cell {cell!r} for {name} in {path}") from exc
            sid = row["subject_id"].strip()
            per_subject.setdefault(sid, []).append(
                (_parse_date(row["visit_date"], str(path)), values, mask)
            )
    for rows in per_subject.values():
        rows.sort(key=lambda r: r[0])
    return per_subject


def assemble_trajectories(
    visit_rows: dict[str, list[tuple[dt.date, np.ndarray, np.ndarray]]],
    med_records: list[MedicationRecord],
    drug_map: DrugClassMap,
    schema: FeatureSchema,
) -> list[Trajectory]:
    """Join visit rows with medication windows into raw trajectories.

    Ages are recomputed from each subject's baseline age; months-to-next come
    from exact day counts between consecutive visit dates.
    """
    meds_by_subject: dict[str, list[MedicationRecord]] = {}
    for rec in med_records:
        meds_by_subject.setdefault(rec.subject_id, []).append(rec)

    age_i = schema.age_index
    out: list[Trajectory] = []
    for sid, rows in visit_rows.items():
        dates = [r[0] for r in rows]
        actions = build_visits(meds_by_subject.get(sid, []), dates, drug_map, schema)
        baseline_age = next((r[1][age_i] for r in rows if np.isfinite(r[1][age_i])), None)
        visits = []
        for k, ((date, values, mask), action) in enumerate(zip(rows, actions)):
            values = values.copy()
            mask = mask.copy()
            if baseline_age is not None:
                values[age_i] = recompute_age(float(baseline_age), months_between(dates[0], date))
                mask[age_i] = True
            months = months_between(date, dates[k + 1]) if k + 1 < len(dates) else 0.0
            visits.append(
                Visit(
                    state=PatientState(values, space="raw"),
                    action=action,
                    months_to_next=months,
                    present_mask=mask,
                )
            )
        out.append(Trajectory(subject_id=sid, visits=tuple(visits)))
    return out


# -- processed-cohort format ----------------------------------------------------


def write_cohort(path: str | Path, trajectories: list[Trajectory], schema: FeatureSchema) -> None:
    """Columnar text format, one row per visit:

    subject_id, visit_index, months_to_next, <21 feature columns>,
    <17 action columns (0/1)>, present_mask (21-char 0/1 string).
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["subject_id", "visit_index", "months_to_next"]
            + list(schema.feature_names)
            + list(schema.actions)
            + ["present_mask"]
        )
        for t in trajectories:
            for k, v in enumerate(t.visits):
                mask = (
                    v.present_mask
                    if v.present_mask is not None
                    else np.ones(schema.n_features, dtype=bool)
                )
                writer.writerow(
                    [t.subject_id, k, repr(float(v.months_to_next))]
                    + [repr(float(x)) if np.isfinite(x) else "" for x in v.state.values]
                    + [int(b) for b in v.action.bits]
                    + ["".join("1" if m else "0" for m in mask)]
                )


def read_cohort(path: str | Path, schema: FeatureSchema) -> list[Trajectory]:
    by_subject: dict[str, list[tuple[int, Visit]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"subject_id", "visit_index", "months_to_next", "present_mask"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise IngestError(f"{path} is not a processed-cohort file")
        for row in reader:
            values = np.array(
                [float(row[n]) if row[n] != "" else np.nan for n in schema.feature_names]
            )
            bits = np.array([row[a] == "1" for a in schema.actions])
            mask = np.array([c == "1" for c in row["present_mask"]])
            visit = Visit(
                state=PatientState(values, space="raw"),
                action=ActionVector(bits),
                months_to_next=float(row["months_to_next"]),
                present_mask=mask,
            )
            by_subject.setdefault(row["subject_id"], []).append((int(row["visit_index"]), visit))
    out = []
    for sid, items in by_subject.items():
        items.sort(key=lambda p: p[0])
        out.append(Trajectory(subject_id=sid, visits=tuple(v for _, v in items)))
    return out


def write_split(path: str | Path, split: SplitAssignment) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "split"])
        for sid, part in split.assignment.items():
            writer.writerow([sid, part])


def read_split(path: str | Path, seed: int = 0) -> SplitAssignment:
    assignment = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"subject_id", "split"}:
            raise IngestError(f"{path} is not a split file")
        for row in reader:
            assignment[row["subject_id"]] = row["split"]
    return SplitAssignment(assignment=assignment, seed=seed)


def write_stats(path: str | Path, stats: ScalerStats, schema: FeatureSchema) -> None:
    doc = {"schema_fingerprint": schema.fingerprint(), **stats.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_stats(path: str | Path, schema: FeatureSchema | None = None) -> ScalerStats:
    doc = json.loads(Path(path).read_text())
    if schema is not None and doc.get("schema_fingerprint") not in (None, schema.fingerprint()):
        raise IngestError(f"stats file {path} was fitted under a different schema")
    return ScalerStats.from_dict(doc)
