"""Synthetic longitudinal cohorts with configurable marginal targets.

Substitutes for access-restricted clinical data: a two-group latent mixture
(healthy/impaired memory trajectories) with linear per-year drifts, clinician-
like medication assignment, and optional missingness. The generator aims at
the profile's visit-level marginals; it makes no claim of clinical realism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schema import (
    BINARY,
    ActionVector,
    FeatureSchema,
    PatientState,
    Trajectory,
    Visit,
    default_schema,
)

# Per-year drifts in raw units, applied per feature when present in the schema.
_DRIFT_PER_YEAR = {
    "TAU_data": 4.0,
    "ABETA": -10.0,
    "Ventricles": 900.0,
    "Hippocampus": -50.0,
    "WholeBrain": -4000.0,
    "Entorhinal": -25.0,
    "Fusiform": -60.0,
    "MidTemp": -80.0,
}

# Extra per-year memory-score drift for the impaired group (on top of noise).
_MEM_DRIFT = {"healthy": -0.02, "impaired": -0.10}

_IMPAIRED_THRESHOLD = -0.1


@dataclass(frozen=True)
class CohortSummary:
    """Visit-level marginal summary of a longitudinal cohort."""

    n_visits: int
    n_subjects: int
    feature_mean: np.ndarray
    feature_sd: np.ndarray
    visits_per_subject_mean: float
    visits_per_subject_sd: float
    visits_min: int
    visits_max: int
    interval_mean_months: float
    interval_sd_months: float
    impaired_visit_fraction: float

    def __post_init__(self) -> None:
        if self.n_visits < 0 or self.n_subjects < 0:
            raise ValueError("counts must be nonnegative")


def default_profile(schema: FeatureSchema | None = None) -> CohortSummary:
    """Marginal targets for the shipped schema, at the published cohort's scale."""
    schema = schema or default_schema()
    mean = {
        "ADNI_MEM": 0.38,
        "ADNI_EF2": 0.14,
        "TAU_data": 280.0,
        "ABETA": 980.0,
        "subject_age": 76.2,
        "PTGENDER_Female": 0.452,
        "PTGENDER_Male": 0.548,
        "PTRACCAT_Am Indian/Alaskan": 0.0035,
        "PTRACCAT_Asian": 0.017,
        "PTRACCAT_Black": 0.039,
        "PTRACCAT_Hawaiian/Other PI": 0.0035,
        "PTRACCAT_More than one": 0.0035,
        "PTRACCAT_Unknown": 0.0035,
        "PTRACCAT_White": 0.93,
        "Ventricles": 39000.0,
        "Hippocampus": 6800.0,
        "WholeBrain": 1040000.0,
        "Entorhinal": 3600.0,
        "Fusiform": 17800.0,
        "MidTemp": 19900.0,
        "ICV": 1530000.0,
    }
    sd = {
        "ADNI_MEM": 1.16,
        "ADNI_EF2": 1.02,
        "TAU_data": 120.0,
        "ABETA": 350.0,
        "subject_age": 7.4,
        "Ventricles": 20000.0,
        "Hippocampus": 1000.0,
        "WholeBrain": 105000.0,
        "Entorhinal": 700.0,
        "Fusiform": 2500.0,
        "MidTemp": 2800.0,
        "ICV": 160000.0,
    }
    means = np.array([mean[f.name] for f in schema.features])
    sds = np.array(
        [
            sd[f.name]
            if f.name in sd
            else float(np.sqrt(mean[f.name] * (1 - mean[f.name])))
            for f in schema.features
        ]
    )
    return CohortSummary(
        n_visits=12984,
        n_subjects=1905,
        feature_mean=means,
        feature_sd=sds,
        visits_per_subject_mean=6.82,
        visits_per_subject_sd=3.72,
        visits_min=3,
        visits_max=22,
        interval_mean_months=8.6,
        interval_sd_months=6.9,
        impaired_visit_fraction=0.286,
    )


def summarize(trajectories: list[Trajectory], schema: FeatureSchema) -> CohortSummary:
    """Compute the visit-level marginal summary of an in-memory cohort."""
    rows = np.concatenate([t.states() for t in trajectories])
    counts = np.array([len(t) for t in trajectories])
    intervals = np.concatenate(
        [[v.months_to_next for v in t.visits[:-1]] for t in trajectories if len(t) > 1]
    )
    mem = rows[:, schema.memory_index]
    with np.errstate(invalid="ignore"):
        means = np.nanmean(rows, axis=0)
        sds = np.nanstd(rows, axis=0)
    return CohortSummary(
        n_visits=int(counts.sum()),
        n_subjects=len(trajectories),
        feature_mean=means,
        feature_sd=sds,
        visits_per_subject_mean=float(counts.mean()),
        visits_per_subject_sd=float(counts.std()),
        visits_min=int(counts.min()),
        visits_max=int(counts.max()),
        interval_mean_months=float(intervals.mean()) if intervals.size else 0.0,
        interval_sd_months=float(intervals.std()) if intervals.size else 0.0,
        impaired_visit_fraction=float(np.mean(mem[~np.isnan(mem)] < _IMPAIRED_THRESHOLD)),
    )


# Per-subject chronic-medication propensities; each active from a random visit on.
_BACKGROUND_MEDS = {
    "Statin_active": 0.28,
    "Antihypertensive_active": 0.33,
    "Supplement_active": 0.38,
    "NSAID_active": 0.18,
    "SSRI_active": 0.10,
    "Analgesic_active": 0.12,
    "PPI_active": 0.12,
    "Thyroid Hormone_active": 0.10,
    "Diabetes Medication_active": 0.08,
    "Diuretic_active": 0.07,
    "Antidepressant_active": 0.05,
    "Alpha Blocker_active": 0.04,
    "Bone Health_active": 0.04,
    "Steroid_active": 0.03,
    "Other_active": 0.05,
}


def _memory_mixture(profile: CohortSummary, schema: FeatureSchema):
    """Two-group component means/SD for the memory score from overall moments."""
    q = profile.impaired_visit_fraction
    mu = profile.feature_mean[schema.memory_index]
    sigma = profile.feature_sd[schema.memory_index]
    s = 0.40 * sigma  # within-group SD; remainder becomes group separation
    delta = float(np.sqrt(max(sigma**2 - s**2, 1e-12) / max(q * (1 - q), 1e-12)))
    return mu + q * delta, mu - (1 - q) * delta, s


def synth_cohort(
    n_subjects: int,
    seed: int,
    profile: CohortSummary | None = None,
    schema: FeatureSchema | None = None,
    missing_rate: float = 0.03,
) -> list[Trajectory]:
    """Generate a seeded synthetic cohort targeting the profile's marginals."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    schema = schema or default_schema()
    profile = profile or default_profile(schema)
    rng = np.random.default_rng(seed)

    mem_i = schema.memory_index
    ef_i = schema.feature_index("ADNI_EF2") if "ADNI_EF2" in schema.feature_names else None
    age_i = schema.age_index
    groups = schema.onehot_group_indices()

    # Visit-count distribution: shifted negative binomial clipped to the range.
    excess_mean = profile.visits_per_subject_mean - profile.visits_min
    excess_var = max(profile.visits_per_subject_sd**2, excess_mean + 0.1)
    r = excess_mean**2 / (excess_var - excess_mean)
    p = r / (r + excess_mean)

    # Mean elapsed time at a random visit, used to center baselines so that
    # visit-level marginals land on the profile despite per-year drift.
    ev = profile.visits_per_subject_mean
    ev2 = profile.visits_per_subject_sd**2 + ev**2
    mean_elapsed_years = (ev2 - ev) / (2 * ev) * profile.interval_mean_months / 12.0

    mu_h, mu_imp, mem_s = _memory_mixture(profile, schema)
    interval_k = (profile.interval_mean_months / profile.interval_sd_months) ** 2
    interval_theta = profile.interval_sd_months**2 / profile.interval_mean_months

    missing_candidates = np.array(
        [
            f.kind == "continuous" and f.name not in (schema.memory_score_feature, schema.age_feature)
            for f in schema.features
        ]
    )

    # A few percent of impaired-group baseline draws start above the threshold,
    # so the subject-level rate is inflated to land the visit-level fraction.
    subject_impaired_rate = min(profile.impaired_visit_fraction * 1.04, 1.0)

    trajectories: list[Trajectory] = []
    for si in range(n_subjects):
        impaired = rng.random() < subject_impaired_rate
        n_visits = int(np.clip(profile.visits_min + rng.negative_binomial(r, p),
                               profile.visits_min, profile.visits_max))
        intervals = rng.gamma(interval_k, interval_theta, size=n_visits - 1)
        elapsed_months = np.concatenate([[0.0], np.cumsum(intervals)])
        years = elapsed_months / 12.0

        base = np.empty(schema.n_features)
        for j, spec in enumerate(schema.features):
            if spec.kind == BINARY:
                base[j] = 0.0
            else:
                base[j] = rng.normal(profile.feature_mean[j], 0.95 * profile.feature_sd[j])
        for members in groups.values():
            probs = profile.feature_mean[members]
            probs = probs / probs.sum()
            base[members] = 0.0
            base[members[rng.choice(len(members), p=probs)]] = 1.0

        mem_mu = mu_imp if impaired else mu_h
        mem_drift = _MEM_DRIFT["impaired" if impaired else "healthy"]
        base[mem_i] = rng.normal(mem_mu + abs(mem_drift) * mean_elapsed_years, mem_s)
        base[age_i] = float(
            np.clip(rng.normal(profile.feature_mean[age_i] - mean_elapsed_years, 7.0), 55.0, 96.0)
        )

        chronic = {
            name: (rng.integers(0, n_visits)
                   if rng.random() < prob and name in schema.actions else None)
            for name, prob in _BACKGROUND_MEDS.items()
        }
        on_treatment = False

        visits: list[Visit] = []
        for k in range(n_visits):
            values = base.copy()
            for j, spec in enumerate(schema.features):
                if spec.kind == BINARY:
                    continue
                drift = _DRIFT_PER_YEAR.get(spec.name, 0.0)
                values[j] = base[j] + drift * years[k] + rng.normal(
                    0.0, 0.05 * profile.feature_sd[j]
                )
            values[mem_i] = base[mem_i] + mem_drift * years[k] + rng.normal(0.0, 0.08)
            if ef_i is not None:
                zmem = (values[mem_i] - profile.feature_mean[mem_i]) / profile.feature_sd[mem_i]
                values[ef_i] = profile.feature_mean[ef_i] + profile.feature_sd[ef_i] * (
                    0.55 * zmem + np.sqrt(1 - 0.55**2) * rng.standard_normal()
                )
            values[age_i] = base[age_i] + years[k]

            bits = np.zeros(schema.n_actions, dtype=bool)
            if values[mem_i] < _IMPAIRED_THRESHOLD:
                if on_treatment:
                    on_treatment = rng.random() < 0.95
                else:
                    on_treatment = rng.random() < 0.75
            if on_treatment:
                bits[schema.ad_treatment_index] = True
            for name, start in chronic.items():
                if start is not None and k >= start:
                    bits[schema.action_index(name)] = True
            if not bits.any():
                bits[schema.no_medication_index] = True

            mask = np.ones(schema.n_features, dtype=bool)
            if missing_rate > 0:
                holes = (rng.random(schema.n_features) < missing_rate) & missing_candidates
                mask[holes] = False
                values = np.where(mask, values, np.nan)

            visits.append(
                Visit(
                    state=PatientState(values, space="raw"),
                    action=ActionVector(bits),
                    months_to_next=float(intervals[k]) if k < n_visits - 1 else 0.0,
                    present_mask=mask,
                )
            )
        trajectories.append(Trajectory(subject_id=f"SYN{si:05d}", visits=tuple(visits)))
    return trajectories
