"""Synthetic cohort marginals against the generation profile."""

import numpy as np
import pytest

from cogsim.schema import action_is_valid
from cogsim.synth import default_profile, summarize, synth_cohort


@pytest.fixture(scope="module")
def cohort2000(schema):
    return synth_cohort(2000, seed=7, schema=schema, missing_rate=0.0)


def test_age_marginal(schema, cohort2000):
    summary = summarize(cohort2000, schema)
    profile = default_profile(schema)
    assert summary.feature_mean[schema.age_index] == pytest.approx(
        profile.feature_mean[schema.age_index], abs=0.5
    )


def test_impaired_fraction(schema, cohort2000):
    summary = summarize(cohort2000, schema)
    assert summary.impaired_visit_fraction == pytest.approx(0.286, abs=0.02)


def test_interval_and_visit_moments(schema, cohort2000):
    summary = summarize(cohort2000, schema)
    assert summary.interval_mean_months == pytest.approx(8.6, abs=0.4)
    assert summary.interval_sd_months == pytest.approx(6.9, abs=0.5)
    assert summary.visits_per_subject_mean == pytest.approx(6.82, abs=0.4)
    assert summary.visits_min >= 3
    assert summary.visits_max <= 22


def test_memory_moments_loose(schema, cohort2000):
    summary = summarize(cohort2000, schema)
    assert summary.feature_mean[schema.memory_index] == pytest.approx(0.38, abs=0.15)
    assert summary.feature_sd[schema.memory_index] == pytest.approx(1.16, abs=0.15)


def test_seeded_determinism(schema):
    a = synth_cohort(20, seed=3, schema=schema)
    b = synth_cohort(20, seed=3, schema=schema)
    for ta, tb in zip(a, b):
        assert ta.subject_id == tb.subject_id
        for va, vb in zip(ta.visits, tb.visits):
            assert np.array_equal(va.state.values, vb.state.values, equal_nan=True)
            assert np.array_equal(va.action.bits, vb.action.bits)


def test_actions_valid_and_onehot_groups(schema):
    for traj in synth_cohort(30, seed=11, schema=schema, missing_rate=0.0):
        for v in traj.visits:
            assert action_is_valid(v.action, schema)
            for idx in schema.onehot_group_indices().values():
                assert v.state.values[idx].sum() == 1.0


def test_missingness_masks(schema):
    trajs = synth_cohort(50, seed=13, schema=schema, missing_rate=0.2)
    holes = 0
    for t in trajs:
        for v in t.visits:
            holes += int((~v.present_mask).sum())
            assert np.isnan(v.state.values[~v.present_mask]).all()
            # protected columns never go missing
            assert v.present_mask[schema.memory_index]
            assert v.present_mask[schema.age_index]
    assert holes > 0
