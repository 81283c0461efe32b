"""Shared fixtures: schemas, scalers, linear benchmark dynamics."""

from __future__ import annotations

import numpy as np
import pytest


def pytest_runtest_logreport(report):
    """One visible PASS/FAIL line per acceptance criterion."""
    if report.when == "call" and "test_acceptance" in report.nodeid:
        outcome = "PASS" if report.passed else "FAIL"
        name = report.nodeid.split("::")[-1]
        print(f"\n[{outcome}] acceptance: {name} ({report.duration:.1f}s)")

from cogsim.dynamics import LinearGaussianDynamics
from cogsim.schema import (
    ActionVector,
    PatientState,
    ScalerStats,
    Trajectory,
    Visit,
    ZSCALED,
    default_schema,
)


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def identity_stats(schema):
    """Scaler with zero mean / unit SD: standardized and raw space coincide."""
    return ScalerStats(np.zeros(schema.n_features), np.ones(schema.n_features))


@pytest.fixture(scope="session")
def raw_stats(schema):
    """Scaler resembling the shipped profile's raw scales."""
    mean = np.array(
        [0.38, 0.14, 280, 980, 76.2, 0, 0, 0, 0, 0, 0, 0, 0, 0,
         39000, 6800, 1.04e6, 3600, 17800, 19900, 1.53e6]
    )
    std = np.array(
        [1.16, 1.02, 120, 350, 7.4, 1, 1, 1, 1, 1, 1, 1, 1, 1,
         20000, 1000, 1.05e5, 700, 2500, 2800, 1.6e5]
    )
    return ScalerStats(mean, std)


@pytest.fixture()
def memory_benchmark(schema):
    """Linear dynamics: memory drifts down, treatment exactly offsets it."""
    d, na = schema.n_features, schema.n_actions
    drift = np.zeros(d)
    drift[schema.memory_index] = -0.05
    effects = np.zeros((na, d))
    effects[schema.ad_treatment_index, schema.memory_index] = 0.05
    return LinearGaussianDynamics(d, na, drift=drift, action_effects=effects)


def no_med_action(schema):
    return ActionVector.no_medication(schema)


def treat_action(schema):
    bits = np.zeros(schema.n_actions, dtype=bool)
    bits[schema.ad_treatment_index] = True
    return ActionVector(bits)


def make_z_state(schema, rng, memory=None):
    """Random standardized state with schema-valid indicator patterns."""
    z = rng.normal(0.0, 1.0, schema.n_features)
    z[schema.binary_mask] = 0.0
    for idx in schema.onehot_group_indices().values():
        z[idx] = 0.0
        z[idx[rng.integers(len(idx))]] = 1.0
    if memory is not None:
        z[schema.memory_index] = memory
    return PatientState(z, space=ZSCALED)


def linear_trajectory(schema, dynamics, stats, rng, n_visits=8, policy="mixed", subject_id="s"):
    """Trajectory generated by stepping the given dynamics from a random start."""
    state = make_z_state(schema, rng)
    visits = []
    for t in range(n_visits):
        bits = np.zeros(schema.n_actions, dtype=bool)
        if policy == "mixed" and rng.random() < 0.5:
            bits[schema.ad_treatment_index] = True
        else:
            bits[schema.no_medication_index] = True
        action = ActionVector(bits)
        visits.append(
            Visit(state=state, action=action, months_to_next=6.0 if t < n_visits - 1 else 0.0)
        )
        if t < n_visits - 1:
            state = dynamics.predict_next(visits, stats, rng)
    return Trajectory(subject_id, tuple(visits))
