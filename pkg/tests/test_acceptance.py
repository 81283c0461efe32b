"""Acceptance suite: one test per release criterion, at stated tolerances.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed via the hook in conftest. Each test also asserts its
stated runtime budget.
"""

import itertools
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner
from scipy import stats as spstats

from cogsim.clinician import BcConfig, bc_loss_and_grad, init_bc
from cogsim.cli import main as cli_main
from cogsim.cohortio import write_cohort, write_split, write_stats
from cogsim.dynamics import (
    LinearGaussianDynamics,
    MiniConfig,
    gradient_check,
    init_mini,
    loss_and_grad,
    loss_only,
    moe_forward,
)
from cogsim.env import Env, EnvConfig, reward
from cogsim.ingest import SplitAssignment
from cogsim.policies import (
    CemConfig,
    HeuristicPolicy,
    LinearScorePolicy,
    NoMedicationPolicy,
    cem_train,
    evaluate,
    shapley_attribution,
    wilcoxon_signed_rank,
)
from cogsim.schema import ActionVector, PatientState, ZSCALED
from cogsim.startstate import GmmModel, select_k
from cogsim.statval import (
    mantel_group_fisher,
    mantel_group_permutation,
    mantel_r,
    mmd_rbf_test,
)

from conftest import linear_trajectory, make_z_state
from test_dynamics_moe import engineered_weights, hand_forward_two_tokens


class Budget:
    def __init__(self, seconds: float):
        self.seconds = seconds
        self.start = time.monotonic()

    def check(self):
        elapsed = time.monotonic() - self.start
        assert elapsed < self.seconds, f"runtime {elapsed:.1f}s exceeds {self.seconds}s budget"


class CountingDynamics:
    def __init__(self, n_features, shift=None):
        self.calls = 0
        self.shift = np.zeros(n_features) if shift is None else shift

    def predict_next(self, history, stats, rng=None):
        self.calls += 1
        return PatientState(history[-1].state.values + self.shift, space=ZSCALED)


def point_gmm(schema, memory_mean=0.0, memory_sd=0.8):
    d = schema.n_features
    mean = np.zeros(d)
    mean[schema.memory_index] = memory_mean
    for idx in schema.onehot_group_indices().values():
        mean[idx[0]] = 1.0
    cov = np.eye(d) * 1e-12
    cov[schema.memory_index, schema.memory_index] = memory_sd**2
    return GmmModel(
        weights=np.array([1.0]), means=mean[None], covariances=cov[None],
        log_likelihood=0.0, n_samples=1, seed=0,
    )


def test_reward_exactness():
    """Eq-style reward unit suite at rxx = 0.91 (M_diff = sqrt(0.18))."""
    budget = Budget(1.0)
    cfg = EnvConfig()
    m_diff = np.sqrt(2 * (1 - 0.91))
    assert m_diff == pytest.approx(np.sqrt(0.18), abs=1e-15)
    cases = {0.0: 0.0, 0.2: 10 * 0.2 / m_diff, 1.0: 10.0, -1.0: -10.0}
    for delta, expected in cases.items():
        assert reward(0.0, delta, cfg) == pytest.approx(expected, abs=1e-9)
    assert reward(0.0, 0.2, cfg) == pytest.approx(4.714045, abs=1e-6)
    budget.check()


def test_constraint_gates(schema, identity_stats):
    """Invalid actions: exact -10, forecaster untouched; OOD forecast: exact 0."""
    budget = Budget(1.0)
    dyn = CountingDynamics(schema.n_features)
    env = Env(schema, EnvConfig(), dyn, identity_stats, {})
    rng = np.random.default_rng(0)

    env.reset(initial=make_z_state(schema, rng))
    res = env.step(ActionVector(np.zeros(schema.n_actions, dtype=bool)))
    assert res.terminated and res.reward == -10.0 and dyn.calls == 0

    env.reset(initial=make_z_state(schema, rng))
    bits = np.zeros(schema.n_actions, dtype=bool)
    bits[schema.no_medication_index] = True
    bits[schema.action_index("Statin_active")] = True
    res = env.step(ActionVector(bits))
    assert res.terminated and res.reward == -10.0 and dyn.calls == 0

    shift = np.zeros(schema.n_features)
    shift[schema.feature_index("ABETA")] = 4.0
    dyn2 = CountingDynamics(schema.n_features, shift=shift)
    env2 = Env(schema, EnvConfig(), dyn2, identity_stats, {})
    env2.reset(initial=make_z_state(schema, rng))
    res = env2.step(ActionVector.no_medication(schema))
    assert res.terminated and res.reward == 0.0 and dyn2.calls == 1
    assert res.info["termination_reason"] == "out_of_distribution"
    budget.check()


def test_episode_semantics(schema, raw_stats):
    """22-step truncation under in-bounds dynamics; age +0.5 years per step."""
    budget = Budget(1.0)
    dyn = LinearGaussianDynamics(schema.n_features, schema.n_actions)
    env = Env(schema, EnvConfig(), dyn, raw_stats, {})
    obs = env.reset(initial=make_z_state(schema, np.random.default_rng(1), memory=0.0))
    ages = [obs.values[schema.age_index]]
    last = None
    steps = 0
    while not env.done:
        last = env.step(ActionVector.no_medication(schema))
        ages.append(last.observation.values[schema.age_index])
        steps += 1
    assert steps == 22
    assert last.truncated and not last.terminated
    assert np.allclose(np.diff(ages), 0.5)
    budget.check()


def test_gradient_fidelity(schema):
    """Analytic vs central-difference gradients, 10 random points each."""
    budget = Budget(30.0)
    cfg = MiniConfig(n_experts=4)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((12, cfg.ctx_dim))
    y = rng.standard_normal((12, schema.n_features))
    y[:, schema.binary_mask] = (rng.random((12, int(schema.binary_mask.sum()))) < 0.5).astype(float)
    w0 = init_mini(cfg, schema.fingerprint(), 1)

    def mini_loss(theta):
        return loss_only(w0.unpack(theta), x, y, schema).total

    def mini_grad(theta):
        _, g = loss_and_grad(w0.unpack(theta), x, y, schema)
        return g.pack()

    worst = 0.0
    for seed in range(10):
        point = w0.pack() + 0.1 * np.random.default_rng(100 + seed).standard_normal(w0.pack().size)
        worst = max(worst, gradient_check(mini_loss, mini_grad, point))
    assert worst < 1e-4, f"mini worst rel err {worst:.2e}"

    bc_cfg = BcConfig(input_dim=8, n_actions=6, hidden_width=10)
    net = init_bc(bc_cfg, 2)
    xb = rng.standard_normal((10, 8))
    yb = (rng.random((10, 6)) < 0.4).astype(float)
    weights = np.linspace(0.5, 3.0, 6)
    mask = (rng.random((10, 10)) >= bc_cfg.dropout_p).astype(float)

    def bc_loss(theta):
        loss, _ = bc_loss_and_grad(net.unpack(theta), xb, yb, weights, mask)
        return loss

    def bc_grad(theta):
        _, g = bc_loss_and_grad(net.unpack(theta), xb, yb, weights, mask)
        return g.pack()

    worst_bc = 0.0
    for seed in range(10):
        point = net.pack() + 0.2 * np.random.default_rng(200 + seed).standard_normal(net.pack().size)
        worst_bc = max(worst_bc, gradient_check(bc_loss, bc_grad, point))
    assert worst_bc < 1e-4, f"bc worst rel err {worst_bc:.2e}"
    budget.check()


def test_moe_forward_correctness():
    """Hand-computed 2-token pass, exact causal prefixes, top-1 routing."""
    budget = Budget(5.0)
    w = engineered_weights()
    v1 = np.array([1.0, 2.0, -1.0])
    v2 = np.array([0.5, -0.5, 1.5])
    preds, stats, trace = moe_forward(np.stack([v1, v2]), w, return_trace=True)
    expected = hand_forward_two_tokens(w, v1, v2)
    assert np.max(np.abs(preds - expected)) < 1e-9

    # causal-prefix equality is exact (bit identical)
    extended, _ = moe_forward(np.stack([v1, v2, v1 * 0.5]), w)
    assert np.array_equal(preds, extended[:2])

    # per position/layer expert activation count is exactly one
    for layer in trace["layers"]:
        assert layer["expert_choice"].shape == (2,)
        assert np.all((layer["expert_choice"] >= 0) & (layer["expert_choice"] < w.config.n_experts))
    assert np.allclose(stats.assign_fraction.sum(axis=1), 1.0)
    budget.check()


def test_gmm_recovery():
    """K=3 selected in >= 80% of 20 seeds; means within 0.1 permutation-matched."""
    budget = Budget(120.0)
    rng = np.random.default_rng(0)
    d = 21
    centers = np.stack([np.full(d, -4.0), np.zeros(d), np.full(d, 4.0)])
    x = np.concatenate([rng.normal(c, 1.0, (1000, d)) for c in centers])

    hits = 0
    mean_errors = []
    for seed in range(20):
        model = select_k(x, range(1, 7), seed=seed)
        if model.k == 3:
            hits += 1
            err = min(
                np.abs(model.means[list(p)] - centers).max()
                for p in itertools.permutations(range(3))
            )
            mean_errors.append(err)
    assert hits >= 16, f"K=3 selected only {hits}/20 times"
    assert max(mean_errors) < 0.1, f"worst permutation-matched mean error {max(mean_errors):.3f}"
    budget.check()


def test_mmd_calibration_and_power():
    """Null rejection within the exact binomial band; power > 0.9 at a 1-sigma shift."""
    budget = Budget(300.0)
    trials = 200
    rejections = 0
    for t in range(trials):
        rng = np.random.default_rng(50_000 + t)
        x = rng.normal(size=(100, 5))
        y = rng.normal(size=(100, 5))
        res = mmd_rbf_test(x, y, n_perm=400, seed=t)
        rejections += res.p_value <= 0.05
    lo = spstats.binom.ppf(0.025, trials, 0.05)
    hi = spstats.binom.ppf(0.975, trials, 0.05)
    assert lo <= rejections <= hi, f"null rejections {rejections} outside [{lo}, {hi}]"

    power_hits = 0
    power_trials = 30
    for t in range(power_trials):
        rng = np.random.default_rng(60_000 + t)
        x = rng.normal(size=(200, 5))
        y = rng.normal(size=(200, 5)) + 1.0
        res = mmd_rbf_test(x, y, n_perm=400, seed=t)
        power_hits += res.p_value < 0.05
    assert power_hits / power_trials > 0.9
    budget.check()


def test_mantel_suite_acceptance():
    """Exact r=1 on identical trajectories; calibrated null; hand Fisher case."""
    budget = Budget(120.0)
    rng = np.random.default_rng(1)
    traj = rng.normal(size=(9, 5)).cumsum(axis=0)
    assert mantel_r(traj, traj) == 1.0

    rejections = 0
    repeats = 100
    for rep in range(repeats):
        r = np.random.default_rng(70_000 + rep)
        pairs = [(r.normal(size=(8, 3)), r.normal(size=(8, 3))) for _ in range(10)]
        p = mantel_group_permutation(pairs, n_perm=199, seed=rep)
        rejections += p <= 0.05
    rate = rejections / repeats
    assert 0.02 <= rate <= 0.08, f"null rejection rate {rate}"

    fisher = mantel_group_fisher([0.7, 0.72, 0.68, 0.71])
    assert fisher.p_value < 0.001
    budget.check()


def test_wilcoxon_exactness():
    """Exact mode equals brute-force enumeration on 1000 random small cases."""
    budget = Budget(30.0)

    def brute(a, b):
        d = a - b
        d = d[d != 0]
        if d.size == 0:
            return 1.0
        ranks = spstats.rankdata(np.abs(d))
        w_obs = ranks[d > 0].sum()
        hits = total = 0
        for signs in itertools.product((0, 1), repeat=d.size):
            w = sum(r for r, s in zip(ranks, signs) if s)
            hits += w >= w_obs - 1e-9
            total += 1
        return hits / total

    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        if rng.random() < 0.25:
            b[: n // 2] = a[: n // 2]
        if rng.random() < 0.25:
            a, b = np.round(a, 1), np.round(b, 1)
        assert wilcoxon_signed_rank(a, b) == pytest.approx(brute(a, b))

    assert wilcoxon_signed_rank(np.arange(1.0, 7.0), np.zeros(6)) == pytest.approx(1 / 64)
    budget.check()


def test_end_to_end_ordering(schema, identity_stats, memory_benchmark):
    """Learned policy > heuristic > no-treatment on the linear benchmark."""
    budget = Budget(300.0)
    gmm = point_gmm(schema)

    def factory():
        return Env(schema, EnvConfig(), memory_benchmark, identity_stats, {"all": gmm})

    cem = cem_train(factory, schema, identity_stats, CemConfig(), seed=0)
    policies = [NoMedicationPolicy(schema), HeuristicPolicy(schema), cem.policy]
    report = evaluate(policies, factory, n_patients=200, seed=42)
    means = report.cumulative.mean(axis=1)
    assert means[2] > means[1] > means[0], f"ordering violated: {means}"
    assert means[2] - means[0] >= 5.0

    p_cem_heur = report.wilcoxon_one_sided[2, 1]
    p_heur_nomed = report.wilcoxon_one_sided[1, 0]
    p_cem_nomed = report.wilcoxon_one_sided[2, 0]
    assert p_cem_heur < 0.01 and p_heur_nomed < 0.01 and p_cem_nomed < 0.01
    budget.check()


def test_self_consistency_validation(schema, identity_stats, tmp_path):
    """The engine's own fidelity pipeline affirms the true generator."""
    budget = Budget(180.0)
    rng = np.random.default_rng(3)
    d, na = schema.n_features, schema.n_actions
    drift = rng.normal(0.0, 0.08, d)
    effects = np.zeros((na, d))
    effects[schema.ad_treatment_index, schema.memory_index] = 0.05
    dyn = LinearGaussianDynamics(d, na, drift=drift, action_effects=effects, noise_scale=0.05)

    trajs = [
        linear_trajectory(schema, dyn, identity_stats, rng, n_visits=8, subject_id=f"s{i}")
        for i in range(60)
    ]
    split = SplitAssignment(
        assignment={f"s{i}": ("test" if i < 25 else "train") for i in range(60)}, seed=0
    )
    write_cohort(tmp_path / "cohort.csv", trajs, schema)
    write_split(tmp_path / "split.csv", split)
    write_stats(tmp_path / "stats.json", identity_stats, schema)
    dyn.save(tmp_path / "dyn.tensors")

    runner = CliRunner()
    result = runner.invoke(
        cli_main,
        [
            "validate",
            "--cohort", str(tmp_path / "cohort.csv"),
            "--split", str(tmp_path / "split.csv"),
            "--stats", str(tmp_path / "stats.json"),
            "--dynamics", f"linear:{tmp_path / 'dyn.tensors'}",
            "--n-perm", "500", "--group-perm", "500", "--seed", "5",
            "--out", str(tmp_path / "report.json"),
        ],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["short_range"]["p"] > 0.05, report
    assert report["long_range"]["p"] > 0.05, report
    assert report["mantel"]["group_perm_p"] < 0.05, report
    budget.check()


def test_shapley_axioms(schema, identity_stats):
    """Dummy features get exactly zero; efficiency holds to 1e-12."""
    budget = Budget(10.0)
    rng = np.random.default_rng(4)

    constant = NoMedicationPolicy(schema)
    states = [PatientState(rng.normal(size=schema.n_features), space="raw") for _ in range(3)]
    values = shapley_attribution(constant, states, schema.no_medication_index, n_samples=30, seed=1)
    assert np.max(np.abs(values)) < 1e-12

    theta = rng.normal(size=schema.n_actions * (schema.n_features + 1))
    policy = LinearScorePolicy(schema, identity_stats, theta)
    x = rng.normal(size=schema.n_features)
    baseline = rng.normal(size=schema.n_features)
    idx = schema.ad_treatment_index
    attr = shapley_attribution(
        policy, x[None, :], action_index=idx, n_samples=41, seed=2, baseline=baseline
    )
    gap = policy.action_score(PatientState(x, space="raw"), idx) - policy.action_score(
        PatientState(baseline, space="raw"), idx
    )
    assert attr.sum() == pytest.approx(gap, abs=1e-12)
    budget.check()


def test_pipeline_determinism(tmp_path):
    """Seeded preprocess, forecaster training, mixture fits, and evaluation
    are bit-identical across two runs."""
    budget = Budget(300.0)
    runner = CliRunner()

    def run_all(base):
        base.mkdir(exist_ok=True)
        steps = [
            ["synth-data", "--n", "80", "--seed", "42", "--out", str(base / "raw.csv")],
            [
                "preprocess", "--in", str(base / "raw.csv"),
                "--out-cohort", str(base / "cohort.csv"),
                "--out-split", str(base / "split.csv"),
                "--out-stats", str(base / "stats.json"), "--seed", "42",
            ],
            [
                "train-dynamics", "--cohort", str(base / "cohort.csv"),
                "--split", str(base / "split.csv"), "--stats", str(base / "stats.json"),
                "--out", str(base / "mini.tensors"), "--epochs", "15", "--seed", "42",
            ],
            [
                "fit-gmm", "--cohort", str(base / "cohort.csv"),
                "--split", str(base / "split.csv"), "--stats", str(base / "stats.json"),
                "--k-max", "3", "--out-dir", str(base / "gmm"), "--seed", "42",
            ],
            [
                "evaluate", "--policies", "no_medication,heuristic",
                "--dynamics", f"mini:{base / 'mini.tensors'}",
                "--stats", str(base / "stats.json"), "--gmm-dir", str(base / "gmm"),
                "--n", "30", "--seed", "42", "--out", str(base / "report.json"),
            ],
        ]
        for args in steps:
            result = runner.invoke(cli_main, args)
            assert result.exit_code == 0, (args[0], result.output)

    run_all(tmp_path / "a")
    run_all(tmp_path / "b")

    artifacts = [
        "raw.csv", "cohort.csv", "split.csv", "stats.json",
        "mini.tensors", "gmm/all.tensors", "gmm/healthy.tensors",
        "gmm/impaired.tensors", "report.json", "report.csv",
    ]
    for rel in artifacts:
        a = (tmp_path / "a" / rel).read_bytes()
        b = (tmp_path / "b" / rel).read_bytes()
        assert a == b, f"{rel} differs between runs"
    budget.check()
