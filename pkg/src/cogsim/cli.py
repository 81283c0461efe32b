"""Operator command line: data synthesis through serving.

Each subcommand drives exactly one pipeline stage and is deterministic under
``--seed`` (default 42). Machine-readable output goes to stdout, diagnostics
to stderr. Exit codes: 0 success, 2 usage, 3 missing artifact path, 4
malformed input file, 1 internal failure.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import cohortio, ingest, synth, tensorio
from .clinician import BcNet, BcPolicy
from .dynamics import (
    LinearGaussianDynamics,
    MiniConfig,
    MiniDynamics,
    MiniWeights,
    MoEDynamics,
    WeightsBundle,
    autoregressive_rollout,
    build_pairs,
    train_mini,
)
from .env import Env, EnvConfig, rollout as run_rollout
from .policies import (
    HeuristicPolicy,
    LinearScorePolicy,
    NoMedicationPolicy,
    evaluate as run_evaluate,
    shapley_attribution,
)
from .schema import ActionVector, FeatureSchema, default_schema, load_schema
from .service import ServiceArtifacts, create_app
from .startstate import Cohort, GmmModel, fit_cohort_models, sample_raw
from .statval import mantel_suite, mmd_rbf_test, per_feature_mmd, transitions_short, drift_long

EXIT_MISSING_ARTIFACT = 3
EXIT_MALFORMED_INPUT = 4


def pipeline_errors(fn):
    """Map failure classes onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FileNotFoundError as exc:
            click.echo(f"error: missing artifact: {exc}", err=True)
            sys.exit(EXIT_MISSING_ARTIFACT)
        except (ingest.IngestError, tensorio.ContainerError, json.JSONDecodeError, ValueError) as exc:
            click.echo(f"error: malformed input: {exc}", err=True)
            sys.exit(EXIT_MALFORMED_INPUT)

    return wrapper


def _load_schema(path: str | None) -> FeatureSchema:
    return load_schema(path) if path else default_schema()


def load_dynamics(selector: str, schema: FeatureSchema):
    """Parse a dynamics selector of the form kind:path (linear|mini|moe)."""
    if ":" not in selector:
        raise ingest.IngestError(
            f"dynamics selector {selector!r} must look like linear:PATH, mini:PATH or moe:PATH"
        )
    kind, _, path = selector.partition(":")
    if not Path(path).exists():
        raise FileNotFoundError(path)
    if kind == "linear":
        return LinearGaussianDynamics.load(path)
    if kind == "mini":
        return MiniDynamics(MiniWeights.load(path), schema)
    if kind == "moe":
        return MoEDynamics(WeightsBundle.load(path), schema)
    raise ingest.IngestError(f"unknown dynamics kind {kind!r}")


def load_gmms(gmm_dir: str) -> dict[str, GmmModel]:
    base = Path(gmm_dir)
    if not base.exists():
        raise FileNotFoundError(gmm_dir)
    out = {}
    for cohort in Cohort:
        path = base / f"{cohort.value}.tensors"
        if path.exists():
            out[cohort.value] = GmmModel.load(path)
    if not out:
        raise ingest.IngestError(f"no start-state models found in {gmm_dir}")
    return out


def build_policy(name: str, schema: FeatureSchema, stats) -> object:
    """Policy selector: bare name or name:ARTIFACT."""
    kind, _, path = name.partition(":")
    if kind == "no_medication":
        return NoMedicationPolicy(schema)
    if kind == "heuristic":
        return HeuristicPolicy(schema)
    if kind == "cem":
        if not path:
            raise ingest.IngestError("cem policy needs a weights path: cem:PATH")
        if not Path(path).exists():
            raise FileNotFoundError(path)
        meta, tensors = tensorio.require_kind(path, "linear-policy")
        return LinearScorePolicy(schema, stats, tensors["theta"], name="cem")
    if kind == "clinician":
        if not path:
            raise ingest.IngestError("clinician policy needs a weights path: clinician:PATH")
        if not Path(path).exists():
            raise FileNotFoundError(path)
        return BcPolicy(BcNet.load(path), schema, stats)
    raise ingest.IngestError(f"unknown policy {name!r}")


@click.group()
def main() -> None:
    """Medication-conditioned virtual-patient simulation engine."""


@main.command("synth-data")
@click.option("--n", "n_subjects", type=int, default=300, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--missing-rate", type=float, default=0.03, show_default=True)
@click.option("--schema", "schema_path", type=str, default=None, help="Schema manifest path.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@pipeline_errors
def synth_data(n_subjects: int, seed: int, missing_rate: float, schema_path: str | None, out_path: str):
    """Generate a synthetic longitudinal cohort file."""
    schema = _load_schema(schema_path)
    trajs = synth.synth_cohort(n_subjects, seed=seed, schema=schema, missing_rate=missing_rate)
    cohortio.write_cohort(out_path, trajs, schema)
    summary = synth.summarize(trajs, schema)
    click.echo(
        json.dumps(
            {
                "subjects": summary.n_subjects,
                "visits": summary.n_visits,
                "impaired_visit_fraction": summary.impaired_visit_fraction,
                "out": str(out_path),
            }
        )
    )


@main.command()
@click.option("--in", "in_path", type=str, default=None, help="Raw cohort file (synth-data format).")
@click.option("--visits", "visits_path", type=str, default=None, help="Visit table CSV.")
@click.option("--meds", "meds_path", type=str, default=None, help="Medication log CSV.")
@click.option("--drug-map", "drug_map_path", type=str, default=None)
@click.option("--schema", "schema_path", type=str, default=None)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--min-visits", type=int, default=3, show_default=True)
@click.option("--out-cohort", type=click.Path(), required=True)
@click.option("--out-split", type=click.Path(), required=True)
@click.option("--out-stats", type=click.Path(), required=True)
@pipeline_errors
def preprocess(
    in_path, visits_path, meds_path, drug_map_path, schema_path, seed, min_visits,
    out_cohort, out_split, out_stats,
):
    """Filter, split, impute, and fit the scaler (train split only)."""
    schema = _load_schema(schema_path)
    if in_path:
        if not Path(in_path).exists():
            raise FileNotFoundError(in_path)
        trajs = cohortio.read_cohort(in_path, schema)
    elif visits_path and meds_path:
        for p in (visits_path, meds_path):
            if not Path(p).exists():
                raise FileNotFoundError(p)
        drug_map = ingest.load_drug_map(drug_map_path).validate(schema)
        rows = cohortio.read_visit_table(visits_path, schema)
        meds = cohortio.read_medication_log(meds_path)
        trajs = cohortio.assemble_trajectories(rows, meds, drug_map, schema)
    else:
        raise ingest.IngestError("provide either --in or both --visits and --meds")
    processed = ingest.preprocess(trajs, schema, seed=seed, min_visits=min_visits)
    cohortio.write_cohort(out_cohort, list(processed.trajectories), schema)
    cohortio.write_split(out_split, processed.split)
    cohortio.write_stats(out_stats, processed.stats, schema)
    counts = {s: len(processed.split.subjects(s)) for s in ingest.SPLITS}
    click.echo(json.dumps({"subjects": counts, "out_cohort": str(out_cohort)}))


@main.command("train-dynamics")
@click.option("--cohort", "cohort_path", type=str, required=True)
@click.option("--split", "split_path", type=str, required=True)
@click.option("--stats", "stats_path", type=str, required=True)
@click.option("--schema", "schema_path", type=str, default=None)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--experts", type=int, default=8, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--history", "history_path", type=click.Path(), default=None)
@pipeline_errors
def train_dynamics(
    cohort_path, split_path, stats_path, schema_path, seed, epochs, lr, experts,
    out_path, history_path,
):
    """Train the reduced mixture-of-experts forecaster with teacher forcing."""
    schema = _load_schema(schema_path)
    for p in (cohort_path, split_path, stats_path):
        if not Path(p).exists():
            raise FileNotFoundError(p)
    trajs = cohortio.read_cohort(cohort_path, schema)
    split = cohortio.read_split(split_path)
    stats = cohortio.read_stats(stats_path, schema)
    by_split = lambda s: [t for t in trajs if split.assignment.get(t.subject_id) == s]
    train_pairs = build_pairs(by_split("train"), stats, schema)
    val_src = by_split("val") or by_split("train")
    val_pairs = build_pairs(val_src, stats, schema)
    config = MiniConfig(
        n_experts=experts,
        input_dim=schema.input_dim,
        n_targets=schema.n_features,
        epochs=epochs,
        lr=lr,
    )
    weights, history = train_mini(train_pairs, val_pairs, schema, config, seed=seed)
    weights.save(out_path)
    if history_path:
        with open(history_path, "w") as fh:
            fh.write("epoch,train_total,train_mse,train_bce,train_lb,val_total,lr\n")
            for i in range(len(history.epochs)):
                fh.write(
                    f"{history.epochs[i]},{history.train_total[i]!r},{history.train_mse[i]!r},"
                    f"{history.train_bce[i]!r},{history.train_lb[i]!r},{history.val_total[i]!r},"
                    f"{history.lr[i]!r}\n"
                )
    click.echo(json.dumps({"out": str(out_path), "final_val_total": history.val_total[-1]}))


@main.command("fit-gmm")
@click.option("--cohort", "cohort_path", type=str, required=True)
@click.option("--split", "split_path", type=str, required=True)
@click.option("--stats", "stats_path", type=str, required=True)
@click.option("--schema", "schema_path", type=str, default=None)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--k-max", type=int, default=100, show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
@pipeline_errors
def fit_gmm(cohort_path, split_path, stats_path, schema_path, seed, k_max, out_dir):
    """Fit start-state mixtures for the three cohort variants (train split)."""
    schema = _load_schema(schema_path)
    for p in (cohort_path, split_path, stats_path):
        if not Path(p).exists():
            raise FileNotFoundError(p)
    trajs = cohortio.read_cohort(cohort_path, schema)
    split = cohortio.read_split(split_path)
    stats = cohortio.read_stats(stats_path, schema)
    train = [t for t in trajs if split.assignment.get(t.subject_id) == "train"]
    models = fit_cohort_models(train, stats, schema, k_range=range(1, k_max + 1), seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chosen = {}
    for cohort, model in models.items():
        model.save(out / f"{cohort}.tensors", schema.fingerprint())
        chosen[cohort] = model.k
    click.echo(json.dumps({"out_dir": str(out), "components": chosen}))


@main.command()
@click.option("--cohort", "cohort_path", type=str, required=True)
@click.option("--split", "split_path", type=str, required=True, help="Uses the test split.")
@click.option("--stats", "stats_path", type=str, required=True)
@click.option("--dynamics", "dynamics_sel", type=str, required=True)
@click.option("--schema", "schema_path", type=str, default=None)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--n-perm", type=int, default=1000, show_default=True)
@click.option("--group-perm", type=int, default=5000, show_default=True)
@click.option("--per-feature/--no-per-feature", default=False, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@pipeline_errors
def validate(
    cohort_path, split_path, stats_path, dynamics_sel, schema_path, seed,
    n_perm, group_perm, per_feature, out_path,
):
    """Autoregressive rollouts on held-out subjects plus the fidelity tests."""
    schema = _load_schema(schema_path)
    for p in (cohort_path, split_path, stats_path):
        if not Path(p).exists():
            raise FileNotFoundError(p)
    trajs = cohortio.read_cohort(cohort_path, schema)
    split = cohortio.read_split(split_path)
    stats = cohortio.read_stats(stats_path, schema)
    dynamics = load_dynamics(dynamics_sel, schema)
    test = [t for t in trajs if split.assignment.get(t.subject_id) == "test"]
    if not test:
        raise ingest.IngestError("test split is empty")

    rng = np.random.default_rng(seed)
    pred_list, truth_list = [], []
    for t in test:
        z = (t.states() - stats.mean) / stats.std
        actions = [v.action for v in t.visits[:-1]]
        deltas = [v.months_to_next for v in t.visits[:-1]]
        initial = t.visits[0].state
        initial_z = (initial.values - stats.mean) / stats.std
        from .schema import PatientState, ZSCALED

        pred = autoregressive_rollout(
            dynamics,
            PatientState(initial_z, space=ZSCALED),
            actions,
            deltas,
            stats,
            subject_id=t.subject_id,
            rng=rng,
        )
        pred_list.append(pred.states())
        truth_list.append(z)

    short = mmd_rbf_test(
        transitions_short(pred_list), transitions_short(truth_list),
        n_perm=n_perm, seed=seed, variant="short_range",
    )
    long = mmd_rbf_test(
        drift_long(pred_list), drift_long(truth_list),
        n_perm=n_perm, seed=seed + 1, variant="long_range",
    )
    pairs = [(p, t) for p, t in zip(pred_list, truth_list) if p.shape[0] >= 3]
    mantel = mantel_suite(pairs, n_perm=group_perm, seed=seed + 2)

    report = {
        "n_subjects": len(test),
        "short_range": {"mmd": short.statistic, "p": short.p_value, "bandwidth": short.bandwidth},
        "long_range": {"mmd": long.statistic, "p": long.p_value, "bandwidth": long.bandwidth},
        "mantel": {
            "mean_r": mantel.mean_r,
            "ci": [mantel.ci_low, mantel.ci_high],
            "fisher_t_p": mantel.fisher_t_p,
            "group_perm_p": mantel.group_perm_p,
            "n_subjects": mantel.n_subjects,
        },
    }
    if per_feature:
        results = per_feature_mmd(
            transitions_short(pred_list), transitions_short(truth_list),
            schema.feature_names, n_perm=n_perm, seed=seed + 3,
        )
        report["per_feature"] = [
            {"feature": r.variant[len("per_feature(") : -1], "mmd": r.statistic, "p": r.p_value}
            for r in results
        ]
    text = json.dumps(report, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n")
    click.echo(text)


def _env_factory(schema, stats, dynamics, gmms, cohort: str):
    config = EnvConfig(cohort=Cohort(cohort))
    return lambda: Env(schema, config, dynamics, stats, gmms)


@main.command()
@click.option("--policy", "policy_name", type=str, required=True)
@click.option("--dynamics", "dynamics_sel", type=str, required=True)
@click.option("--stats", "stats_path", type=str, required=True)
@click.option("--gmm-dir", type=str, required=True)
@click.option("--cohort", type=str, default="all", show_default=True)
@click.option("--schema", "schema_path", type=str, default=None)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--steps", type=int, default=None, help="Cap on episode length.")
@click.option("--actions-file", type=str, default=None, help="JSON list of action-bit lists (overrides the policy).")
@click.option("--out", "out_path", type=click.Path(), default=None)
@pipeline_errors
def rollout(
    policy_name, dynamics_sel, stats_path, gmm_dir, cohort, schema_path, seed,
    steps, actions_file, out_path,
):
    """Roll one policy-driven (or scripted) episode; emits a JSONL record."""
    schema = _load_schema(schema_path)
    if not Path(stats_path).exists():
        raise FileNotFoundError(stats_path)
    stats = cohortio.read_stats(stats_path, schema)
    dynamics = load_dynamics(dynamics_sel, schema)
    gmms = load_gmms(gmm_dir)
    if cohort not in gmms:
        raise ingest.IngestError(f"no start-state model for cohort {cohort!r}")
    policy = build_policy(policy_name, schema, stats)
    script = None
    if actions_file:
        if not Path(actions_file).exists():
            raise FileNotFoundError(actions_file)
        raw = json.loads(Path(actions_file).read_text())
        script = [ActionVector(np.array(bits, dtype=bool)) for bits in raw]
    env = _env_factory(schema, stats, dynamics, gmms, cohort)()
    record = run_rollout(policy, env, seed=seed, max_steps=steps, action_script=script)
    text = record.to_jsonl()
    if out_path:
        Path(out_path).write_text(text)
    else:
        click.echo(text, nl=False)


@main.command()
@click.option("--policies", "policy_names", type=str, required=True, help="Comma-separated selectors.")
@click.option("--dynamics", "dynamics_sel", type=str, required=True)
@click.option("--stats", "stats_path", type=str, required=True)
@click.option("--gmm-dir", type=str, required=True)
@click.option("--cohort", type=str, default="all", show_default=True)
@click.option("--schema", "schema_path", type=str, default=None)
@click.option("--n", "n_patients", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@pipeline_errors
def evaluate(
    policy_names, dynamics_sel, stats_path, gmm_dir, cohort, schema_path,
    n_patients, seed, out_path,
):
    """Shared-start-state comparison across policies."""
    schema = _load_schema(schema_path)
    if not Path(stats_path).exists():
        raise FileNotFoundError(stats_path)
    stats = cohortio.read_stats(stats_path, schema)
    dynamics = load_dynamics(dynamics_sel, schema)
    gmms = load_gmms(gmm_dir)
    policies = [build_policy(n.strip(), schema, stats) for n in policy_names.split(",")]
    report = run_evaluate(
        policies, _env_factory(schema, stats, dynamics, gmms, cohort),
        n_patients=n_patients, seed=seed,
    )
    click.echo(report.format_table())
    doc = {
        "n_patients": report.n_patients,
        "seed": report.seed,
        "summary": report.summary(),
        "wilcoxon_one_sided": {
            f"{report.policy_names[i]}>{report.policy_names[j]}": report.wilcoxon_one_sided[i, j]
            for i in range(len(report.policy_names))
            for j in range(len(report.policy_names))
            if i != j
        },
    }
    if out_path:
        Path(out_path).write_text(json.dumps(doc, indent=2) + "\n")
        Path(out_path).with_suffix(".csv").write_text(report.format_csv())


@main.command()
@click.option("--policy", "policy_name", type=str, required=True)
@click.option("--action", "action_name", type=str, required=True)
@click.option("--stats", "stats_path", type=str, required=True)
@click.option("--gmm-dir", type=str, required=True)
@click.option("--cohort", type=str, default="all", show_default=True)
@click.option("--schema", "schema_path", type=str, default=None)
@click.option("--n-states", type=int, default=50, show_default=True)
@click.option("--n-samples", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@pipeline_errors
def attribute(
    policy_name, action_name, stats_path, gmm_dir, cohort, schema_path,
    n_states, n_samples, seed, out_path,
):
    """Per-feature attribution of a policy's action selection."""
    schema = _load_schema(schema_path)
    if not Path(stats_path).exists():
        raise FileNotFoundError(stats_path)
    stats = cohortio.read_stats(stats_path, schema)
    gmms = load_gmms(gmm_dir)
    if cohort not in gmms:
        raise ingest.IngestError(f"no start-state model for cohort {cohort!r}")
    policy = build_policy(policy_name, schema, stats)
    action_index = schema.action_index(action_name)
    rng = np.random.default_rng(seed)
    states = [sample_raw(gmms[cohort], rng, schema, stats) for _ in range(n_states)]
    values = shapley_attribution(
        policy, states, action_index, n_samples=n_samples, seed=seed
    )
    lines = ["feature,attribution"]
    for name, v in zip(schema.feature_names, values):
        lines.append(f"{name},{float(v)!r}")
    text = "\n".join(lines) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    click.echo(text, nl=False)


@main.command()
@click.option("--host", type=str, default="127.0.0.1", show_default=True, envvar="COGSIM_HOST")
@click.option("--port", type=int, default=8440, show_default=True, envvar="COGSIM_PORT")
@click.option("--dynamics", "dynamics_sel", type=str, required=True, envvar="COGSIM_DYNAMICS")
@click.option("--stats", "stats_path", type=str, required=True, envvar="COGSIM_STATS")
@click.option("--gmm-dir", type=str, required=True, envvar="COGSIM_GMM_DIR")
@click.option("--clinician-weights", type=str, default=None, envvar="COGSIM_CLINICIAN")
@click.option("--cem-weights", type=str, default=None, envvar="COGSIM_CEM")
@click.option("--schema", "schema_path", type=str, default=None, envvar="COGSIM_SCHEMA")
@click.option("--ttl", type=float, default=7200.0, show_default=True, envvar="COGSIM_TTL")
@click.option("--session-log-dir", type=str, default=None, envvar="COGSIM_SESSION_LOG_DIR")
@pipeline_errors
def serve(
    host, port, dynamics_sel, stats_path, gmm_dir, clinician_weights, cem_weights,
    schema_path, ttl, session_log_dir,
):
    """Run the interactive session service."""
    import uvicorn

    schema = _load_schema(schema_path)
    if not Path(stats_path).exists():
        raise FileNotFoundError(stats_path)
    stats = cohortio.read_stats(stats_path, schema)
    dynamics = load_dynamics(dynamics_sel, schema)
    gmms = load_gmms(gmm_dir)
    policies = {
        "no_medication": NoMedicationPolicy(schema),
        "heuristic": HeuristicPolicy(schema),
    }
    if clinician_weights:
        policies["clinician"] = build_policy(f"clinician:{clinician_weights}", schema, stats)
    if cem_weights:
        policies["cem"] = build_policy(f"cem:{cem_weights}", schema, stats)
    artifacts = ServiceArtifacts(
        schema=schema, stats=stats, dynamics=dynamics, start_models=gmms, policies=policies
    )
    app = create_app(artifacts, ttl_seconds=ttl, log_dir=session_log_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
