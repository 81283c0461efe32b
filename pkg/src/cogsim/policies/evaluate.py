"""Shared-start-state policy comparison with paired significance testing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..env import Env, rollout
from .wilcoxon import wilcoxon_signed_rank


@dataclass
class EvalReport:
    policy_names: list[str]
    cumulative: np.ndarray  # (n_policies, n_patients)
    per_step: np.ndarray
    final_memory: np.ndarray
    initial_observations: np.ndarray  # (n_patients, n_features)
    wilcoxon_one_sided: np.ndarray  # p[i, j]: policy i exceeds policy j
    n_patients: int
    seed: int

    def summary(self) -> list[dict]:
        out = []
        for i, name in enumerate(self.policy_names):
            row = {"policy": name}
            for label, arr in (
                ("cumulative_reward", self.cumulative[i]),
                ("per_step_reward", self.per_step[i]),
                ("final_memory", self.final_memory[i]),
            ):
                mean = float(arr.mean())
                se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
                row[label] = {
                    "mean": mean,
                    "ci_low": mean - 1.96 * se,
                    "ci_high": mean + 1.96 * se,
                }
            out.append(row)
        return out

    def format_table(self) -> str:
        lines = [
            f"{'Policy':<16} {'Cumulative Reward':>22} {'Per-step Reward':>20} {'Final Memory':>18}"
        ]
        for row in self.summary():
            c = row["cumulative_reward"]
            s = row["per_step_reward"]
            m = row["final_memory"]
            lines.append(
                f"{row['policy']:<16} "
                f"{c['mean']:>9.3f} [{c['ci_low']:.3f},{c['ci_high']:.3f}]"
                f" {s['mean']:>8.3f} [{s['ci_low']:.3f},{s['ci_high']:.3f}]"
                f" {m['mean']:>7.3f} [{m['ci_low']:.3f},{m['ci_high']:.3f}]"
            )
        return "\n".join(lines)

    def format_csv(self) -> str:
        """Delimited summary table, one row per policy."""
        lines = [
            "policy,cumulative_reward,cumulative_ci_low,cumulative_ci_high,"
            "per_step_reward,per_step_ci_low,per_step_ci_high,"
            "final_memory,final_memory_ci_low,final_memory_ci_high"
        ]
        for row in self.summary():
            cells = [row["policy"]]
            for key in ("cumulative_reward", "per_step_reward", "final_memory"):
                block = row[key]
                cells += [repr(block["mean"]), repr(block["ci_low"]), repr(block["ci_high"])]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def evaluate(
    policies: Sequence,
    env_factory: Callable[[], Env],
    n_patients: int = 1000,
    seed: int = 42,
    max_steps: int | None = None,
) -> EvalReport:
    """Roll every policy from the same seeded start states and compare.

    Patient i resets the environment with a seed derived from (*seed*, i),
    so all policies face identical initial states (and identical forecast
    noise streams under stochastic dynamics).
    """
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    names = [p.name for p in policies]
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_patients)]

    env = env_factory()
    mem_i = env.schema.memory_index
    n_pol = len(policies)
    cumulative = np.zeros((n_pol, n_patients))
    per_step = np.zeros((n_pol, n_patients))
    final_memory = np.zeros((n_pol, n_patients))
    initial = np.zeros((n_pol, n_patients, env.schema.n_features))

    for pi, policy in enumerate(policies):
        for i, s in enumerate(seeds):
            record = rollout(policy, env, seed=s, max_steps=max_steps)
            initial[pi, i] = record.initial_observation
            cumulative[pi, i] = record.cumulative_reward
            n_steps = max(len(record.steps), 1)
            per_step[pi, i] = record.cumulative_reward / n_steps
            last_obs = record.steps[-1].observation if record.steps else record.initial_observation
            final_memory[pi, i] = last_obs[mem_i]

    if n_pol > 1 and not np.allclose(initial[0], initial[1:]):
        raise RuntimeError("start states diverged across policies; seeding is broken")

    pmat = np.ones((n_pol, n_pol))
    for i in range(n_pol):
        for j in range(n_pol):
            if i != j:
                pmat[i, j] = wilcoxon_signed_rank(cumulative[i], cumulative[j], one_sided=True)

    return EvalReport(
        policy_names=names,
        cumulative=cumulative,
        per_step=per_step,
        final_memory=final_memory,
        initial_observations=initial[0],
        wilcoxon_one_sided=pmat,
        n_patients=n_patients,
        seed=seed,
    )
