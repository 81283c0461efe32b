"""Initial-state distribution: full-covariance Gaussian mixtures over first visits.

Mixtures are fitted with EM (k-means++-style seeded initialization, diagonal
regularization) for a sweep of component counts; the count with the lowest
Bayesian Information Criterion wins. Three cohort variants are supported:
everyone, cognitively healthy, and impaired (memory score below the clinical
threshold). Sampling snaps indicator features back onto valid 0/1 patterns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorio
from .schema import (
    FeatureSchema,
    PatientState,
    ScalerStats,
    Trajectory,
    ZSCALED,
    inverse_scale,
)

IMPAIRMENT_THRESHOLD = -0.1


class StartStateError(RuntimeError):
    """Raised when a mixture cannot be fitted."""


class Cohort(str, Enum):
    ALL = "all"
    HEALTHY = "healthy"
    IMPAIRED = "impaired"


@dataclass(frozen=True)
class CohortFilter:
    """Row filter on the raw memory score; impaired means score < threshold."""

    variant: Cohort = Cohort.ALL
    threshold: float = IMPAIRMENT_THRESHOLD

    def mask(self, raw_memory: np.ndarray) -> np.ndarray:
        raw_memory = np.asarray(raw_memory, dtype=float)
        if self.variant == Cohort.ALL:
            return np.ones_like(raw_memory, dtype=bool)
        impaired = raw_memory < self.threshold
        return impaired if self.variant == Cohort.IMPAIRED else ~impaired


@dataclass
class GmmModel:
    """Fitted mixture over standardized start states."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)
    log_likelihood: float
    n_samples: int
    seed: int
    cohort: str = Cohort.ALL.value
    ll_trace: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mixture_mean(self) -> np.ndarray:
        return self.weights @ self.means

    def save(self, path: str | Path, schema_fingerprint: str = "") -> None:
        tensorio.save_tensors(
            path,
            kind="gmm-model",
            meta={
                "log_likelihood": self.log_likelihood,
                "n_samples": self.n_samples,
                "seed": self.seed,
                "cohort": self.cohort,
                "schema_fingerprint": schema_fingerprint,
            },
            tensors={
                "weights": self.weights,
                "means": self.means,
                "covariances": self.covariances,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "GmmModel":
        meta, tensors = tensorio.require_kind(path, "gmm-model")
        return cls(
            weights=tensors["weights"],
            means=tensors["means"],
            covariances=tensors["covariances"],
            log_likelihood=meta["log_likelihood"],
            n_samples=meta["n_samples"],
            seed=meta["seed"],
            cohort=meta.get("cohort", Cohort.ALL.value),
        )


def first_visit_rows(trajectories: Sequence[Trajectory]) -> np.ndarray:
    return np.stack([t.visits[0].state.values for t in trajectories])


def _log_gaussians(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """log N(x | mu_k, Sigma_k) for all rows and components.

    Mahalanobis terms go through the inverted Cholesky factor so each
    component costs one small inverse plus one matmul.
    """
    n, d = x.shape
    k = means.shape[0]
    chols = np.linalg.cholesky(covs)  # (k, d, d)
    logdets = 2.0 * np.log(np.diagonal(chols, axis1=1, axis2=2)).sum(axis=1)
    out = np.empty((n, k))
    for j in range(k):
        inv = np.linalg.inv(chols[j])
        half = (x - means[j]) @ inv.T
        out[:, j] = np.einsum("nd,nd->n", half, half)
    return -0.5 * (d * np.log(2 * np.pi) + logdets[None, :] + out)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _kmeanspp_means(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            np.stack([np.sum((x - c) ** 2, axis=1) for c in centers]), axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    return np.stack(centers)


def _kmeans_init(
    x: np.ndarray, k: int, rng: np.random.Generator, reg: float, iters: int = 10
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hard-clustering warm start: weights/means/covariances from k-means cells."""
    n, d = x.shape
    means = _kmeanspp_means(x, k, rng)
    assign = np.zeros(n, dtype=int)
    for _ in range(iters):
        d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if members.shape[0]:
                means[j] = members.mean(axis=0)
    weights = np.empty(k)
    covs = np.empty((k, d, d))
    global_cov = np.cov(x.T, ddof=0).reshape(d, d) + reg * np.eye(d)
    for j in range(k):
        members = x[assign == j]
        weights[j] = max(members.shape[0], 1) / n
        if members.shape[0] >= 2:
            covs[j] = np.cov(members.T, ddof=0).reshape(d, d) + reg * np.eye(d)
        else:
            covs[j] = global_cov
    weights = weights / weights.sum()
    return weights, means, covs


def fit_em(
    data: np.ndarray,
    k: int,
    seed: int = 42,
    reg: float = 1e-6,
    tol: float = 1e-6,
    max_iter: int = 500,
    max_retries: int = 3,
    cohort: str = Cohort.ALL.value,
) -> GmmModel:
    """EM fit with monotone log-likelihood; degenerate components trigger re-init."""
    x = np.asarray(data, dtype=float)
    n, d = x.shape
    if n < k:
        raise StartStateError(f"need at least {k} rows to fit {k} components")

    rng = np.random.default_rng(seed)
    for attempt in range(max_retries + 1):
        weights, means, covs = _kmeans_init(x, k, rng, reg)

        trace: list[float] = []
        degenerate = False
        center = x.mean(axis=0)
        xc = x - center  # globally centered copy stabilizes the moment form
        eye = reg * np.eye(d)
        for _ in range(max_iter):
            log_prob = _log_gaussians(x, means, covs) + np.log(weights)
            norm = _logsumexp(log_prob, axis=1)
            ll = float(norm.sum())
            resp = np.exp(log_prob - norm[:, None])

            nk = resp.sum(axis=0)
            if np.any(nk / n < 1e-8):
                degenerate = True
                break
            weights = nk / n
            means = (resp.T @ x) / nk[:, None]
            mu_c = means - center
            covs = np.empty((k, d, d))
            for j in range(k):
                m2 = (resp[:, j][:, None] * xc).T @ xc
                covs[j] = m2 / nk[j] - np.outer(mu_c[j], mu_c[j]) + eye

            trace.append(ll)
            # Convergence on the mean per-row log-likelihood change.
            if len(trace) > 1 and abs(trace[-1] - trace[-2]) / n < tol:
                break

        if not degenerate and trace:
            final_ll = float(_logsumexp(_log_gaussians(x, means, covs) + np.log(weights), 1).sum())
            trace.append(final_ll)
            return GmmModel(
                weights=weights,
                means=means,
                covariances=covs,
                log_likelihood=final_ll,
                n_samples=n,
                seed=seed,
                cohort=cohort,
                ll_trace=trace,
            )
    raise StartStateError(f"EM failed after {max_retries + 1} attempts (degenerate components)")


def n_free_parameters(k: int, d: int) -> int:
    """Weights (K-1) + means (K d) + symmetric covariances (K d(d+1)/2)."""
    return (k - 1) + k * d + k * d * (d + 1) // 2


def bic(model: GmmModel, data: np.ndarray) -> float:
    """-2 log L + p ln n evaluated on *data*."""
    x = np.asarray(data, dtype=float)
    log_prob = _log_gaussians(x, model.means, model.covariances) + np.log(model.weights)
    ll = float(_logsumexp(log_prob, axis=1).sum())
    p = n_free_parameters(model.k, model.dim)
    return -2.0 * ll + p * np.log(x.shape[0])


def select_k(
    data: np.ndarray,
    k_range: Sequence[int] | None = None,
    seed: int = 42,
    reg: float = 1e-6,
    cohort: str = Cohort.ALL.value,
) -> GmmModel:
    """Fit every candidate component count and keep the lowest-BIC model.

    The candidate list is clipped at n/10 for small data sets (the full sweep
    is intended for cohort-scale fits); ties break toward smaller K.
    """
    x = np.asarray(data, dtype=float)
    n = x.shape[0]
    if k_range is None:
        k_range = range(1, 101)
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise StartStateError("empty k_range")
    cap = max(1, n // 10)
    usable = [k for k in ks if k <= min(n, cap)] or [min(ks)]

    best: tuple[float, int, GmmModel] | None = None
    for k in usable:
        try:
            model = fit_em(x, k, seed=seed + k, reg=reg, cohort=cohort)
        except StartStateError:
            continue
        score = bic(model, x)
        if best is None or score < best[0] - 1e-12:
            best = (score, k, model)
    if best is None:
        raise StartStateError("no component count could be fitted")
    return best[2]


def snap_indicators(values: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Project a real-valued draw onto schema-valid indicator patterns.

    One-hot groups take their argmax; remaining binary features threshold
    at 0.5. Continuous features pass through.
    """
    out = np.asarray(values, dtype=float).copy()
    grouped: set[int] = set()
    for idx in schema.onehot_group_indices().values():
        grouped.update(int(i) for i in idx)
        winner = idx[int(np.argmax(out[idx]))]
        out[idx] = 0.0
        out[winner] = 1.0
    for j in np.where(schema.binary_mask)[0]:
        if int(j) not in grouped:
            out[j] = 1.0 if out[j] >= 0.5 else 0.0
    return out


def sample(
    model: GmmModel,
    rng: np.random.Generator,
    schema: FeatureSchema,
) -> PatientState:
    """Draw one standardized start state (indicators snapped to valid patterns)."""
    comp = int(rng.choice(model.k, p=model.weights / model.weights.sum()))
    chol = np.linalg.cholesky(model.covariances[comp])
    raw_draw = model.means[comp] + chol @ rng.standard_normal(model.dim)
    return PatientState(snap_indicators(raw_draw, schema), space=ZSCALED)


def fit_cohort_models(
    trajectories: Sequence[Trajectory],
    stats: ScalerStats,
    schema: FeatureSchema,
    k_range: Sequence[int] | None = None,
    seed: int = 42,
) -> dict[str, GmmModel]:
    """Fit the three cohort variants from standardized first visits."""
    rows_raw = first_visit_rows(list(trajectories))
    z = (rows_raw - stats.mean) / stats.std
    raw_memory = rows_raw[:, schema.memory_index]
    out: dict[str, GmmModel] = {}
    for variant in Cohort:
        mask = CohortFilter(variant).mask(raw_memory)
        if mask.sum() < 2:
            raise StartStateError(f"cohort {variant.value!r} has fewer than 2 rows")
        out[variant.value] = select_k(z[mask], k_range=k_range, seed=seed, cohort=variant.value)
    return out


def sample_raw(
    model: GmmModel,
    rng: np.random.Generator,
    schema: FeatureSchema,
    stats: ScalerStats,
) -> PatientState:
    """Convenience: one draw reported in raw units."""
    return inverse_scale(sample(model, rng, schema), stats)
