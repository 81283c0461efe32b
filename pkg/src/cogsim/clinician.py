"""Behavior-cloned prescriber with Monte Carlo dropout uncertainty.

A single-hidden-layer network maps standardized patient states to per-class
prescription logits, trained with class-balanced binary cross-entropy
(positive weights (neg/pos)^0.55). Keeping dropout active at prediction time
yields a spread of sampled probabilities that separates irreducible outcome
noise from model uncertainty; the metric battery covers hard-prediction
quality and probability calibration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorio
from .dynamics.loss import bce_with_logits
from .policies.base import repair_action
from .schema import ActionVector, FeatureSchema, PatientState, ScalerStats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BcConfig:
    input_dim: int = 21
    n_actions: int = 17
    hidden_width: int = 128
    dropout_p: float = 0.2
    pos_weight_exponent: float = 0.55
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    mc_samples: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not (0.0 < self.dropout_p < 1.0):
            raise ValueError("dropout_p must lie in (0, 1)")
        if self.pos_weight_exponent < 0:
            raise ValueError("pos_weight_exponent must be >= 0")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "n_actions": self.n_actions,
            "hidden_width": self.hidden_width,
            "dropout_p": self.dropout_p,
            "pos_weight_exponent": self.pos_weight_exponent,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "mc_samples": self.mc_samples,
        }


@dataclass
class BcNet:
    config: BcConfig
    w1: np.ndarray  # (input_dim, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, n_actions)
    b2: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def unpack(self, flat: np.ndarray) -> "BcNet":
        c = self.config
        sizes = [c.input_dim * c.hidden_width, c.hidden_width, c.hidden_width * c.n_actions, c.n_actions]
        parts = np.split(np.asarray(flat, dtype=float), np.cumsum(sizes)[:-1])
        return replace(
            self,
            w1=parts[0].reshape(c.input_dim, c.hidden_width),
            b1=parts[1].copy(),
            w2=parts[2].reshape(c.hidden_width, c.n_actions),
            b2=parts[3].copy(),
        )

    def logits(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Forward pass; *mask* enables (inverted) dropout on the hidden layer."""
        x = np.atleast_2d(x)
        h = np.tanh(x @ self.w1 + self.b1)
        if mask is not None:
            h = h * mask / (1.0 - self.config.dropout_p)
        return h @ self.w2 + self.b2

    def probs(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits(x, mask)))

    def save(self, path: str | Path, schema_fingerprint: str = "") -> None:
        tensorio.save_tensors(
            path,
            kind="bc-weights",
            meta={"config": self.config.to_dict(), "schema_fingerprint": schema_fingerprint},
            tensors={"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2},
        )

    @classmethod
    def load(cls, path: str | Path) -> "BcNet":
        meta, t = tensorio.require_kind(path, "bc-weights")
        return cls(config=BcConfig(**meta["config"]), w1=t["w1"], b1=t["b1"], w2=t["w2"], b2=t["b2"])


def init_bc(config: BcConfig, seed: int) -> BcNet:
    rng = np.random.default_rng(seed)
    return BcNet(
        config=config,
        w1=rng.normal(0.0, 1.0 / np.sqrt(config.input_dim), (config.input_dim, config.hidden_width)),
        b1=np.zeros(config.hidden_width),
        w2=rng.normal(0.0, 1.0 / np.sqrt(config.hidden_width), (config.hidden_width, config.n_actions)),
        b2=np.zeros(config.n_actions),
    )


def pos_weights(labels: np.ndarray, exponent: float = 0.55) -> np.ndarray:
    """Per-action positive-class weights (neg/pos)**exponent.

    Never-prescribed classes would get an infinite ratio; they are capped at
    n**exponent (the all-negative limit) with a logged warning.
    """
    labels = np.asarray(labels, dtype=float)
    if labels.size == 0:
        raise ValueError("empty dataset")
    n = labels.shape[0]
    pos = labels.sum(axis=0)
    neg = n - pos
    out = np.empty(labels.shape[1])
    for e in range(labels.shape[1]):
        if pos[e] == 0:
            log.warning("action %d has no positive examples; capping weight at n**%.2f", e, exponent)
            out[e] = n**exponent
        else:
            out[e] = (neg[e] / pos[e]) ** exponent
    return out


def bc_loss_and_grad(
    net: BcNet,
    x: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    mask: np.ndarray | None,
) -> tuple[float, BcNet]:
    """Class-balanced BCE and analytic gradients (dropout mask held fixed)."""
    n, a = y.shape
    h_lin = x @ net.w1 + net.b1
    h = np.tanh(h_lin)
    if mask is not None:
        hd = h * mask / (1.0 - net.config.dropout_p)
    else:
        hd = h
    z = hd @ net.w2 + net.b2
    sig = 1.0 / (1.0 + np.exp(-z))

    per_cell = weights[None, :] * y * bce_with_logits(z, np.ones_like(z)) + (
        1.0 - y
    ) * bce_with_logits(z, np.zeros_like(z))
    loss = float(per_cell.mean())

    dz = (weights[None, :] * y * (sig - 1.0) + (1.0 - y) * sig) / (n * a)
    dw2 = hd.T @ dz
    db2 = dz.sum(axis=0)
    dhd = dz @ net.w2.T
    dh = dhd * mask / (1.0 - net.config.dropout_p) if mask is not None else dhd
    dpre = dh * (1.0 - h**2)
    dw1 = x.T @ dpre
    db1 = dpre.sum(axis=0)
    return loss, replace(net, w1=dw1, b1=db1, w2=dw2, b2=db2)


@dataclass
class BcHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)


def train_bc(
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    config: BcConfig | None = None,
    seed: int = 42,
) -> tuple[BcNet, BcHistory]:
    """Adam training with dropout active; aborts on non-finite loss."""
    x_train, y_train = train
    x_val, y_val = val
    config = config or BcConfig(input_dim=x_train.shape[1], n_actions=y_train.shape[1])
    weights = pos_weights(y_train, config.pos_weight_exponent)

    rng = np.random.default_rng(seed)
    net = init_bc(config, seed)
    theta = net.pack()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0
    history = BcHistory()
    n = x_train.shape[0]

    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            mask = (
                rng.random((idx.size, config.hidden_width)) >= config.dropout_p
            ).astype(float)
            loss, grad = bc_loss_and_grad(net.unpack(theta), x_train[idx], y_train[idx], weights, mask)
            if not np.isfinite(loss):
                raise RuntimeError("behavior-cloning loss became non-finite")
            g = grad.pack()
            step += 1
            m1 = config.adam_beta1 * m1 + (1 - config.adam_beta1) * g
            m2 = config.adam_beta2 * m2 + (1 - config.adam_beta2) * g * g
            mhat = m1 / (1 - config.adam_beta1**step)
            vhat = m2 / (1 - config.adam_beta2**step)
            theta = theta - config.lr * mhat / (np.sqrt(vhat) + config.adam_eps)
            epoch_loss.append(loss)
        net = net.unpack(theta)
        val_loss, _ = bc_loss_and_grad(net, x_val, y_val, weights, None)
        history.train_loss.append(float(np.mean(epoch_loss)))
        history.val_loss.append(val_loss)
    return net, history


def mc_predict(
    net: BcNet,
    x: np.ndarray,
    mc_samples: int = 50,
    seed: int = 42,
) -> tuple[np.ndarray, float, float]:
    """Dropout-sampled predictive distribution.

    Returns (mean probabilities, aleatoric, epistemic): aleatoric is the mean
    Bernoulli variance p(1-p) across samples and actions; epistemic is the
    across-sample variance of p, averaged over actions.
    """
    rng = np.random.default_rng(seed)
    x = np.atleast_2d(x)
    samples = np.empty((mc_samples, x.shape[0], net.config.n_actions))
    for s in range(mc_samples):
        mask = (rng.random((x.shape[0], net.config.hidden_width)) >= net.config.dropout_p).astype(float)
        samples[s] = net.probs(x, mask)
    mean_probs = samples.mean(axis=0)
    aleatoric = float(np.mean(samples * (1.0 - samples)))
    epistemic = float(np.mean(samples.var(axis=0, ddof=0)))
    return (mean_probs[0] if x.shape[0] == 1 else mean_probs), aleatoric, epistemic


# -- metric battery ------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationReport:
    exact_match: float
    hamming: float
    f1_macro: float
    f1_micro: float
    brier: float
    ece: float
    ace: float
    log_likelihood: float
    aleatoric: float | None = None
    epistemic: float | None = None


def _binned_gap(probs: np.ndarray, labels: np.ndarray, bins: list[np.ndarray]) -> float:
    total = probs.size
    gap = 0.0
    for idx in bins:
        if idx.size == 0:
            continue
        gap += idx.size / total * abs(labels[idx].mean() - probs[idx].mean())
    return float(gap)


def bc_metrics(
    probs: np.ndarray,
    labels: np.ndarray,
    threshold: float = 0.5,
    ece_bins: int = 15,
    aleatoric: float | None = None,
    epistemic: float | None = None,
) -> CalibrationReport:
    """Hard-prediction and calibration metrics pooled over all actions.

    Macro F1 averages per-action F1, counting an action as 0 when it has
    positives in the predicted/true union but no true positives, and skipping
    actions absent from both labels and predictions. The calibration gaps use
    equal-width bins (expected) and equal-frequency bins (adaptive).
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.atleast_2d(np.asarray(labels, dtype=float))
    if probs.shape != labels.shape:
        raise ValueError("probs and labels must align")
    preds = (probs > threshold).astype(float)

    exact = float(np.mean(np.all(preds == labels, axis=1)))
    hamming = float(np.mean(preds != labels))

    f1s = []
    tp_total = fp_total = fn_total = 0.0
    for e in range(labels.shape[1]):
        tp = float(np.sum((preds[:, e] == 1) & (labels[:, e] == 1)))
        fp = float(np.sum((preds[:, e] == 1) & (labels[:, e] == 0)))
        fn = float(np.sum((preds[:, e] == 0) & (labels[:, e] == 1)))
        tp_total, fp_total, fn_total = tp_total + tp, fp_total + fp, fn_total + fn
        if tp + fp + fn == 0:
            continue  # action never occurs in labels or predictions
        f1s.append(2 * tp / (2 * tp + fp + fn) if tp > 0 else 0.0)
    f1_macro = float(np.mean(f1s)) if f1s else 0.0
    denom = 2 * tp_total + fp_total + fn_total
    f1_micro = float(2 * tp_total / denom) if denom > 0 else 0.0

    flat_p = probs.ravel()
    flat_y = labels.ravel()
    brier = float(np.mean((flat_p - flat_y) ** 2))

    edges = np.linspace(0.0, 1.0, ece_bins + 1)
    which = np.clip(np.digitize(flat_p, edges[1:-1], right=False), 0, ece_bins - 1)
    width_bins = [np.where(which == b)[0] for b in range(ece_bins)]
    ece = _binned_gap(flat_p, flat_y, width_bins)

    order = np.argsort(flat_p, kind="stable")
    freq_bins = [np.asarray(chunk) for chunk in np.array_split(order, ece_bins)]
    ace = _binned_gap(flat_p, flat_y, freq_bins)

    clipped = np.clip(flat_p, 1e-12, 1.0 - 1e-12)
    ll = float(np.mean(flat_y * np.log(clipped) + (1 - flat_y) * np.log(1 - clipped)))

    return CalibrationReport(
        exact_match=exact,
        hamming=hamming,
        f1_macro=f1_macro,
        f1_micro=f1_micro,
        brier=brier,
        ece=ece,
        ace=ace,
        log_likelihood=ll,
        aleatoric=aleatoric,
        epistemic=epistemic,
    )


def evaluate_bc(
    net: BcNet,
    x: np.ndarray,
    labels: np.ndarray,
    mc_samples: int | None = None,
    seed: int = 42,
) -> CalibrationReport:
    """Full probabilistic evaluation on a held-out set via dropout sampling."""
    mc = mc_samples or net.config.mc_samples
    probs, aleatoric, epistemic = mc_predict(net, x, mc_samples=mc, seed=seed)
    return bc_metrics(np.atleast_2d(probs), labels, aleatoric=aleatoric, epistemic=epistemic)


class BcPolicy:
    """Thresholded (optionally dropout-averaged) prescriber policy."""

    def __init__(
        self,
        net: BcNet,
        schema: FeatureSchema,
        stats: ScalerStats,
        mode: str = "threshold",
        mc_samples: int | None = None,
        seed: int = 42,
    ):
        if mode not in ("threshold", "mc_mean_threshold"):
            raise ValueError(f"unknown mode {mode!r}")
        self.net = net
        self.schema = schema
        self.stats = stats
        self.mode = mode
        self.mc_samples = mc_samples or net.config.mc_samples
        self.seed = seed
        self.name = "clinician"
        self.deterministic = True  # the MC seed is fixed per instance

    def _probs(self, observation: PatientState) -> np.ndarray:
        z = (observation.values - self.stats.mean) / self.stats.std
        if self.mode == "threshold":
            return self.net.probs(z)[0]
        probs, _, _ = mc_predict(self.net, z, mc_samples=self.mc_samples, seed=self.seed)
        return probs

    def act(self, observation: PatientState) -> ActionVector:
        return repair_action(self._probs(observation) > 0.5, self.schema)

    def action_score(self, observation: PatientState, action_index: int) -> float:
        return float(self._probs(observation)[action_index])
