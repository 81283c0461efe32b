"""Causal mixture-of-experts transformer forward pass (inference only).

The forecaster embeds per-visit input vectors, applies pre-norm transformer
blocks whose feed-forward stage routes each position to exactly one of the
expert networks, and reads the next-state prediction off a linear head:
continuous features as values in standardized space, binary features as
logits. The exact arithmetic is fixed here and mirrored byte-for-byte by the
serialized weights container.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..schema import FeatureSchema, ScalerStats, Visit, assemble_model_input
from .. import tensorio

LN_EPS = 1e-5


class DynamicsError(ValueError):
    """Raised on malformed weights or inputs."""


@dataclass(frozen=True)
class MoEConfig:
    n_layers: int = 3
    embed_dim: int = 256
    n_heads: int = 4
    n_experts: int = 8
    top_k: int = 1
    dropout: float = 0.3  # training-time only; inference never drops
    input_dim: int = 39
    n_targets: int = 21
    ff_dim: int | None = None

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads:
            raise DynamicsError("embed_dim must be divisible by n_heads")
        if self.top_k > self.n_experts:
            raise DynamicsError("top_k cannot exceed n_experts")
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", 4 * self.embed_dim)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "embed_dim": self.embed_dim,
            "n_heads": self.n_heads,
            "n_experts": self.n_experts,
            "top_k": self.top_k,
            "dropout": self.dropout,
            "input_dim": self.input_dim,
            "n_targets": self.n_targets,
            "ff_dim": self.ff_dim,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MoEConfig":
        return cls(**doc)


@dataclass
class RouterStats:
    """Per-layer expert assignment fractions and mean router probabilities."""

    assign_fraction: np.ndarray  # (n_layers, n_experts), sums to 1 per layer
    mean_prob: np.ndarray  # (n_layers, n_experts), each in [0, 1]

    def load_balance(self) -> float:
        """Switch-style auxiliary loss, averaged over layers: E * sum_e f_e * P_e."""
        n_experts = self.assign_fraction.shape[1]
        per_layer = n_experts * np.sum(self.assign_fraction * self.mean_prob, axis=1)
        return float(per_layer.mean())


@dataclass
class WeightsBundle:
    """Named tensors for the forecaster plus config echo and schema fingerprint."""

    config: MoEConfig
    schema_fingerprint: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def validate(self) -> "WeightsBundle":
        c = self.config
        expect: dict[str, tuple[int, ...]] = {
            "embed.w": (c.input_dim, c.embed_dim),
            "embed.b": (c.embed_dim,),
            "final_ln.g": (c.embed_dim,),
            "final_ln.b": (c.embed_dim,),
            "head.w": (c.embed_dim, c.n_targets),
            "head.b": (c.n_targets,),
        }
        for i in range(c.n_layers):
            p = f"layer{i}."
            expect.update(
                {
                    p + "ln1.g": (c.embed_dim,),
                    p + "ln1.b": (c.embed_dim,),
                    p + "attn.wq": (c.n_heads, c.embed_dim, c.head_dim),
                    p + "attn.wk": (c.n_heads, c.embed_dim, c.head_dim),
                    p + "attn.wv": (c.n_heads, c.embed_dim, c.head_dim),
                    p + "attn.wo": (c.embed_dim, c.embed_dim),
                    p + "attn.bo": (c.embed_dim,),
                    p + "ln2.g": (c.embed_dim,),
                    p + "ln2.b": (c.embed_dim,),
                    p + "router.w": (c.n_experts, c.embed_dim),
                    p + "router.b": (c.n_experts,),
                    p + "experts.w1": (c.n_experts, c.embed_dim, c.ff_dim),
                    p + "experts.b1": (c.n_experts, c.ff_dim),
                    p + "experts.w2": (c.n_experts, c.ff_dim, c.embed_dim),
                    p + "experts.b2": (c.n_experts, c.embed_dim),
                }
            )
        for name, shape in expect.items():
            if name not in self.tensors:
                raise DynamicsError(f"missing tensor {name!r}")
            if self.tensors[name].shape != shape:
                raise DynamicsError(
                    f"tensor {name!r} has shape {self.tensors[name].shape}, expected {shape}"
                )
        return self

    def save(self, path: str | Path) -> None:
        tensorio.save_tensors(
            path,
            kind="moe-weights",
            meta={"config": self.config.to_dict(), "schema_fingerprint": self.schema_fingerprint},
            tensors=self.tensors,
        )

    @classmethod
    def load(cls, path: str | Path) -> "WeightsBundle":
        meta, tensors = tensorio.require_kind(path, "moe-weights")
        return cls(
            config=MoEConfig.from_dict(meta["config"]),
            schema_fingerprint=meta["schema_fingerprint"],
            tensors=tensors,
        ).validate()


def init_weights(config: MoEConfig, schema_fingerprint: str, seed: int) -> WeightsBundle:
    """Seeded random initialization (scaled normal) for every tensor."""
    rng = np.random.default_rng(seed)
    c = config

    def g(*shape: int, scale: float | None = None) -> np.ndarray:
        fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
        s = scale if scale is not None else 1.0 / np.sqrt(fan_in)
        return rng.normal(0.0, s, size=shape)

    t: dict[str, np.ndarray] = {
        "embed.w": g(c.input_dim, c.embed_dim),
        "embed.b": np.zeros(c.embed_dim),
        "final_ln.g": np.ones(c.embed_dim),
        "final_ln.b": np.zeros(c.embed_dim),
        "head.w": g(c.embed_dim, c.n_targets),
        "head.b": np.zeros(c.n_targets),
    }
    for i in range(c.n_layers):
        p = f"layer{i}."
        t[p + "ln1.g"] = np.ones(c.embed_dim)
        t[p + "ln1.b"] = np.zeros(c.embed_dim)
        t[p + "attn.wq"] = g(c.n_heads, c.embed_dim, c.head_dim)
        t[p + "attn.wk"] = g(c.n_heads, c.embed_dim, c.head_dim)
        t[p + "attn.wv"] = g(c.n_heads, c.embed_dim, c.head_dim)
        t[p + "attn.wo"] = g(c.embed_dim, c.embed_dim)
        t[p + "attn.bo"] = np.zeros(c.embed_dim)
        t[p + "ln2.g"] = np.ones(c.embed_dim)
        t[p + "ln2.b"] = np.zeros(c.embed_dim)
        t[p + "router.w"] = g(c.n_experts, c.embed_dim, scale=1.0 / np.sqrt(c.embed_dim))
        t[p + "router.b"] = np.zeros(c.n_experts)
        t[p + "experts.w1"] = g(c.n_experts, c.embed_dim, c.ff_dim)
        t[p + "experts.b1"] = np.zeros((c.n_experts, c.ff_dim))
        t[p + "experts.w2"] = g(c.n_experts, c.ff_dim, c.embed_dim)
        t[p + "experts.b2"] = np.zeros((c.n_experts, c.embed_dim))
    return WeightsBundle(config=c, schema_fingerprint=schema_fingerprint, tensors=t).validate()


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + LN_EPS) + beta


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def moe_forward(
    history: Sequence[Visit] | np.ndarray,
    weights: WeightsBundle,
    stats: ScalerStats | None = None,
    return_trace: bool = False,
):
    """Run the forecaster over a visit history.

    Accepts either a list of visits (assembled with *stats*) or a
    pre-assembled ``(T, input_dim)`` input matrix. Returns
    ``(predictions, RouterStats)`` where predictions has one row per input
    position; with ``return_trace`` a dict of intermediates is appended.
    Position t attends only to positions <= t, and exactly one expert fires
    per position per layer.
    """
    c = weights.config
    if isinstance(history, np.ndarray):
        inputs = np.asarray(history, dtype=float)
    else:
        if not len(history):
            raise DynamicsError("history must be nonempty")
        if stats is None:
            raise DynamicsError("stats required to assemble visit inputs")
        inputs = np.stack([assemble_model_input(v, stats) for v in history])
    if inputs.ndim != 2 or inputs.shape[1] != c.input_dim:
        raise DynamicsError(f"inputs must be (T, {c.input_dim})")
    if inputs.shape[0] == 0:
        raise DynamicsError("history must be nonempty")
    if np.isnan(inputs).any():
        raise DynamicsError("NaN in model inputs")

    t_len = inputs.shape[0]
    w = weights.tensors
    x = inputs @ w["embed.w"] + w["embed.b"]

    assign = np.zeros((c.n_layers, c.n_experts))
    mean_prob = np.zeros((c.n_layers, c.n_experts))
    trace: dict = {"layers": []}

    causal = np.tril(np.ones((t_len, t_len), dtype=bool))
    for i in range(c.n_layers):
        p = f"layer{i}."
        u = layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"])

        heads = []
        head_values = []
        head_attn = []
        for h in range(c.n_heads):
            q = u @ w[p + "attn.wq"][h]
            k = u @ w[p + "attn.wk"][h]
            v = u @ w[p + "attn.wv"][h]
            scores = (q @ k.T) / np.sqrt(c.head_dim)
            scores = np.where(causal, scores, -np.inf)
            alpha = softmax(scores, axis=-1)
            heads.append(alpha @ v)
            head_values.append(v)
            head_attn.append(alpha)
        attn_concat = np.concatenate(heads, axis=-1)
        a = attn_concat @ w[p + "attn.wo"] + w[p + "attn.bo"]
        x = x + a

        mid = layer_norm(x, w[p + "ln2.g"], w[p + "ln2.b"])
        logits = mid @ w[p + "router.w"].T + w[p + "router.b"]
        probs = softmax(logits, axis=-1)
        choice = np.argmax(probs, axis=-1)  # ties resolve to the lowest index

        f_out = np.empty_like(mid)
        for t in range(t_len):
            e = int(choice[t])
            hdn = np.maximum(mid[t] @ w[p + "experts.w1"][e] + w[p + "experts.b1"][e], 0.0)
            f_out[t] = hdn @ w[p + "experts.w2"][e] + w[p + "experts.b2"][e]
        x = x + f_out

        counts = np.bincount(choice, minlength=c.n_experts)
        assign[i] = counts / t_len
        mean_prob[i] = probs.mean(axis=0)
        if return_trace:
            trace["layers"].append(
                {
                    "ln1": u,
                    "values": head_values,
                    "attn_weights": head_attn,
                    "attn_concat": attn_concat,
                    "attn_out": a,
                    "router_probs": probs,
                    "expert_choice": choice,
                    "expert_out": f_out,
                }
            )

    y = layer_norm(x, w["final_ln.g"], w["final_ln.b"])
    preds = y @ w["head.w"] + w["head.b"]
    stats_out = RouterStats(assign_fraction=assign, mean_prob=mean_prob)
    if return_trace:
        trace["final"] = y
        return preds, stats_out, trace
    return preds, stats_out


def check_schema(weights: WeightsBundle, schema: FeatureSchema) -> None:
    if weights.schema_fingerprint != schema.fingerprint():
        raise DynamicsError("weights were produced for a different schema")
