"""Per-layer diagonal Fisher scores and frozen top-K layer selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import backward
from .exceptions import ConfigError
from .linalg import rng_stream
from .model import BaseWeights, Batch, forward

VARIANTS = ("empirical", "true_fisher")


@dataclass(frozen=True)
class LayerScore:
    layer: int
    score: float


@dataclass(frozen=True)
class SelectionSet:
    """Layers that receive adapters; fixed for a whole training run."""

    layers: tuple[int, ...]
    k: int
    n_batches: int = 0
    seed: int = 0
    variant: str = "empirical"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(int(l) for l in self.layers)))
        if len(self.layers) != self.k or len(set(self.layers)) != self.k:
            raise ConfigError(f"selection {self.layers} does not contain exactly k={self.k} layers")

    def __contains__(self, layer) -> bool:
        return layer in self.layers

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return self.k


def _sample_labels(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    flat = p.reshape(-1, p.shape[-1])
    u = rng.random(flat.shape[0])
    labels = (flat.cumsum(axis=-1) < u[:, None]).sum(axis=-1)
    return np.minimum(labels, p.shape[-1] - 1).reshape(logits.shape[:-1])


def squared_norms(per_layer_grads) -> np.ndarray:
    """``sum ||g||^2`` per layer from a sequence (one entry per layer) of gradient collections."""
    out = np.zeros(len(per_layer_grads))
    for i, grads in enumerate(per_layer_grads):
        items = grads.values() if isinstance(grads, dict) else grads
        for g in items:
            out[i] += float(np.sum(np.asarray(g) * np.asarray(g)))
    return out


def fisher_from_grads(batches_of_grads) -> list[LayerScore]:
    """Mean over batches of :func:`squared_norms`; the scoring rule without a model."""
    rows = [squared_norms(g) for g in batches_of_grads]
    if not rows:
        raise ConfigError("need at least one batch of gradients")
    total = np.sum(rows, axis=0) / len(rows)
    return [LayerScore(i, float(s)) for i, s in enumerate(total)]


def layer_gradient_norms(weights: BaseWeights, batch: Batch, variant="empirical", rng=None) -> np.ndarray:
    """Squared gradient norm of each layer's five projections for one batch."""
    trace = forward(weights, None, batch, base_grad=True)
    if variant == "empirical":
        targets = batch.targets
    else:
        targets = _sample_labels(trace.logits, rng)
    loss = trace.tape.cross_entropy(trace.logits_var, targets)
    grads = backward(trace.tape, loss)
    out = np.zeros(weights.config.n_layers)
    # fixed (layer, module) order keeps the reduction deterministic
    for (layer, _module), leaf in sorted(trace.base.items()):
        g = grads[leaf]
        out[layer] += float(np.sum(g * g))
    return out


def score_layers(
    weights: BaseWeights,
    calib: list[Batch],
    n: int | None = None,
    variant: str = "empirical",
    seed: int = 0,
) -> list[LayerScore]:
    """Mean over ``n`` calibration batches of each layer's squared gradient norm.

    ``variant="true_fisher"`` replaces the observed labels by one label per
    position sampled from the base model's own softmax.
    """
    if not calib:
        raise ConfigError("score_layers needs a non-empty calibration set")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown Fisher variant {variant!r}; expected one of {VARIANTS}")
    n = len(calib) if n is None else n
    if not 1 <= n <= len(calib):
        raise ConfigError(f"n={n} must be in [1, {len(calib)}]")
    rng = rng_stream(seed, "fisher-labels") if variant == "true_fisher" else None
    total = np.zeros(weights.config.n_layers)
    for batch in calib[:n]:
        total += layer_gradient_norms(weights, batch, variant, rng)
    total /= n
    return [LayerScore(i, float(s)) for i, s in enumerate(total)]


def select_topk(scores: list[LayerScore], k: int, **provenance) -> SelectionSet:
    """The ``k`` highest-scoring layers; ties go to the lower layer index."""
    if not 1 <= k <= len(scores):
        raise ConfigError(f"k={k} is out of range [1, {len(scores)}]")
    ranked = sorted(scores, key=lambda s: (-s.score, s.layer))
    return SelectionSet(tuple(s.layer for s in ranked[:k]), k, **provenance)


def rank_layers(scores: list[LayerScore]) -> dict[int, int]:
    """Layer index -> 1-based rank under the same ordering as :func:`select_topk`."""
    ranked = sorted(scores, key=lambda s: (-s.score, s.layer))
    return {s.layer: i + 1 for i, s in enumerate(ranked)}


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)
