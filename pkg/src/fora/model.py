"""A small pre-layernorm decoder-only transformer used as the frozen base.

Each block has the five adaptable projections ``q, k, v, up, down`` plus a
base-only attention output projection ``o``. Linear maps follow the
``(d_out, d_in)`` convention, i.e. ``y = x @ W.T``. Layernorms carry no
learned affine parameters; positions enter through a fixed sinusoidal table.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .autodiff import Tape, Var, backward
from .exceptions import ConfigError, ShapeError
from .linalg import rng_stream

MODULES = ("q", "k", "v", "up", "down")
BLOCK_TENSORS = ("q", "k", "v", "o", "up", "down")
MASK_VALUE = -1e30


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab: int = 64
    seq_len: int = 32

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def module_shape(self, module: str) -> tuple[int, int]:
        """``(d_out, d_in)`` of a block tensor."""
        d, f = self.d_model, self.d_ff
        return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "up": (f, d), "down": (d, f)}[
            module
        ]


@dataclass
class BaseWeights:
    config: ModelConfig
    embed: np.ndarray
    layers: list[dict[str, np.ndarray]]
    head: np.ndarray

    def named_tensors(self):
        """``(name, array)`` pairs in canonical serialization order."""
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            for m in BLOCK_TENSORS:
                yield f"layers.{i}.{m}", layer[m]
        yield "head", self.head

    def copy(self) -> "BaseWeights":
        return replace(
            self,
            embed=self.embed.copy(),
            layers=[{m: w.copy() for m, w in layer.items()} for layer in self.layers],
            head=self.head.copy(),
        )


@dataclass(frozen=True)
class Batch:
    """Input token ids and per-position labels, both ``(n_seq, seq_len)``."""

    tokens: np.ndarray
    targets: np.ndarray = field(default=None)

    def __post_init__(self):
        tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        object.__setattr__(self, "tokens", tokens)
        if self.targets is not None:
            targets = np.atleast_2d(np.asarray(self.targets, dtype=np.int64))
            if targets.shape != tokens.shape:
                raise ShapeError(f"targets {targets.shape} do not match tokens {tokens.shape}")
            object.__setattr__(self, "targets", targets)


def init_base_weights(
    config: ModelConfig,
    seed: int = 0,
    proj_gain: float = 1.0,
    head_gain: float = 1.0,
) -> BaseWeights:
    """Random base model; projections are Gaussian with std ``gain/sqrt(d_in)``."""
    rng = rng_stream(seed, "base-weights")
    d = config.d_model
    embed = rng.standard_normal((config.vocab, d))
    layers = []
    for _ in range(config.n_layers):
        layer = {}
        for m in BLOCK_TENSORS:
            d_out, d_in = config.module_shape(m)
            layer[m] = rng.standard_normal((d_out, d_in)) * (proj_gain / np.sqrt(d_in))
        layers.append(layer)
    head = rng.standard_normal((d, config.vocab)) * (head_gain / np.sqrt(d))
    return BaseWeights(config, embed, layers, head)


def positional_table(seq_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((seq_len, d_model))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d_model // 2])
    return table


def causal_mask(seq_len: int) -> np.ndarray:
    return np.triu(np.full((seq_len, seq_len), MASK_VALUE), k=1)


class Trace(NamedTuple):
    """Result of a traced forward pass.

    ``base`` maps ``(layer, module)`` to the leaf of a base projection when
    base gradients were requested; ``adapters`` maps each adapter slot to its
    ``(A, B)`` leaves.
    """

    logits: np.ndarray
    tape: Tape
    logits_var: Var
    base: dict
    adapters: dict


def _check_adapters(config: ModelConfig, adapters) -> None:
    for slot, pair in adapters.items():
        layer, module = slot
        if not 0 <= layer < config.n_layers or module not in MODULES:
            raise ShapeError(f"adapter slot {slot} does not exist in this model")
        d_out, d_in = config.module_shape(module)
        if pair.a.shape[1] != d_in or pair.b.shape[0] != d_out or pair.a.shape[0] != pair.b.shape[1]:
            raise ShapeError(
                f"adapter at layer {layer} module {module!r}: A {pair.a.shape} and "
                f"B {pair.b.shape} do not fit a ({d_out}, {d_in}) projection"
            )


def forward(weights: BaseWeights, adapters=None, batch=None, *, base_grad: bool = False, tokens=None) -> Trace:
    """Traced forward pass returning logits of shape ``(n_seq, seq_len, vocab)``.

    ``adapters`` is any mapping from ``(layer, module)`` slots to objects with
    ``a``, ``b`` and ``scaling`` attributes (an :class:`~fora.adapter.AdapterSet`
    or a plain dict). With ``base_grad=True`` the five adaptable projections of
    every layer become trainable leaves; otherwise only adapter factors are.
    """
    cfg = weights.config
    adapters = {} if adapters is None else adapters
    _check_adapters(cfg, adapters)
    if tokens is None:
        tokens = batch.tokens
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    n, t = tokens.shape
    if t > cfg.seq_len:
        raise ShapeError(f"batch length {t} exceeds seq_len {cfg.seq_len}")
    h_, dh = cfg.n_heads, cfg.head_dim

    tape = Tape()
    x = tape.embed_lookup(tape.constant(weights.embed), tokens)
    x = tape.add(x, tape.constant(positional_table(t, cfg.d_model)))
    mask = tape.constant(causal_mask(t))
    base_leaves: dict = {}
    adapter_leaves: dict = {}

    def project(inp: Var, layer: int, module: str) -> Var:
        w = weights.layers[layer][module]
        if base_grad and module in MODULES:
            leaf = tape.leaf(w)
            base_leaves[(layer, module)] = leaf
            wt = tape.transpose(leaf)
        else:
            wt = tape.constant(w.T)
        out = tape.matmul(inp, wt)
        pair = adapters.get((layer, module))
        if pair is not None:
            a = tape.leaf(pair.a)
            b = tape.leaf(pair.b)
            adapter_leaves[(layer, module)] = (a, b)
            low = tape.matmul(tape.matmul(inp, tape.transpose(a)), tape.transpose(b))
            out = tape.add(out, tape.scale(low, pair.scaling))
        return out

    def heads(v: Var) -> Var:
        return tape.transpose(tape.reshape(v, (n, t, h_, dh)), (0, 2, 1, 3))

    for layer in range(cfg.n_layers):
        h = tape.layernorm_rows(x)
        q = heads(project(h, layer, "q"))
        k = heads(project(h, layer, "k"))
        v = heads(project(h, layer, "v"))
        scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / np.sqrt(dh))
        attn = tape.softmax_rows(tape.add(scores, mask))
        ctx = tape.matmul(attn, v)
        ctx = tape.reshape(tape.transpose(ctx, (0, 2, 1, 3)), (n, t, cfg.d_model))
        x = tape.add(x, project(ctx, layer, "o"))
        h = tape.layernorm_rows(x)
        u = tape.relu(project(h, layer, "up"))
        x = tape.add(x, project(u, layer, "down"))

    logits = tape.matmul(tape.layernorm_rows(x), tape.constant(weights.head))
    return Trace(logits.value, tape, logits, base_leaves, adapter_leaves)


def predict_logits(weights: BaseWeights, adapters=None, tokens=None) -> np.ndarray:
    return forward(weights, adapters, tokens=tokens).logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss(logits: np.ndarray, targets) -> float:
    """Mean next-token cross-entropy over all positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    logp = log_softmax(logits).reshape(-1, logits.shape[-1])
    return float(-logp[np.arange(targets.size), targets.reshape(-1)].mean())


def loss_and_adapter_grads(weights: BaseWeights, adapters, batch: Batch):
    """Loss plus ``{slot: (dL/dA, dL/dB)}`` for every adapter slot."""
    trace = forward(weights, adapters, batch)
    loss_var = trace.tape.cross_entropy(trace.logits_var, batch.targets)
    grads = backward(trace.tape, loss_var)
    out = {slot: (grads[a], grads[b]) for slot, (a, b) in trace.adapters.items()}
    return float(loss_var.value.item()), out


def base_layer_gradients(weights: BaseWeights, batch: Batch, targets=None):
    """Per-layer gradients of the five adaptable projections on the bare base model.

    Returns ``(loss, grads)`` where ``grads[layer][module]`` has the shape of
    that projection. Embedding, head and ``o`` gradients are never included.
    """
    targets = batch.targets if targets is None else targets
    trace = forward(weights, None, batch, base_grad=True)
    loss_var = trace.tape.cross_entropy(trace.logits_var, targets)
    grads = backward(trace.tape, loss_var)
    per_layer = [dict() for _ in range(weights.config.n_layers)]
    for (layer, module), leaf in trace.base.items():
        per_layer[layer][module] = grads[leaf]
    return float(loss_var.value.item()), per_layer, trace.logits
