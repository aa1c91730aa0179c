"""LoRA factor pairs: initialization, parameter accounting, merging."""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError
from .linalg import qr_thin, rng_stream
from .model import MODULES, BaseWeights, ModelConfig

B_INITS = ("orthonormal", "zero")


@dataclass
class AdapterPair:
    """``delta_W = scaling * b @ a`` attached to one ``(layer, module)`` slot."""

    a: np.ndarray
    b: np.ndarray
    scaling: float
    slot: tuple[int, str]
    constrained: bool = False

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def delta(self, scaled: bool = True) -> np.ndarray:
        dw = self.b @ self.a
        return dw * self.scaling if scaled else dw


@dataclass
class AdapterSet(Mapping):
    """Adapters keyed by slot, with all five modules on every selected layer."""

    pairs: dict = field(default_factory=dict)
    layers: tuple = ()

    def __getitem__(self, slot):
        return self.pairs[slot]

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def copy(self) -> "AdapterSet":
        return AdapterSet(
            {
                s: AdapterPair(p.a.copy(), p.b.copy(), p.scaling, p.slot, p.constrained)
                for s, p in self.pairs.items()
            },
            self.layers,
        )


def _layers_of(selection) -> tuple[int, ...]:
    layers = getattr(selection, "layers", selection)
    return tuple(sorted(int(l) for l in layers))


def init_adapters(
    config: ModelConfig,
    selection,
    r: int,
    alpha_lora: float,
    constrained: bool,
    seed: int,
    b_init: str = "orthonormal",
) -> AdapterSet:
    """Adapters on every module of every selected layer.

    ``A`` is Gaussian with std ``1/sqrt(r)``; ``B`` is the Q factor of a
    Gaussian ``(d_out, r)`` matrix (or zero when ``b_init="zero"``). Each slot
    draws from its own stream, so a slot's initial factors do not depend on
    which other layers are selected or on ``constrained``.
    """
    if b_init not in B_INITS:
        raise ConfigError(f"b_init must be one of {B_INITS}, got {b_init!r}")
    if constrained and b_init == "zero":
        raise ConfigError("a Stiefel-constrained B cannot start at zero")
    layers = _layers_of(selection)
    if len(layers) > config.n_layers or any(not 0 <= l < config.n_layers for l in layers):
        raise ConfigError(f"selection {layers} is invalid for {config.n_layers} layers")
    pairs = {}
    for layer in layers:
        for module in MODULES:
            d_out, d_in = config.module_shape(module)
            if not 1 <= r <= min(d_out, d_in):
                raise ConfigError(
                    f"rank {r} is too large for layer {layer} module {module!r} "
                    f"of shape ({d_out}, {d_in})"
                )
            rng = rng_stream(seed, "adapter-init", layer, module)
            a = rng.standard_normal((r, d_in)) / np.sqrt(r)
            g = rng.standard_normal((d_out, r))
            b = qr_thin(g).q if b_init == "orthonormal" else np.zeros((d_out, r))
            pairs[(layer, module)] = AdapterPair(a, b, alpha_lora / r, (layer, module), constrained)
    return AdapterSet(pairs, layers)


def trainable_param_count(config: ModelConfig, selection, r: int) -> int:
    """Exact count ``sum over selected layers and modules of r * (d_in + d_out)``.

    ``selection`` may be a layer count ``K`` or a collection of layer indices.
    """
    k = selection if isinstance(selection, (int, np.integer)) else len(_layers_of(selection))
    per_layer = sum(r * sum(config.module_shape(m)) for m in MODULES)
    return int(k) * per_layer


def merge_into_base(weights: BaseWeights, adapters: Mapping) -> BaseWeights:
    """Fold every adapter into its projection: ``W0 + scaling * B @ A``."""
    merged = weights.copy()
    for (layer, module), pair in adapters.items():
        merged.layers[layer][module] = weights.layers[layer][module] + pair.delta(scaled=True)
    return merged


def slots_in(layers: Iterable[int]):
    return [(l, m) for l in sorted(layers) for m in MODULES]
