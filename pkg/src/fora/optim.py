"""Dual-optimizer adapter training: AdamW on ``A``, Cayley-Adam on Stiefel ``B``."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .adapter import AdapterSet
from .exceptions import ConfigError, NumericalError
from .manifold import DRIFT_BOUND, StiefelPoint, build_skew, cayley_fixed_point, qr_retract, stiefel_drift
from .model import BaseWeights, Batch, loss_and_adapter_grads

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    """Adam moments; ``v`` is a float for the scalar Cayley-Adam variant."""

    m: np.ndarray
    v: np.ndarray | float
    t: int = 0

    @classmethod
    def zeros(cls, shape, scalar_v: bool = False) -> "AdamState":
        return cls(np.zeros(shape), 0.0 if scalar_v else np.zeros(shape), 0)


def adamw_step(param, grad, state: AdamState, lr: float, wd: float = 0.0, betas=(BETA1, BETA2), eps=EPS):
    """Bias-corrected Adam step with decoupled weight decay.

    Returns the new parameter and state; inputs are left untouched.
    """
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = param - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * wd * param
    return new, AdamState(m, v, t)


@dataclass(frozen=True)
class CayleyStepInfo:
    alpha: float
    clamped: bool
    drift: float


def cayley_adam_step(
    point: StiefelPoint,
    grad,
    state: AdamState,
    lr: float,
    n_c: int,
    betas=(BETA1, BETA2),
    eps=EPS,
    max_angle: float = 0.5,
):
    """One Cayley-Adam step on a Stiefel point.

    The first moment tracks the raw Euclidean gradient and, after bias
    correction, builds the skew generator; the step size is ``lr`` divided by
    the root of a bias-corrected scalar EMA of ``||grad||_F^2``. The step is
    clamped so that ``alpha * ||W||_2 <= max_angle``, which keeps the
    fixed-point solve contractive. ``n_c = 0`` updates the moments but leaves
    ``B`` where it is.

    Returns ``(new_point, new_state, info)``.
    """
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * float(np.sum(grad * grad))
    new_state = AdamState(m, v, t)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    alpha = lr / (np.sqrt(v_hat) + eps)
    if n_c == 0 or not np.any(m_hat):
        return point, new_state, CayleyStepInfo(0.0, False, point.drift)
    # descent: the generator is built from the negative moment
    skew = build_skew(point.b, -m_hat)
    norm = skew.spectral_norm()
    clamped = alpha * norm > max_angle
    if clamped:
        alpha = max_angle / norm
    b_new = cayley_fixed_point(skew, point.b, alpha, n_c)
    drift = stiefel_drift(b_new)
    return StiefelPoint(b_new, drift), new_state, CayleyStepInfo(float(alpha), bool(clamped), drift)


@dataclass
class TrainConfig:
    """Training hyperparameters; the defaults are the paper-scale values."""

    lr_a: float = 2e-4
    lr_b: float = 1e-3
    weight_decay: float = 0.01
    n_c: int = 5
    t_qr: int = 200
    k: int = 4
    r: int = 8
    alpha_lora: float = 16.0
    steps: int = 200
    batch_size: int = 16
    seed: int = 0
    b_init: str = "orthonormal"
    drift_tol: float = DRIFT_BOUND
    max_angle: float = 0.5

    def __post_init__(self):
        for name in ("lr_a", "lr_b", "weight_decay", "alpha_lora", "drift_tol", "max_angle"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("t_qr", "k", "r", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_c < 0 or self.steps < 0:
            raise ConfigError("n_c and steps must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int
    loss: float
    drift_max: float
    retracted: bool
    wall_ms: float


@dataclass
class TrainResult:
    adapters: AdapterSet
    history: list[StepRecord] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([h.loss for h in self.history])

    @property
    def max_drift(self) -> float:
        return max((h.drift_max for h in self.history), default=0.0)


def train(
    weights: BaseWeights,
    adapters: AdapterSet,
    data: Callable[[int], Batch] | list[Batch],
    cfg: TrainConfig,
    callback: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` joint iterations of both optimizers.

    ``data`` is either a list of batches, consumed cyclically, or a callable
    mapping the 0-based step to a batch. Constrained ``B`` factors use
    Cayley-Adam with ``lr_b`` and no weight decay; every ``A`` and every
    unconstrained ``B`` uses AdamW with ``lr_a`` and ``weight_decay``. ``B`` is
    re-projected by QR every ``t_qr`` steps, or at once when its drift exceeds
    ``drift_tol``. ``weights`` is never modified.

    Raises
    ------
    NumericalError
        On a non-finite loss, with the failing step index attached.
    """
    adapters = adapters.copy()
    get_batch = data if callable(data) else (lambda i: data[i % len(data)])
    states_a = {s: AdamState.zeros(p.a.shape) for s, p in adapters.items()}
    states_b = {s: AdamState.zeros(p.b.shape, scalar_v=p.constrained) for s, p in adapters.items()}
    points = {s: StiefelPoint.audit(p.b) for s, p in adapters.items() if p.constrained}
    result = TrainResult(adapters)

    for step in range(cfg.steps):
        start = time.perf_counter()
        loss, grads = loss_and_adapter_grads(weights, adapters, get_batch(step))
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step}", step=step)
        drift_max = 0.0
        retracted = False
        for slot, pair in adapters.items():
            g_a, g_b = grads[slot]
            pair.a, states_a[slot] = adamw_step(pair.a, g_a, states_a[slot], cfg.lr_a, cfg.weight_decay)
            if pair.constrained:
                point, states_b[slot], info = cayley_adam_step(
                    points[slot], g_b, states_b[slot], cfg.lr_b, cfg.n_c, max_angle=cfg.max_angle
                )
                drift_max = max(drift_max, point.drift)
                if (step + 1) % cfg.t_qr == 0 or point.drift > cfg.drift_tol:
                    point = qr_retract(point.b)
                    retracted = True
                points[slot] = point
                pair.b = point.b
            else:
                pair.b, states_b[slot] = adamw_step(pair.b, g_b, states_b[slot], cfg.lr_a, cfg.weight_decay)
        record = StepRecord(step, loss, drift_max, retracted, 1e3 * (time.perf_counter() - start))
        result.history.append(record)
        if callback is not None:
            callback(record)
    return result
