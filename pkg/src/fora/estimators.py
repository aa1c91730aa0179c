"""scikit-learn style wrappers around layer selection and adapter training.

``X`` is an integer array of token ids with shape ``(n_sequences, seq_len)``
and ``y`` the per-position next-token labels of the same shape.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adapter import init_adapters, merge_into_base, trainable_param_count
from .exceptions import ConfigError, ShapeError
from .fisher import score_layers, select_topk
from .linalg import rng_stream
from .model import BaseWeights, Batch, log_softmax, loss, predict_logits
from .optim import TrainConfig, train


def check_tokens(X, weights: BaseWeights, name: str = "X") -> np.ndarray:
    """Validate a 2-D integer token array against the model's vocab and length."""
    arr = np.asarray(X)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D array of token ids, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{name} must contain integer token ids")
        arr = arr.astype(np.int64)
    cfg = weights.config
    if arr.min() < 0 or arr.max() >= cfg.vocab:
        raise ValueError(f"{name} has ids outside [0, {cfg.vocab})")
    if arr.shape[1] > cfg.seq_len:
        raise ShapeError(f"{name} sequences of length {arr.shape[1]} exceed seq_len {cfg.seq_len}")
    return arr.astype(np.int64)


def check_tokens_labels(X, y, weights: BaseWeights):
    X = check_tokens(X, weights, "X")
    y = check_tokens(y, weights, "y")
    if X.shape != y.shape:
        raise ShapeError(f"X {X.shape} and y {y.shape} must have the same shape")
    return X, y


def _batches(X, y, size: int):
    return [Batch(X[i : i + size], y[i : i + size]) for i in range(0, len(X), size)]


class FisherLayerSelector(BaseEstimator):
    """Pick the ``k`` layers with the largest empirical Fisher score.

    After ``fit``: ``scores_`` (one per layer), ``selection_`` and
    ``support_`` (boolean mask over layers).
    """

    def __init__(self, base: BaseWeights | None = None, k: int = 4, batch_size: int = 16,
                 n_batches: int | None = None, variant: str = "empirical", seed: int = 0):
        self.base = base
        self.k = k
        self.batch_size = batch_size
        self.n_batches = n_batches
        self.variant = variant
        self.seed = seed

    def fit(self, X, y):
        if self.base is None:
            raise ConfigError("FisherLayerSelector needs base weights")
        X, y = check_tokens_labels(X, y, self.base)
        calib = _batches(X, y, self.batch_size)
        scores = score_layers(self.base, calib, self.n_batches, self.variant, self.seed)
        self.scores_ = np.array([s.score for s in scores])
        self.selection_ = select_topk(scores, self.k, n_batches=self.n_batches or len(calib),
                                      seed=self.seed, variant=self.variant)
        self.support_ = np.isin(np.arange(len(scores)), self.selection_.layers)
        return self

    def get_support(self, indices: bool = False):
        check_is_fitted(self, "support_")
        return np.flatnonzero(self.support_) if indices else self.support_.copy()


class FoRAFineTuner(BaseEstimator):
    """Adapter fine-tuning of a frozen base model.

    ``layers=None`` runs Fisher selection on the training data first;
    ``constrained=False`` gives the unconstrained (AdamW on both factors)
    baseline. Training draws mini-batches by a seeded shuffle of ``X``.
    """

    def __init__(self, base: BaseWeights | None = None, k: int = 4, layers=None, r: int = 8,
                 alpha_lora: float = 16.0, constrained: bool = True, lr_a: float = 2e-2,
                 lr_b: float = 1e-1, weight_decay: float = 0.01, n_c: int = 5, t_qr: int = 200,
                 steps: int = 150, batch_size: int = 8, seed: int = 0):
        self.base = base
        self.k = k
        self.layers = layers
        self.r = r
        self.alpha_lora = alpha_lora
        self.constrained = constrained
        self.lr_a = lr_a
        self.lr_b = lr_b
        self.weight_decay = weight_decay
        self.n_c = n_c
        self.t_qr = t_qr
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr_a=self.lr_a, lr_b=self.lr_b, weight_decay=self.weight_decay, n_c=self.n_c,
                           t_qr=self.t_qr, k=self.k, r=self.r, alpha_lora=self.alpha_lora, steps=self.steps,
                           batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y):
        if self.base is None:
            raise ConfigError("FoRAFineTuner needs base weights")
        X, y = check_tokens_labels(X, y, self.base)
        cfg = self._train_config()
        if self.layers is None:
            selector = FisherLayerSelector(self.base, self.k, seed=self.seed).fit(X, y)
            self.selection_ = selector.selection_
            self.scores_ = selector.scores_
            layers = self.selection_.layers
        else:
            layers = tuple(sorted(int(l) for l in self.layers))
            self.selection_ = layers
        adapters = init_adapters(self.base.config, layers, self.r, self.alpha_lora, self.constrained, self.seed)
        n = len(X)
        size = min(self.batch_size, n)
        rng = rng_stream(self.seed, "fit-order")
        order = []

        def batch(step: int) -> Batch:
            # one shuffled pass after another; a step's batch depends only on the seed
            while len(order) <= (step + 1) * size:
                order.extend(rng.permutation(n).tolist())
            idx = order[step * size : (step + 1) * size]
            return Batch(X[idx], y[idx])

        result = train(self.base, adapters, batch, cfg)
        self.adapters_ = result.adapters
        self.history_ = result.history
        self.layers_ = tuple(layers)
        self.n_params_ = trainable_param_count(self.base.config, layers, self.r)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "adapters_")
        X = check_tokens(X, self.base)
        return np.exp(log_softmax(predict_logits(self.base, self.adapters_, X)))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "adapters_")
        X = check_tokens(X, self.base)
        return predict_logits(self.base, self.adapters_, X).argmax(axis=-1)

    def score(self, X, y) -> float:
        """Mean per-position accuracy of :meth:`predict`."""
        X, y = check_tokens_labels(X, y, self.base)
        return float(np.mean(self.predict(X) == y))

    def loss(self, X, y) -> float:
        check_is_fitted(self, "adapters_")
        X, y = check_tokens_labels(X, y, self.base)
        return loss(predict_logits(self.base, self.adapters_, X), y)

    def merge(self) -> BaseWeights:
        """Base weights with every adapter folded in."""
        check_is_fitted(self, "adapters_")
        return merge_into_base(self.base, self.adapters_)
