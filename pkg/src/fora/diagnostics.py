"""Post-hoc measurements on trained adapters.

Spectra are taken on the unscaled product ``B @ A``; the scaling factor is a
scalar and cannot change the effective rank. ``||Delta W||_F`` is reported
scaled, i.e. as it would be merged into the base.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ShapeError
from .fisher import layer_gradient_norms
from .linalg import singular_values
from .manifold import stiefel_drift
from .model import BaseWeights, log_softmax, predict_logits


def effective_rank(spectrum) -> float:
    """``exp`` of the Shannon entropy (natural log) of ``sigma / sum(sigma)``.

    >>> round(effective_rank([3.0, 1.0]), 6)
    1.754765
    """
    s = np.asarray(spectrum, dtype=np.float64).ravel()
    if s.size == 0 or np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("spectrum must be a non-empty vector of finite non-negative values")
    total = s.sum()
    if total <= 0:
        raise ValueError("effective rank is undefined for an all-zero spectrum")
    p = s[s > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def kl_rows(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    """Per-position ``KL(softmax(p) || softmax(q))``."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"logit shapes differ: {p_logits.shape} vs {q_logits.shape}")
    lp = log_softmax(p_logits)
    lq = log_softmax(q_logits)
    # clip tiny negative round-off; KL is non-negative
    return np.maximum(np.sum(np.exp(lp) * (lp - lq), axis=-1), 0.0)


def kl_output_drift(base: BaseWeights, trained: BaseWeights, eval_batches, adapters=None) -> float:
    """Mean over every eval position of ``KL(p_trained || p_base)``.

    ``trained`` is usually a merged model; pass ``adapters`` instead to run
    the unmerged adapter forward on top of ``trained``.
    """
    if not eval_batches:
        raise ConfigError("kl_output_drift needs at least one eval batch")
    if trained.config != base.config:
        raise ConfigError("base and trained models have different configs")
    total, count = 0.0, 0
    for batch in eval_batches:
        p = predict_logits(trained, adapters, batch.tokens)
        q = predict_logits(base, None, batch.tokens)
        kl = kl_rows(p, q)
        total += float(kl.sum())
        count += kl.size
    return total / count


@dataclass(frozen=True)
class SlotReport:
    layer: int
    module: str
    rank: int
    spectrum: np.ndarray
    erank: float
    erank_ratio: float
    tail_ratio: float  # sigma_r / sigma_1
    dw_frob: float  # scaled
    dw_frob_unscaled: float
    drift: float


@dataclass
class AdapterReport:
    slots: list[SlotReport] = field(default_factory=list)
    kl_drift: float = 0.0
    drift_max: float = 0.0

    @property
    def mean_erank(self) -> float:
        return float(np.mean([s.erank for s in self.slots])) if self.slots else 0.0

    @property
    def mean_erank_ratio(self) -> float:
        return float(np.mean([s.erank_ratio for s in self.slots])) if self.slots else 0.0

    @property
    def dw_frob_total(self) -> float:
        return float(np.sqrt(sum(s.dw_frob**2 for s in self.slots)))

    def summary(self) -> dict:
        return {
            "n_slots": len(self.slots),
            "mean_erank": self.mean_erank,
            "mean_erank_ratio": self.mean_erank_ratio,
            "dw_frob_total": self.dw_frob_total,
            "kl_drift": self.kl_drift,
            "drift_max": self.drift_max,
        }

    def slots_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "module", "rank", "erank", "erank_ratio", "tail_ratio",
                    "dw_frob", "dw_frob_unscaled", "drift"])
        for s in self.slots:
            w.writerow([s.layer, s.module, s.rank, _f(s.erank), _f(s.erank_ratio), _f(s.tail_ratio),
                        _f(s.dw_frob), _f(s.dw_frob_unscaled), _f(s.drift)])
        return buf.getvalue()

    def spectrum_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "module", "index", "sigma"])
        for s in self.slots:
            for i, v in enumerate(s.spectrum):
                w.writerow([s.layer, s.module, i + 1, _f(v)])
        return buf.getvalue()


def _f(x: float) -> str:
    return repr(float(x))


def slot_report(pair) -> SlotReport:
    delta = pair.b @ pair.a
    spectrum = singular_values(delta)[: pair.rank]
    layer, module = pair.slot
    if spectrum[0] > 0:
        er = effective_rank(spectrum)
        tail = spectrum[-1] / spectrum[0]
    else:
        er, tail = 0.0, 0.0
    unscaled = float(np.linalg.norm(delta))
    return SlotReport(
        layer,
        module,
        pair.rank,
        spectrum,
        er,
        er / pair.rank,
        float(tail),
        abs(pair.scaling) * unscaled,
        unscaled,
        stiefel_drift(pair.b),
    )


def report(weights: BaseWeights, adapters, eval_batches=None, drift_max: float | None = None) -> AdapterReport:
    """Per-slot spectra and magnitudes plus model-level KL drift.

    ``drift_max`` defaults to the largest current ``||B^T B - I||_F`` over
    constrained slots; training loops pass the running maximum instead.
    """
    pairs = [adapters[s] for s in sorted(adapters)]
    slots = [slot_report(p) for p in pairs]
    if drift_max is None:
        drift_max = max((s.drift for s, p in zip(slots, pairs) if p.constrained), default=0.0)
    kl = kl_output_drift(weights, weights, eval_batches, adapters) if eval_batches else 0.0
    return AdapterReport(slots, kl, float(drift_max))


def cross_layer_gradient_correlation(weights: BaseWeights, calib) -> tuple[float, float, float]:
    """Correlation across batches of the per-layer squared gradient norms.

    Builds the ``L x N`` matrix of per-layer Fisher contributions over ``N``
    calibration batches and returns ``(mean |off-diagonal|, max |off-diagonal|,
    ratio)`` of its Pearson correlation matrix, where ``ratio`` divides the
    mean off-diagonal magnitude by the mean diagonal magnitude.
    """
    if len(calib) < 2:
        raise ConfigError("cross-layer correlation needs at least 2 calibration batches")
    norms = np.stack([layer_gradient_norms(weights, b) for b in calib], axis=1)
    n_layers = norms.shape[0]
    if n_layers < 2:
        return 0.0, 0.0, 0.0
    centred = norms - norms.mean(axis=1, keepdims=True)
    scale = np.sqrt(np.sum(centred * centred, axis=1))
    scale[scale == 0] = 1.0
    z = centred / scale[:, None]
    corr = z @ z.T
    off = np.abs(corr[~np.eye(n_layers, dtype=bool)])
    diag = np.abs(np.diag(corr))
    diag_mean = float(diag.mean()) if np.any(diag) else 1.0
    return float(off.mean()), float(off.max()), float(off.mean() / diag_mean)


def svg_lines(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
              width: int = 480, height: int = 320, logy: bool = False) -> str:
    """Minimal standalone SVG line plot; ``series`` maps a label to ``(xs, ys)``."""
    pad = 48
    pts = [(float(x), float(y)) for xs, ys in series.values() for x, y in zip(xs, ys)]
    if not pts:
        raise ValueError("nothing to plot")
    tf = (lambda v: np.log10(max(v, 1e-300))) if logy else (lambda v: v)
    xs_all = [p[0] for p in pts]
    ys_all = [tf(p[1]) for p in pts]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (tf(y) - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{pad / 2}" text-anchor="middle">{_esc(title)}</text>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle">{_esc(xlabel)}</text>',
        f'<text x="14" y="{height / 2}" transform="rotate(-90 14 {height / 2})" '
        f'text-anchor="middle">{_esc(ylabel)}</text>',
        f'<text x="{pad}" y="{height - pad + 14}" text-anchor="middle">{x0:g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 14}" text-anchor="middle">{x1:g}</text>',
    ]
    for i, (label, (xs, ys)) in enumerate(series.items()):
        c = colors[i % len(colors)]
        path = " ".join(f"{px(float(x)):.2f},{py(float(y)):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{path}"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" fill="{c}">{_esc(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
