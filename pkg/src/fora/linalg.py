"""Dense matrix helpers: products, thin Householder QR, singular values.

Matrices are plain ``float64`` numpy arrays. Every public function returns a
fresh array and never mutates its inputs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .exceptions import RankDeficientError, ShapeError

# Relative threshold on |R_ii| below which a column counts as dependent.
RANK_TOL = 1e-12


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``m`` to a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


@dataclass(frozen=True)
class QrThin:
    """Thin QR factors with a non-negative diagonal on ``r_factor``."""

    q: np.ndarray
    r_factor: np.ndarray


def qr_thin(m) -> QrThin:
    """Thin QR by Householder reflections.

    The sign of each reflection is fixed afterwards so that ``diag(R) >= 0``,
    which makes the factorization unique for full-column-rank input.

    Raises
    ------
    RankDeficientError
        If a column is numerically dependent on the preceding ones; the
        exception carries the failing column index.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows < cols:
        raise ShapeError(f"qr_thin needs rows >= cols, got {a.shape}")
    scale = max(frobenius_norm(a), np.finfo(float).tiny)
    r = a.copy()
    reflectors = []
    for j in range(cols):
        x = r[j:, j]
        norm_x = np.sqrt(x @ x)
        if norm_x <= RANK_TOL * scale:
            raise RankDeficientError(
                f"qr_thin: column {j} is numerically dependent "
                f"(residual norm {norm_x:.3e})",
                column=j,
            )
        v = x.copy()
        v[0] += np.copysign(norm_x, x[0])
        v /= np.sqrt(v @ v)
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        reflectors.append(v)

    q = np.eye(rows, cols)
    for j in range(cols - 1, -1, -1):
        v = reflectors[j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])

    r = np.triu(r[:cols, :])
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return QrThin(q=q * signs, r_factor=r * signs[:, None])


def singular_values(m) -> np.ndarray:
    """Singular values in descending order (length ``min(rows, cols)``)."""
    a = as_matrix(m)
    if a.size == 0:
        return np.zeros(0)
    s = np.linalg.svd(a, compute_uv=False)
    return np.maximum(s, 0.0)


def rng_stream(seed: int, *path: str | int) -> np.random.Generator:
    """Independent, reproducible random stream for ``(seed, path)``.

    Different ``path`` labels give statistically independent generators, so
    e.g. the Fisher calibration stream and the random-layer stream never
    share draws.
    """
    key = tuple(zlib.crc32(str(p).encode()) for p in path)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def random_gaussian(rows: int, cols: int, stddev: float, stream: np.random.Generator) -> np.ndarray:
    if stddev <= 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    return stream.standard_normal((rows, cols)) * stddev
