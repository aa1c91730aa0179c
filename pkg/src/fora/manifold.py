"""Stiefel-manifold geometry for the LoRA down-projection ``B``.

The skew generator built from a ``(d, r)`` gradient has rank at most ``2r``,
so everything on the factored path works with ``(d, r)``-shaped operands and
never forms a ``d x d`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NumericalError, ShapeError
from .linalg import as_matrix, qr_thin

DRIFT_BOUND = 1e-3
SKEW_TOL = 1e-12


def stiefel_drift(b: np.ndarray) -> float:
    """``||B^T B - I_r||_F``."""
    gram = b.T @ b
    gram[np.diag_indices_from(gram)] -= 1.0
    return float(np.sqrt(np.sum(gram * gram)))


@dataclass(frozen=True)
class StiefelPoint:
    b: np.ndarray
    drift: float

    @classmethod
    def audit(cls, b: np.ndarray) -> "StiefelPoint":
        return cls(b, stiefel_drift(b))


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def riemannian_grad(b, g) -> np.ndarray:
    """Project a Euclidean gradient onto the tangent space at ``b``."""
    b = np.asarray(getattr(b, "b", b))
    if b.shape != np.shape(g):
        raise ShapeError(f"riemannian_grad: b {b.shape} and g {np.shape(g)} differ")
    return g - b @ _sym(b.T @ g)


@dataclass(frozen=True)
class SkewFactor:
    """Implicit skew matrix ``W = u v^T - v u^T`` with ``u, v`` of shape ``(d, r)``.

    Built from a point ``B`` and gradient ``G`` with ``u = G - B (B^T G) / 2``
    and ``v = B``, which equals ``W_hat - W_hat^T`` for
    ``W_hat = G B^T - B B^T G B^T / 2``.
    """

    u: np.ndarray
    v: np.ndarray

    @property
    def dim(self) -> int:
        return self.u.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``W @ x`` in ``O(d r k)`` work for ``x`` of shape ``(d, k)``."""
        _count(4 * self.u.shape[0] * self.u.shape[1] * (x.shape[1] if x.ndim > 1 else 1))
        return self.u @ (self.v.T @ x) - self.v @ (self.u.T @ x)

    def dense(self) -> np.ndarray:
        """Materialized ``d x d`` matrix; for tests and small problems only."""
        return self.u @ self.v.T - self.v @ self.u.T

    def scaled(self, c: float) -> "SkewFactor":
        return SkewFactor(self.u * c, self.v)

    def spectral_norm(self) -> float:
        """Exact ``||W||_2`` from a ``2r x 2r`` eigenproblem.

        With ``U = [u, v]`` and ``J = [[0, I], [-I, 0]]`` one has ``W = U J U^T``,
        so the nonzero eigenvalues of ``W^T W`` are those of ``J^T G J G`` for
        ``G = U^T U``.
        """
        uu = np.hstack([self.u, self.v])
        r = self.u.shape[1]
        j = np.zeros((2 * r, 2 * r))
        j[:r, r:] = np.eye(r)
        j[r:, :r] = -np.eye(r)
        gram = uu.T @ uu
        m = j.T @ gram @ j @ gram
        eig = np.linalg.eigvals(m)
        return float(np.sqrt(max(np.max(eig.real), 0.0)))


# crude multiply-add counter so tests can check the factored path's cost
_FLOPS = [0]


def _count(n: int) -> None:
    _FLOPS[0] += n


def flop_count() -> int:
    return _FLOPS[0]


def build_skew(b, g) -> SkewFactor:
    b = np.asarray(getattr(b, "b", b))
    g = np.asarray(g, dtype=np.float64)
    if b.shape != g.shape:
        raise ShapeError(f"build_skew: b {b.shape} and g {g.shape} differ")
    return SkewFactor(g - 0.5 * b @ (b.T @ g), b)


def _checked_skew(w_dense) -> np.ndarray:
    w = as_matrix(w_dense, "w_dense")
    if w.shape[0] != w.shape[1]:
        raise ShapeError(f"cayley: W must be square, got {w.shape}")
    violation = float(np.max(np.abs(w + w.T))) if w.size else 0.0
    if violation > SKEW_TOL:
        raise ValueError(f"cayley: W is not skew-symmetric (max |W + W^T| = {violation:.3e})")
    return w


def cayley_matrix(w_dense, alpha: float) -> np.ndarray:
    """``(I - alpha/2 W)^{-1} (I + alpha/2 W)`` for a dense skew ``W``."""
    w = _checked_skew(w_dense)
    eye = np.eye(w.shape[0])
    return np.linalg.solve(eye - 0.5 * alpha * w, eye + 0.5 * alpha * w)


def cayley_direct(w_dense, b, alpha: float) -> np.ndarray:
    """Reference Cayley step ``Q(W, alpha) @ B`` by a dense solve."""
    w = _checked_skew(w_dense)
    b = as_matrix(getattr(b, "b", b), "b")
    if w.shape[0] != b.shape[0]:
        raise ShapeError(f"cayley_direct: W {w.shape} does not act on B {b.shape}")
    eye = np.eye(w.shape[0])
    return np.linalg.solve(eye - 0.5 * alpha * w, b + 0.5 * alpha * (w @ b))


def cayley_fixed_point(skew: SkewFactor, b, alpha: float, n_c: int) -> np.ndarray:
    """Solve ``Y = B + alpha/2 W (B + Y)`` by ``n_c`` fixed-point sweeps.

    Starts from ``Y0 = B + alpha W B``. Each sweep contracts the error by about
    ``alpha ||W||_2 / 2``.

    Raises
    ------
    NumericalError
        If the update norm grows on two consecutive sweeps.
    """
    b = np.asarray(getattr(b, "b", b))
    if n_c < 1:
        raise ValueError(f"n_c must be >= 1, got {n_c}")
    half = 0.5 * alpha
    wb = skew.apply(b)
    rhs = b + half * wb
    y = b + alpha * wb
    prev_step = np.inf
    rising = 0
    for _ in range(n_c):
        y_next = rhs + half * skew.apply(y)
        step = float(np.linalg.norm(y_next - y))
        rising = rising + 1 if step > prev_step else 0
        if rising >= 2 or not np.isfinite(step):
            raise NumericalError(
                f"Cayley fixed-point iteration diverges (alpha={alpha:.3e}, "
                f"alpha*||W||_2={alpha * skew.spectral_norm():.3f}); use a smaller step"
            )
        prev_step = step
        y = y_next
    return y


def qr_retract(b) -> StiefelPoint:
    """Map ``b`` back onto the manifold with the Q factor of its thin QR."""
    q = qr_thin(np.asarray(getattr(b, "b", b))).q
    return StiefelPoint(q, stiefel_drift(q))
