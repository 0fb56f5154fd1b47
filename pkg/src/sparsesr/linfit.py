"""Multi-output least squares and ridge fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DesignMatrix


class FitError(ValueError):
    pass


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, DesignMatrix):
        x = x.matrix
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


@dataclass(frozen=True)
class LinearFit:
    """Weights ``W`` (terms x outputs) from minimizing ``||Y - Phi W||^2 + lam ||W||^2``.

    ``lam`` multiplies the plain Frobenius norm against the unnormalized
    residual sum of squares, i.e. the normal matrix is ``Phi'Phi + lam I``.
    """

    W: np.ndarray
    lam: float
    rank: int
    min_norm: bool
    train_mse: np.ndarray

    @property
    def n_terms(self) -> int:
        return self.W.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.W.shape[1]

    def predict(self, phi) -> np.ndarray:
        phi = _as_matrix(phi)
        if phi.shape[1] != self.W.shape[0]:
            raise FitError(f"design has {phi.shape[1]} columns, fit has {self.W.shape[0]} terms")
        return phi @ self.W


def _rcond(shape: tuple[int, int]) -> float:
    return max(shape) * np.finfo(float).eps


def fit_linear(phi, Y, lam: float = 0.0) -> LinearFit:
    Phi = _as_matrix(phi)
    Y = _as_matrix(Y)
    n, p = Phi.shape
    if p == 0 or n == 0:
        raise FitError("empty design matrix")
    if Y.shape[0] != n:
        raise FitError(f"design has {n} rows, targets have {Y.shape[0]}")
    if lam < 0:
        raise FitError("ridge penalty must be non-negative")

    if lam == 0:
        W, _, rank, _ = np.linalg.lstsq(Phi, Y, rcond=_rcond(Phi.shape))
    else:
        # Augmented system keeps the orthogonal-decomposition route for ridge too.
        aug = np.vstack([Phi, np.sqrt(lam) * np.eye(p)])
        rhs = np.vstack([Y, np.zeros((p, Y.shape[1]))])
        W, _, rank, _ = np.linalg.lstsq(aug, rhs, rcond=_rcond(aug.shape))
    resid = Y - Phi @ W
    mse = np.mean(resid**2, axis=0)
    return LinearFit(W=W, lam=float(lam), rank=int(rank), min_norm=bool(rank < p), train_mse=mse)


def mse_per_output(Y, Yhat) -> np.ndarray:
    Y, Yhat = _as_matrix(Y), _as_matrix(Yhat)
    if Y.shape != Yhat.shape:
        raise FitError(f"shape mismatch: {Y.shape} vs {Yhat.shape}")
    return np.mean((Y - Yhat) ** 2, axis=0)


def evaluate_mse(fit: LinearFit, phi, Y) -> tuple[np.ndarray, float]:
    """Per-output MSE on ``(phi, Y)`` and its mean across outputs."""
    per = mse_per_output(Y, fit.predict(phi))
    return per, float(np.mean(per))
