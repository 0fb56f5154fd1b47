"""Per-term influence scores.

Three variants measure how much validation MSE rises when term k leaves the
model:

``no_refit``
    zero ``w_k`` and keep every other weight;
``refit_full``
    refit on train without column k;
``refit_efficient``
    the same leave-one-out weights obtained from one inverse of the normal
    matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .linfit import FitError, LinearFit, _as_matrix, fit_linear, mse_per_output

NO_REFIT = "no_refit"
REFIT_FULL = "refit_full"
REFIT_EFFICIENT = "refit_efficient"
VARIANTS = (NO_REFIT, REFIT_FULL, REFIT_EFFICIENT)

ALPHA_GUARD = 1e-12


@dataclass(frozen=True)
class InfluenceReport:
    delta: np.ndarray  # terms x outputs
    variant: str
    mse_full: np.ndarray
    terms: list[str]
    notes: list[str] = field(default_factory=list)

    @property
    def aggregate(self) -> np.ndarray:
        return aggregate_influence(self)


def aggregate_influence(report: InfluenceReport) -> np.ndarray:
    return np.max(report.delta, axis=1)


def no_refit_delta(W: np.ndarray, phi_val: np.ndarray, Y_val: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form change in MSE from zeroing each weight, plus the full-model MSE."""
    n = phi_val.shape[0]
    R = Y_val - phi_val @ W
    G = phi_val.T @ R  # p x m
    sq = np.sum(phi_val**2, axis=0)[:, None]
    delta = (2.0 / n) * W * G + (W**2 / n) * sq
    return delta, np.mean(R**2, axis=0)


def _refit_full(phi_tr, Y_tr, phi_val, Y_val, lam):
    p = phi_tr.shape[1]
    base = fit_linear(phi_tr, Y_tr, lam)
    mse_full = mse_per_output(Y_val, phi_val @ base.W)
    delta = np.empty((p, Y_val.shape[1]))
    for k in range(p):
        rest = [j for j in range(p) if j != k]
        if not rest:
            delta[k] = np.mean(Y_val**2, axis=0) - mse_full
            continue
        f = fit_linear(phi_tr[:, rest], Y_tr, lam)
        delta[k] = mse_per_output(Y_val, phi_val[:, rest] @ f.W) - mse_full
    return delta, mse_full


def _inverse_normal(phi_tr: np.ndarray, lam: float) -> np.ndarray | None:
    A = phi_tr.T @ phi_tr + lam * np.eye(phi_tr.shape[1])
    try:
        c = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return None
    return linalg.cho_solve(c, np.eye(A.shape[0]), check_finite=False)


def _refit_efficient(phi_tr, Y_tr, phi_val, Y_val, lam, W):
    p = phi_tr.shape[1]
    B = _inverse_normal(phi_tr, lam)
    if B is None or not np.all(np.isfinite(B)):
        return None
    alpha = np.diag(B)
    if np.any(alpha < ALPHA_GUARD * np.trace(B) / p):
        return None
    mse_full = mse_per_output(Y_val, phi_val @ W)
    delta = np.empty((p, Y_val.shape[1]))
    for k in range(p):
        rest = np.arange(p) != k
        if not rest.any():
            delta[k] = np.mean(Y_val**2, axis=0) - mse_full
            continue
        beta = B[rest, k]
        Wk = W[rest] - np.outer(beta / alpha[k], W[k])
        delta[k] = mse_per_output(Y_val, phi_val[:, rest] @ Wk) - mse_full
    return delta, mse_full


def compute_influence(
    fit: LinearFit,
    phi_val,
    Y_val,
    variant: str = NO_REFIT,
    phi_train=None,
    Y_train=None,
    lam: float | None = None,
    terms: list[str] | None = None,
) -> InfluenceReport:
    """Influence of every column of ``phi_val`` under ``variant``.

    The refit variants need the training design and targets. When the normal
    matrix is too ill-conditioned for the rank-one update, ``refit_efficient``
    falls back to explicit refits and says so in ``notes``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown influence variant '{variant}'")
    phi_v = _as_matrix(phi_val)
    Y_v = _as_matrix(Y_val)
    if terms is None:
        terms = getattr(phi_val, "sources", None) or [f"t{k}" for k in range(phi_v.shape[1])]
    if phi_v.shape[1] != fit.n_terms or Y_v.shape[1] != fit.n_outputs or phi_v.shape[0] != Y_v.shape[0]:
        raise FitError("influence inputs do not match the fit")
    notes: list[str] = []
    if variant == NO_REFIT:
        delta, mse_full = no_refit_delta(fit.W, phi_v, Y_v)
    else:
        if phi_train is None or Y_train is None:
            raise ValueError(f"{variant} needs the training design and targets")
        phi_t, Y_t = _as_matrix(phi_train), _as_matrix(Y_train)
        lam = fit.lam if lam is None else lam
        out = None
        if variant == REFIT_EFFICIENT:
            out = _refit_efficient(phi_t, Y_t, phi_v, Y_v, lam, fit.W)
            if out is None:
                notes.append("normal matrix singular or ill-conditioned; fell back to refit_full")
        if out is None:
            out = _refit_full(phi_t, Y_t, phi_v, Y_v, lam)
        delta, mse_full = out
    return InfluenceReport(delta=delta, variant=variant, mse_full=mse_full, terms=list(terms), notes=notes)
