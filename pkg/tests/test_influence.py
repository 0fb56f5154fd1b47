import numpy as np
import pytest

from sparsesr.influence import (
    NO_REFIT,
    REFIT_EFFICIENT,
    REFIT_FULL,
    aggregate_influence,
    compute_influence,
)
from sparsesr.linfit import fit_linear, mse_per_output


def problem(rng, n=50, p=8, m=3):
    X = rng.standard_normal((n, p))
    Y = X @ rng.standard_normal((p, m)) + 0.1 * rng.standard_normal((n, m))
    Xv = rng.standard_normal((n, p))
    Yv = Xv @ rng.standard_normal((p, m)) * 0.5 + 0.1 * rng.standard_normal((n, m))
    return X, Y, Xv, Yv


def brute_zero(W, Xv, Yv):
    base = mse_per_output(Yv, Xv @ W)
    out = []
    for k in range(W.shape[0]):
        W0 = W.copy()
        W0[k] = 0.0
        out.append(mse_per_output(Yv, Xv @ W0) - base)
    return np.array(out)


def brute_refit(X, Y, Xv, Yv, lam=0.0):
    full = fit_linear(X, Y, lam)
    base = mse_per_output(Yv, Xv @ full.W)
    out = []
    for k in range(X.shape[1]):
        keep = [j for j in range(X.shape[1]) if j != k]
        f = fit_linear(X[:, keep], Y, lam)
        out.append(mse_per_output(Yv, Xv[:, keep] @ f.W) - base)
    return np.array(out)


def test_no_refit_matches_zeroing(rng):
    X, Y, Xv, Yv = problem(rng)
    fit = fit_linear(X, Y)
    rep = compute_influence(fit, Xv, Yv, NO_REFIT)
    np.testing.assert_allclose(rep.delta, brute_zero(fit.W, Xv, Yv), rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("lam", [0.0, 0.5])
def test_refit_variants_match_brute_force(rng, lam):
    X, Y, Xv, Yv = problem(rng)
    fit = fit_linear(X, Y, lam)
    ref = brute_refit(X, Y, Xv, Yv, lam)
    for v in (REFIT_FULL, REFIT_EFFICIENT):
        rep = compute_influence(fit, Xv, Yv, v, phi_train=X, Y_train=Y, lam=lam)
        np.testing.assert_allclose(rep.delta, ref, rtol=1e-8, atol=1e-12)
        assert not rep.notes


def test_efficient_falls_back_on_singular_design(rng):
    X, Y, Xv, Yv = problem(rng, p=4)
    X = np.column_stack([X, X[:, 0]])
    Xv = np.column_stack([Xv, Xv[:, 0]])
    fit = fit_linear(X, Y)
    rep = compute_influence(fit, Xv, Yv, REFIT_EFFICIENT, phi_train=X, Y_train=Y)
    assert rep.notes and "refit_full" in rep.notes[0]
    full = compute_influence(fit, Xv, Yv, REFIT_FULL, phi_train=X, Y_train=Y)
    np.testing.assert_array_equal(rep.delta, full.delta)


def test_aggregate_is_max_over_outputs(rng):
    X, Y, Xv, Yv = problem(rng)
    rep = compute_influence(fit_linear(X, Y), Xv, Yv)
    np.testing.assert_array_equal(aggregate_influence(rep), rep.delta.max(axis=1))
    assert rep.aggregate.shape == (8,)


def test_refit_needs_training_data(rng):
    X, Y, Xv, Yv = problem(rng)
    with pytest.raises(ValueError):
        compute_influence(fit_linear(X, Y), Xv, Yv, REFIT_FULL)
    with pytest.raises(ValueError):
        compute_influence(fit_linear(X, Y), Xv, Yv, "sideways")
