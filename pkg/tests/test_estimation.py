import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from subevo import (DataModel, DomainError, LossModel, NoiseLaw, RegimeParams, SeparationError,
                    SingularCurvatureError, eta_sigma2_hat, fit_mestimator, gamma_hat,
                    sample_dataset, sigma2_hat, solve_system)
from subevo.estimation import GammaHat, gamma_hat_from_curvature

HUBER = LossModel.huber()
LOGISTIC = LossModel.logistic()


def robust_data(n, p, seed, scale=3.0):
    return sample_dataset(DataModel.robust(NoiseLaw(2.0, scale)), n, p, seed)


@pytest.mark.parametrize("loss", [HUBER, LossModel.pseudo_huber()], ids=lambda l: l.name)
def test_noiseless_recovery(loss):
    rng = np.random.default_rng(0)
    p = 20
    X = rng.standard_normal((2 * p, p))
    beta = rng.standard_normal(p)
    fit = fit_mestimator(X, X @ beta, None, loss)
    assert np.max(np.abs(fit.beta_hat - beta)) <= 1e-8


def _coordinate_descent(X, y, tol=1e-12):
    b = np.zeros(X.shape[1])
    for _ in range(10000):
        for j in range(X.shape[1]):
            for _ in range(50):
                mu = special.expit(X @ b)
                g = X[:, j] @ (mu - y)
                h = X[:, j] ** 2 @ (mu * (1 - mu))
                b[j] -= g / h
                if abs(g) < tol * 1e-2:
                    break
        if np.linalg.norm(X.T @ (special.expit(X @ b) - y)) <= tol:
            return b
    raise AssertionError("oracle did not converge")


def test_logistic_fit_matches_coordinate_descent():
    X, y = sample_dataset(DataModel.logistic(1.0), 50, 2, 3)
    fit = fit_mestimator(X, y, None, LOGISTIC)
    assert np.max(np.abs(fit.beta_hat - _coordinate_descent(X, y))) <= 1e-8


def test_subset_size_must_exceed_p():
    X, y = robust_data(30, 10, 1)
    with pytest.raises(DomainError):
        fit_mestimator(X, y, np.arange(10), HUBER)


def test_separated_logistic_raises():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((40, 3))
    y = (X[:, 0] > 0).astype(float)
    with pytest.raises(SeparationError):
        fit_mestimator(X, y, None, LOGISTIC)


@pytest.mark.parametrize("loss,mode", [(HUBER, "robust"), (LossModel.pseudo_huber(), "robust"),
                                       (LOGISTIC, "logistic")], ids=["huber", "ph", "logistic"])
def test_fit_invariants(loss, mode):
    model = DataModel.robust(NoiseLaw(2.0, 3.0)) if mode == "robust" else DataModel.logistic(1.0)
    X, y = sample_dataset(model, 600, 60, 4)
    I = np.sort(np.random.default_rng(5).permutation(600)[:400])
    fit = fit_mestimator(X, y, I, loss)
    XI, yI = X[I], y[I]
    u = XI @ fit.beta_hat
    assert np.linalg.norm(XI.T @ loss.d1(yI, u)) <= 1e-7 * np.sqrt(I.size)
    outside = np.setdiff1d(np.arange(600), I)
    assert np.all(fit.psi[outside] == 0.0)
    assert np.array_equal(fit.psi[I], -loss.d1(yI, u))
    assert np.max(np.abs(fit.psi)) <= 1.0
    assert np.all(np.diff(fit.objective_trace) <= 1e-9 * abs(fit.objective_trace[0]))
    assert np.all(loss.d2(yI, u) >= 0.0)


def test_heavy_noise_huber_fit_converges():
    # few residuals start inside the quadratic zone: the Hessian is singular at the start
    X, y = robust_data(2000, 400, 14, scale=10.0)
    fit = fit_mestimator(X, y, np.arange(1200), HUBER)
    assert fit.grad_norm <= 1e-8 * np.sqrt(1200)


def test_gamma_hat_scalar_case():
    assert gamma_hat_from_curvature(np.ones((2, 1)), np.ones(2)) == pytest.approx(1.0)


@given(c=st.lists(st.floats(0.05, 3.0), min_size=3, max_size=8),
       x=st.lists(st.floats(0.2, 3.0), min_size=8, max_size=8))
def test_gamma_hat_scalar_closed_form_and_doubling(c, x):
    c = np.array(c)
    x = np.array(x[:c.size])[:, None]
    denom = c.sum() - np.sum(c ** 2 * x[:, 0] ** 2) / np.sum(c * x[:, 0] ** 2)
    if denom <= 1e-8 * c.sum():
        return
    g1 = gamma_hat_from_curvature(x, c)
    assert g1 == pytest.approx(1.0 / denom, rel=1e-10)
    # the bracket is homogeneous of degree one in the curvatures
    assert g1 / gamma_hat_from_curvature(x, 2 * c) == pytest.approx(2.0, rel=1e-12)


def test_gamma_hat_singular_curvature():
    X = np.random.default_rng(0).standard_normal((10, 3))
    with pytest.raises(SingularCurvatureError):
        gamma_hat_from_curvature(X, np.zeros(10))


def test_plugin_trivial_cases():
    X, y = robust_data(300, 30, 6)
    a = fit_mestimator(X, y, np.arange(150), HUBER)
    b = fit_mestimator(X, y, np.arange(150, 300), HUBER)
    ga, gb = gamma_hat(X, y, a, HUBER), gamma_hat(X, y, b, HUBER)
    assert eta_sigma2_hat(a, ga, b, gb, 30) == 0.0
    assert eta_sigma2_hat(a, ga, a, ga, 30) == sigma2_hat(a, ga, 30)
    assert eta_sigma2_hat(a, ga, b, gb, 30) == eta_sigma2_hat(b, gb, a, ga, 30)
    zero = type(a)(a.beta_hat, np.zeros_like(a.psi), 0.0, 0, a.subset)
    assert sigma2_hat(zero, ga, 30) == 0.0


def test_plugin_symmetry_to_the_bit():
    X, y = robust_data(400, 40, 7)
    rng = np.random.default_rng(8)
    I, J = (np.sort(rng.permutation(400)[:250]) for _ in range(2))
    a, b = fit_mestimator(X, y, I, HUBER), fit_mestimator(X, y, J, HUBER)
    ga, gb = gamma_hat(X, y, a, HUBER), gamma_hat(X, y, b, HUBER)
    assert eta_sigma2_hat(a, ga, b, gb, 40) == eta_sigma2_hat(b, gb, a, ga, 40)


def test_sigma2_hat_row_permutation_invariance():
    X, y = robust_data(400, 40, 9)
    I = np.arange(300)
    fit = fit_mestimator(X, y, I, HUBER)
    v = sigma2_hat(fit, gamma_hat(X, y, fit, HUBER), 40)
    perm = np.random.default_rng(10).permutation(400)
    inv = np.argsort(perm)
    Xp, yp, Ip = X[perm], y[perm], np.sort(inv[I])
    fp = fit_mestimator(Xp, yp, Ip, HUBER)
    vp = sigma2_hat(fp, gamma_hat(Xp, yp, fp, HUBER), 40)
    assert vp == pytest.approx(v, rel=1e-10)


@pytest.mark.slow
@pytest.mark.parametrize("loss", [HUBER, LossModel.pseudo_huber()], ids=lambda l: l.name)
def test_gamma_hat_and_sigma2_hat_match_theory_on_average(loss):
    # single heavy-tailed fits scatter by ~10%; average over independent datasets
    model = DataModel.robust(NoiseLaw(2.0, 3.0))
    n, p, q = 2000, 400, 0.8
    st_ = solve_system(RegimeParams(n / p, q, model, loss))
    I = np.arange(int(q * n))
    g, s2 = [], []
    for seed in range(20):
        X, y = sample_dataset(model, n, p, 100 + seed)
        fit = fit_mestimator(X, y, I, loss)
        gh = gamma_hat(X, y, fit, loss)
        g.append(gh.value)
        s2.append(sigma2_hat(fit, gh, p))
    assert np.mean(g) == pytest.approx(st_.gamma, rel=0.05)
    assert np.mean(s2) == pytest.approx(st_.sigma2, rel=0.05)
