import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import optimize, special

from subevo import DomainError, LossModel, loss_d1, loss_d2, loss_value, prox, prox_d1

ROBUST = [LossModel.huber(), LossModel.pseudo_huber(), LossModel.scaled_pseudo_huber(0.5),
          LossModel.scaled_pseudo_huber(3.0)]
ALL = ROBUST + [LossModel.logistic()]
finite = st.floats(-20, 20, allow_nan=False)
gammas = st.floats(1e-3, 50.0)


def response(loss, draw_bit):
    return float(draw_bit) if not loss.is_robust else 2.0 * draw_bit - 0.7


def test_loss_values_at_origin():
    assert loss_value(LossModel.huber(), 0.0, 0.0) == 0.0
    assert loss_value(LossModel.pseudo_huber(), 0.0, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert loss_value(LossModel.logistic(), 1.0, 0.0) == pytest.approx(math.log(2.0), abs=1e-15)


def test_derivatives_at_origin():
    assert loss_d1(LossModel.pseudo_huber(), 0.0, 0.0) == 0.0
    assert loss_d2(LossModel.pseudo_huber(), 0.0, 0.0) == pytest.approx(1.0)
    assert loss_d1(LossModel.logistic(), 1.0, 0.0) == pytest.approx(-0.5)


def test_logistic_rejects_bad_response():
    with pytest.raises(DomainError):
        loss_value(LossModel.logistic(), 0.5, 0.0)


def test_non_lipschitz_loss_rejected():
    with pytest.raises(DomainError):
        LossModel.from_name("squared")


def test_robust_loss_is_rho_of_residual():
    loss = LossModel.pseudo_huber()
    assert loss_value(loss, 2.0, -1.0) == pytest.approx(math.sqrt(1 + 9.0))


def test_huber_prox_golden_section_oracle():
    loss = LossModel.huber()
    for x, expected in ((4.0, 3.0), (1.0, 0.5)):
        obj = lambda p: 0.5 * (x - p) ** 2 + loss_value(loss, 0.0, p)
        ref = optimize.minimize_scalar(obj, bracket=(-10, 0, 10), method="golden",
                                       options={"xtol": 1e-12}).x
        assert prox(loss, 0.0, 1.0, x) == pytest.approx(expected, abs=1e-12)
        assert ref == pytest.approx(expected, abs=1e-7)


def test_logistic_prox_bisection_oracle():
    root = optimize.bisect(lambda p: p + 2.0 * (special.expit(p) - 1.0), -10, 10, xtol=1e-15)
    assert prox(LossModel.logistic(), 1.0, 2.0, 0.0) == pytest.approx(root, abs=1e-12)


@pytest.mark.parametrize("loss", ALL, ids=lambda l: l.name)
def test_identity_limit(loss):
    y = 1.0 if not loss.is_robust else 0.3
    assert prox(loss, y, 1e-12, 3.7) == pytest.approx(3.7, abs=1e-6)
    assert prox_d1(loss, y, 1e-12, 2.0) == pytest.approx(1.0, abs=1e-6)


def test_prox_d1_examples():
    assert prox_d1(LossModel.pseudo_huber(), 0.0, 1.0, 0.0) == pytest.approx(0.5)
    loss = LossModel.logistic()
    x, h = 0.8, 1e-5
    fd = (prox(loss, 1.0, 1.0, x + h) - prox(loss, 1.0, 1.0, x - h)) / (2 * h)
    p = prox(loss, 1.0, 1.0, x)
    s = special.expit(p)
    assert prox_d1(loss, 1.0, 1.0, x) == pytest.approx(1.0 / (1.0 + s * (1 - s)), abs=1e-12)
    assert prox_d1(loss, 1.0, 1.0, x) == pytest.approx(fd, abs=1e-5)


@pytest.mark.parametrize("loss", ALL, ids=lambda l: l.name)
@given(x1=finite, x2=finite, gamma=gammas, bit=st.integers(0, 1))
def test_prox_monotone_contraction(loss, x1, x2, gamma, bit):
    y = response(loss, bit)
    lo, hi = sorted((x1, x2))
    p_lo, p_hi = prox(loss, y, gamma, lo), prox(loss, y, gamma, hi)
    assert -1e-12 <= p_hi - p_lo <= hi - lo + 1e-12


@pytest.mark.parametrize("loss", ALL, ids=lambda l: l.name)
def test_prox_stationarity_grid(loss):
    rng = np.random.default_rng(3)
    for g in rng.uniform(0.01, 20, 10):
        x = rng.uniform(-20, 20, 2000)
        y = rng.integers(0, 2, 2000).astype(float)
        if loss.is_robust:
            y = 5 * rng.standard_normal(2000)
        p = loss.prox(y, g, x)
        assert np.max(np.abs(x - p - g * loss.d1(y, p))) <= 1e-10


@pytest.mark.parametrize("loss", ALL, ids=lambda l: l.name)
def test_prox_minimises_objective(loss):
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, g = rng.uniform(-8, 8), rng.uniform(0.05, 10)
        y = 1.0 if not loss.is_robust else rng.normal()
        obj = lambda p: 0.5 * (x - p) ** 2 + g * loss_value(loss, y, p)
        ref = optimize.minimize_scalar(obj, bounds=(-30, 30), method="bounded",
                                       options={"xatol": 1e-10}).x
        assert prox(loss, y, g, x) == pytest.approx(ref, abs=1e-6)


@pytest.mark.parametrize("loss", ALL, ids=lambda l: l.name)
def test_derivatives_match_finite_differences(loss):
    rng = np.random.default_rng(5)
    u = rng.uniform(-6, 6, 2000)
    y = rng.integers(0, 2, 2000).astype(float) if not loss.is_robust else rng.normal(size=2000)
    if loss.kind == "huber":
        t = y - u
        keep = np.abs(np.abs(t) - 1.0) >= 1e-4
        u, y = u[keep], y[keep]
    h = 1e-5
    d1_fd = (loss.value(y, u + h) - loss.value(y, u - h)) / (2 * h)
    d2_fd = (loss.d1(y, u + h) - loss.d1(y, u - h)) / (2 * h)
    d1, d2 = loss.d1(y, u), loss.d2(y, u)
    assert np.all(np.abs(d1 - d1_fd) <= 1e-6 * np.maximum(1.0, np.abs(d1)))
    assert np.all(np.abs(d2 - d2_fd) <= 1e-6 * np.maximum(1.0, np.abs(d2)))


@pytest.mark.parametrize("loss", ROBUST, ids=lambda l: l.name)
def test_robust_derivative_bounds(loss):
    t = np.linspace(-50, 50, 20001)
    d1 = loss.d1(np.zeros_like(t), t)
    d2 = loss.d2(np.zeros_like(t), t)
    assert np.max(np.abs(d1)) <= 1.0
    assert np.max(d2) <= 1.0 and np.min(d2) >= 0.0
    if loss.satisfies_curvature_assumption:
        assert np.min(d2) > 0.0
    else:
        assert set(np.unique(d2)) <= {0.0, 1.0}


def test_logistic_curvature_range():
    u = np.linspace(-30, 30, 1001)
    d2 = LossModel.logistic().d2(np.ones_like(u), u)
    assert np.all(d2 > 0) and np.max(d2) <= 0.25


@pytest.mark.parametrize("loss", ALL, ids=lambda l: l.name)
@given(x=finite, gamma=gammas, bit=st.integers(0, 1))
def test_prox_d1_formula(loss, x, gamma, bit):
    y = response(loss, bit)
    p = prox(loss, y, gamma, x)
    d = prox_d1(loss, y, gamma, x)
    assert 0.0 < d <= 1.0
    if not (loss.kind == "huber" and abs(abs(y - p) - 1.0) < 1e-9):
        assert d == pytest.approx(1.0 / (1.0 + gamma * loss_d2(loss, y, p)), rel=1e-12)


def test_scaled_pseudo_huber_prefactor():
    lam = 2.0
    loss = LossModel.scaled_pseudo_huber(lam)
    t = 1.3
    expected = lam ** 2 / (1 + lam) * math.sqrt(1 + (t / lam) ** 2)
    assert loss_value(loss, t, 0.0) == pytest.approx(expected, rel=1e-14)


def test_huber_prox_kink_uses_right_limit():
    # z = 1 + gamma sits on the kink; the derivative is the value for |z| > 1 + gamma
    assert prox_d1(LossModel.huber(), 0.0, 1.0, 2.0) in (0.5, 1.0)
