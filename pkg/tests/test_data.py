import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special, stats

from subevo import DataModel, DesignLaw, DomainError, NoiseLaw, noise_quantile, sample_dataset


def t2_quantile(u):
    return (2 * u - 1) / np.sqrt(2 * u * (1 - u))


def test_quantile_examples():
    law = NoiseLaw(2.0, 1.0)
    assert noise_quantile(law, 0.5) == 0.0
    assert noise_quantile(law, 0.75) == pytest.approx(0.8165, abs=1e-3)
    assert noise_quantile(law, 0.75) == pytest.approx(t2_quantile(0.75), rel=1e-14)
    assert noise_quantile(NoiseLaw(2.0, 3.0), 0.75) == pytest.approx(3 * t2_quantile(0.75))


def test_quantile_general_df_matches_scipy():
    u = np.linspace(0.01, 0.99, 51)
    assert np.allclose(NoiseLaw(3.0, 2.0).quantile(u), 2.0 * stats.t.ppf(u, 3.0), rtol=1e-10)


@pytest.mark.parametrize("u", [0.0, 1.0, -0.1, 1.5])
def test_quantile_domain(u):
    with pytest.raises(DomainError):
        noise_quantile(NoiseLaw(), u)


@given(u=st.floats(1e-9, 0.5 - 1e-9), df=st.sampled_from([1.5, 2.0, 3.0, 7.0]))
def test_quantile_symmetric_and_increasing(u, df):
    law = NoiseLaw(df, 1.7)
    upper = 1 - u
    u = 1 - upper  # exact complement of upper
    a, b = noise_quantile(law, u), noise_quantile(law, upper)
    assert a == pytest.approx(-b, rel=1e-9, abs=1e-12)
    assert noise_quantile(law, u * 0.9) < a


def test_invalid_laws():
    with pytest.raises(DomainError):
        NoiseLaw(2.0, 0.0)
    with pytest.raises(DomainError):
        DataModel.logistic(1.0, beta_star=[1.0, 1.0])
    with pytest.raises(DomainError):
        sample_dataset(DataModel.robust(NoiseLaw(), beta_star=[1.0, 2.0]), 10, 3, 0)


def test_zero_signal_response_is_noise():
    model = DataModel.robust(NoiseLaw(2.0, 3.0))
    X, y = sample_dataset(model, 50, 4, 7)
    rng = np.random.default_rng(7)
    model.design.sample(rng, (50, 4))
    assert np.array_equal(y, model.noise.sample(rng, 50))


def test_deterministic_given_seed():
    model = DataModel.logistic(1.0)
    a = sample_dataset(model, 30, 5, 11)
    b = sample_dataset(model, 30, 5, 11)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_logistic_null_mean():
    _, y = sample_dataset(DataModel.logistic(0.0), 100_000, 1, 1)
    assert abs(y.mean() - 0.5) <= 0.005


def test_t2_abs_median():
    _, y = sample_dataset(DataModel.robust(NoiseLaw(2.0, 3.0)), 100_000, 1, 2)
    assert abs(np.median(np.abs(y)) - 3 * t2_quantile(0.75)) <= 0.1


@pytest.mark.parametrize("df", [2.0, 3.0])
def test_sampling_matches_cdf(df):
    law = NoiseLaw(df, 2.0)
    e = law.sample(np.random.default_rng(3), 1_000_000)
    assert stats.kstest(e, law.cdf).statistic <= 0.005


@pytest.mark.parametrize("kind", ["gaussian", "rademacher", "uniform", "student_t"])
def test_design_normalisation(kind):
    law = DesignLaw(kind)
    n = 1_000_000
    x = law.sample(np.random.default_rng(4), n)
    kurt = min(law.excess_kurtosis, 50.0)
    assert abs(x.mean()) <= 3 / np.sqrt(n)
    assert abs(x.var() - 1) <= 3 * np.sqrt((2 + max(kurt, 0.0)) / n)


def test_logistic_link_by_decile():
    model = DataModel.logistic(2.0)
    X, y = sample_dataset(model, 200_000, 4, 5)
    lin = X @ model.beta_for(4)
    edges = np.quantile(lin, np.linspace(0, 1, 11))
    which = np.clip(np.searchsorted(edges, lin, side="right") - 1, 0, 9)
    for k in range(10):
        sel = which == k
        prob = special.expit(lin[sel]).mean()
        se = np.sqrt(prob * (1 - prob) / sel.sum())
        assert abs(y[sel].mean() - prob) <= 3 * se
