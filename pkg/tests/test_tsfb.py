import csv
import logging
import math

import numpy as np
import pytest

from tsnf.distributions import make_rng, sample_software_posterior, software_posterior_params
from tsnf.oracle import GaussianHierOracle, ks_two_sample, normal_cdf
from tsnf.tsfb import TsfbConfig, gamma_conditional_draw, tsfb_run

Y3 = np.array([-4.2, -5.5, -6.1])


# --- gamma | theta -------------------------------------------------------------


def test_gamma_conditional_moments():
    rng = make_rng(0)
    draws = np.array([gamma_conditional_draw([1.0, 1.0, 1.0], 2.0, rng) for _ in range(100_000)])
    assert draws.mean() == pytest.approx(1.0, abs=0.02)
    assert draws.var() == pytest.approx(4.0 / 3.0, abs=0.02)


def test_gamma_conditional_ks_against_analytic():
    rng = make_rng(1)
    theta = np.array([0.5, -1.0, 2.0, 0.1])
    draws = np.array([gamma_conditional_draw(theta, 1.5, rng) for _ in range(100_000)])
    res = ks_two_sample(draws, lambda x: normal_cdf(x, theta.mean(), 1.5 / 2.0))
    assert res.statistic < 0.01


def test_gamma_conditional_collapses_as_tau_vanishes():
    rng = make_rng(2)
    draws = [gamma_conditional_draw([1.0, 2.0, 6.0], 1e-12, rng) for _ in range(100)]
    assert np.allclose(draws, 3.0, atol=1e-9)
    with pytest.raises(ValueError):
        gamma_conditional_draw([1.0], 0.0, rng)


# --- chain ---------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        TsfbConfig(iterations=0)
    with pytest.raises(ValueError):
        TsfbConfig(tau=-1.0)
    with pytest.raises(ValueError):
        TsfbConfig(ratio="posterior")
    with pytest.raises(ValueError):
        TsfbConfig(gamma_prior="jeffreys")


def test_pool_needs_two_draws():
    with pytest.raises(ValueError):
        tsfb_run(np.zeros((1, 3)), TsfbConfig(iterations=5))


def test_degenerate_pool_warns_but_runs(caplog):
    with caplog.at_level(logging.WARNING, logger="tsnf.tsfb"):
        chain = tsfb_run(np.ones((10, 2)), TsfbConfig(iterations=20))
    assert "degenerate" in caplog.text
    assert np.all(chain.theta == 1.0)


def test_prior_ratio_is_one_when_software_prior_matches_hierarchical_prior():
    # software prior N(0, tau^2) and gamma pinned at 0: the prior ratio cancels exactly
    pool = sample_software_posterior(Y3, 2.0, 1.0, 500, make_rng(3))
    cfg = TsfbConfig(iterations=2000, tau=2.0, gamma_prior=0.0, software_prior_sd=2.0, seed=4)
    chain = tsfb_run(pool, cfg)
    assert np.all(chain.acceptance_rate() == 1.0)


def test_posterior_ratio_accepts_everything_when_proposal_is_the_conditional():
    # pool drawn from the per-group conditional; target and proposal log densities identical
    m, v = software_posterior_params(Y3, None, 1.0)

    def log_cond(t, i):
        return -0.5 * (t - m[i]) ** 2 / v[i]

    pool = sample_software_posterior(Y3, None, 1.0, 1000, make_rng(5))
    cfg = TsfbConfig(
        iterations=3000,
        tau=2.0,
        ratio="posterior",
        log_target=lambda t, g, i: log_cond(t, i),
        log_proposal=log_cond,
        seed=6,
    )
    chain = tsfb_run(pool, cfg)
    assert np.all(chain.accepted)


def test_chain_only_visits_pool_values():
    pool = sample_software_posterior(Y3, 0.5, 1.0, 300, make_rng(7))
    chain = tsfb_run(pool, TsfbConfig(iterations=2000, tau=2.0, software_prior_sd=0.5, seed=8))
    for j in range(3):
        assert np.all(np.isin(chain.theta[:, j], pool[:, j]))
        assert chain.theta[:, j].min() >= pool[:, j].min()
        assert chain.theta[:, j].max() <= pool[:, j].max()


def test_flat_prior_gamma_marginal_matches_oracle():
    sigma, tau = 1.0, 2.0
    pool = sample_software_posterior(Y3, None, sigma, 15_000, make_rng(9))
    chain = tsfb_run(pool, TsfbConfig(iterations=30_000, tau=tau, seed=10))
    gm, gv = GaussianHierOracle(tuple(Y3), sigma, tau).gamma_posterior()
    res = ks_two_sample(chain.gamma, lambda x: normal_cdf(x, gm, math.sqrt(gv)))
    assert res.statistic < 0.05


def test_chain_is_bit_reproducible():
    pool = sample_software_posterior(Y3, 0.5, 1.0, 200, make_rng(11))
    cfg = TsfbConfig(iterations=500, tau=2.0, software_prior_sd=0.5, seed=12)
    a, b = tsfb_run(pool, cfg), tsfb_run(pool, cfg)
    assert np.array_equal(a.samples(), b.samples())
    assert np.array_equal(a.accepted, b.accepted)


def test_single_group_pool_accepts_a_vector():
    chain = tsfb_run(make_rng(13).standard_normal(50), TsfbConfig(iterations=10))
    assert chain.theta.shape == (10, 1)


def test_chain_csv_layout(tmp_path):
    pool = sample_software_posterior(Y3, None, 1.0, 50, make_rng(14))
    chain = tsfb_run(pool, TsfbConfig(iterations=5, seed=15))
    chain.to_csv(tmp_path / "chain.csv")
    with (tmp_path / "chain.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "theta_1", "theta_2", "theta_3", "gamma", "accepted_1", "accepted_2", "accepted_3"]
    assert len(rows) == 6
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5]
    assert float(rows[3][4]) == chain.gamma[2]
    assert all(r[5] in ("0", "1") for r in rows[1:])
