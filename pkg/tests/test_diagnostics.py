"""Chain diagnostics against processes with known autocorrelation."""
import math

import numpy as np
import pytest

from smcbridge import (ChainState, RwProposal, diagnostics_report,
                       ess_batch_means, iac_time, iid_gaussian_model,
                       lambda_penalty_check, msjd, run_chain, simulate)
from smcbridge.diagnostics import LambdaSample
from smcbridge.rng import derive_rng


def _ar1(rho, n, rng):
    out = np.empty(n)
    out[0] = rng.standard_normal() / math.sqrt(1 - rho * rho)
    innov = rng.standard_normal(n - 1)
    for i in range(1, n):
        out[i] = rho * out[i - 1] + innov[i - 1]
    return out


class TestIacTime:
    def test_white_noise_is_one(self):
        x = derive_rng(1, "wn").standard_normal(200000)
        assert iac_time(x) == pytest.approx(1.0, abs=0.05)

    @pytest.mark.parametrize("rho", [0.5, 0.8])
    def test_ar1_matches_closed_form(self, rho):
        # IAC of AR(1) is (1 + rho) / (1 - rho)
        x = _ar1(rho, 300000, derive_rng(2, "ar", rho))
        expected = (1 + rho) / (1 - rho)
        assert iac_time(x) == pytest.approx(expected, rel=0.1)

    def test_never_below_one(self):
        x = np.tile([1.0, -1.0], 5000)  # strong negative correlation
        assert iac_time(x) == 1.0

    def test_constant_series_warns(self):
        with pytest.warns(UserWarning):
            assert iac_time(np.full(500, 2.5)) == 1.0

    def test_short_series_rejected(self):
        with pytest.raises(ValueError):
            iac_time(np.zeros(99))


class TestMsjd:
    def test_constant_and_alternating(self):
        assert msjd(np.full(50, 3.0)) == 0.0
        assert msjd(np.tile([1.0, -1.0], 25)) == pytest.approx(4.0)

    def test_matches_manual_mean_square_step(self):
        x = derive_rng(3, "m").standard_normal(1000)
        assert msjd(x) == pytest.approx(np.mean(np.diff(x) ** 2), rel=1e-12)

    def test_t_scale_multiplies(self):
        x = derive_rng(4, "m").standard_normal(1000)
        assert msjd(x, t_scale=250) == pytest.approx(250 * msjd(x), rel=1e-12)

    def test_multidimensional_steps_use_euclidean_distance(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 0.0]])
        assert msjd(x) == pytest.approx((2.0 + 1.0) / 2)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            msjd(np.array([1.0]))


class TestEss:
    def test_iid_series(self):
        x = derive_rng(5, "e").standard_normal(20000)
        assert ess_batch_means(x) == pytest.approx(20000, rel=0.25)

    def test_correlated_series_shrinks(self):
        x = _ar1(0.9, 20000, derive_rng(6, "e"))
        assert ess_batch_means(x) < 4000

    def test_constant_series_warns(self):
        with pytest.warns(UserWarning):
            assert ess_batch_means(np.full(400, 1.0)) == 400.0


def test_diagnostics_report_per_coordinate():
    m = iid_gaussian_model(sigma_y2=1.0)
    d = simulate(m, [0.2], 10, derive_rng(7, "d"))
    pm, pv = m.oracles.posterior_params(d.y)
    tr = run_chain("marginal_mh", 600, 100, ChainState(theta=np.array([pm])),
                   m, d, RwProposal(np.array([math.sqrt(pv)])),
                   rng=derive_rng(8, "c"))
    rep = diagnostics_report(tr, t_scale=10)
    assert rep.iac.shape == (1,) and rep.msjd.shape == (1,)
    assert rep.n_samples == 500
    assert rep.accept_rate == tr.accept_rate
    assert rep.msjd[0] == pytest.approx(10 * msjd(tr.post_burn()[:, 0]), rel=1e-12)
    rows = rep.rows()
    assert len(rows) == 1 and rows[0]["coord"] == 0
    assert rows[0]["iac"] == pytest.approx(rep.iac[0])


class TestLambdaSample:
    def test_summaries(self):
        vals = derive_rng(9, "l").normal(-0.5, 1.0, size=4000)
        s = LambdaSample(values=vals, theta=np.array([0.2]), eps=np.array([1.0]),
                         T=100, n_particles=50)
        assert s.mean == pytest.approx(vals.mean())
        assert s.variance == pytest.approx(vals.var(ddof=1))
        assert s.coupling == pytest.approx(vals.mean() + vals.var(ddof=1) / 2)
        assert s.coupling_se > 0
        assert s.normality_pvalue > 0.01

    def test_normality_pvalue_rejects_skewed_sample(self):
        vals = derive_rng(10, "l").exponential(1.0, size=4000)
        s = LambdaSample(values=vals, theta=np.array([0.2]), eps=np.array([1.0]),
                         T=100, n_particles=50)
        assert s.normality_pvalue < 1e-6


class TestLambdaPenaltyCheck:
    def test_zero_move_gives_identically_zero(self):
        m = iid_gaussian_model(sigma_y2=1.0)
        d = simulate(m, [0.2], 20, derive_rng(11, "d"))
        s = lambda_penalty_check(m, d, [0.2], eps=0.0, n_particles=20,
                                 replicates=50, rng=derive_rng(12, "r"))
        np.testing.assert_array_equal(s.values, 0.0)
        assert s.coupling == 0.0

    def test_exponential_mean_is_one(self):
        # the two-sided correction satisfies E[exp(Lambda)] = 1 exactly
        m = iid_gaussian_model(sigma_y2=1.0)
        d = simulate(m, [0.2], 20, derive_rng(13, "d"))
        s = lambda_penalty_check(m, d, [0.2], eps=1.0, n_particles=50,
                                 replicates=3000, rng=derive_rng(14, "r"))
        ratios = np.exp(s.values)
        se = ratios.std(ddof=1) / math.sqrt(ratios.shape[0])
        assert abs(ratios.mean() - 1.0) < 4 * se
        # and the Gaussian-limit consistency statistic stays at noise level
        assert abs(s.coupling) < 4 * s.coupling_se

    def test_determinism_and_metadata(self):
        m = iid_gaussian_model(sigma_y2=1.0)
        d = simulate(m, [0.2], 15, derive_rng(15, "d"))
        s1 = lambda_penalty_check(m, d, [0.2], eps=0.5, n_particles=10,
                                  replicates=40, rng=derive_rng(16, "r"))
        s2 = lambda_penalty_check(m, d, [0.2], eps=0.5, n_particles=10,
                                  replicates=40, rng=derive_rng(16, "r"))
        np.testing.assert_array_equal(s1.values, s2.values)
        assert s1.T == 15 and s1.n_particles == 10
        assert s1.values.shape == (40,)
