"""Chain kernels: proposal mechanics, caching discipline, exact ratios."""
import dataclasses
import logging
import math

import numpy as np
import pytest

from smcbridge import (AnnealingPath, BridgeConfig, ChainState, CsmcConfig,
                       ProposalSpec, RwProposal, SmcConfig,
                       UnsupportedModelError, ais_csmc_run, csmc_run,
                       iac_time, iid_gaussian_model, init_chain_state,
                       joint_logdensity, log_likelihood_estimate,
                       marginal_mh_step, mcmc_ais_step, mwpg_step,
                       nonlinear_benchmark_model, pmmh_step, run_chain,
                       simulate, smc_run, spsa_gradient_estimate)
from smcbridge.rng import derive_rng
from smcbridge.samplers import _accept

TINY = 1e-300  # step size small enough that theta + step rounds to theta


def _setup(T=8, sigma_y2=1.0, theta=0.2, seed=71):
    m = iid_gaussian_model(a=1.0, sigma_x2=1.0, sigma_y2=sigma_y2)
    d = simulate(m, [theta], T, derive_rng(seed, "d"))
    return m, d, ProposalSpec.from_model_prior(m)


def _latent_state(m, d, theta, seed):
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    return ChainState(theta=th,
                      latent=m.oracles.sample_conditional(th, d.y,
                                                          derive_rng(seed, "x")))


class TestRwProposal:
    def test_linear_step_and_zero_correction(self):
        prop = RwProposal(np.array([0.5, 2.0]))
        rng = np.random.default_rng(7)
        proposed, logq = prop.propose(np.array([1.0, -1.0]), rng)
        eps = np.random.default_rng(7).standard_normal(2)
        np.testing.assert_array_equal(proposed, np.array([1.0, -1.0])
                                      + np.array([0.5, 2.0]) * eps)
        assert logq == 0.0

    def test_sqrt_scale_mapping_and_correction(self):
        prop = RwProposal(np.array([0.1, 0.2]), scale="sqrt")
        theta = np.array([4.0, 9.0])
        rng = np.random.default_rng(8)
        proposed, logq = prop.propose(theta, rng)
        eps = np.random.default_rng(8).standard_normal(2)
        root = np.sqrt(theta) + np.array([0.1, 0.2]) * eps
        np.testing.assert_allclose(proposed, root ** 2, rtol=1e-15)
        assert logq == pytest.approx(0.5 * np.sum(np.log(proposed) - np.log(theta)))

    def test_sqrt_scale_rejects_nonpositive_root(self):
        prop = RwProposal(np.array([5.0]), scale="sqrt")
        rng = np.random.default_rng(3)
        # hunt for a draw pushing the root negative; stream must stay aligned
        shadow = np.random.default_rng(3)
        for _ in range(200):
            proposed, logq = prop.propose(np.array([0.01]), rng)
            eps = shadow.standard_normal(1)
            if proposed is None:
                assert logq == 0.0
                assert math.sqrt(0.01) + 5.0 * eps[0] <= 0
                break
        else:
            pytest.fail("no rejecting draw found")

    def test_with_t_scaling(self):
        prop = RwProposal.with_t_scaling([0.4, 0.8], 16)
        np.testing.assert_allclose(prop.sds, [0.1, 0.2])

    def test_validation(self):
        with pytest.raises(ValueError):
            RwProposal(np.array([0.0]))
        with pytest.raises(ValueError):
            RwProposal(np.array([1.0]), scale="log")


def test_accept_consumes_one_uniform_even_on_certain_rejection():
    r1 = np.random.default_rng(11)
    r2 = np.random.default_rng(11)
    assert not _accept(-math.inf, r1)
    r2.random()
    assert r1.random() == r2.random()
    assert _accept(0.0, np.random.default_rng(11))


class TestMarginalMh:
    def test_log_ratio_reassembles_exactly(self):
        m, d, _ = _setup()
        state = ChainState(theta=np.array([0.3]))
        prop = RwProposal(np.array([0.4]))
        new, accepted, log_r, proposed = marginal_mh_step(
            state, m, d, prop, np.random.default_rng(21))
        eps = np.random.default_rng(21).standard_normal(1)
        expected_theta = np.array([0.3]) + 0.4 * eps
        np.testing.assert_array_equal(proposed, expected_theta)
        expected = (m.prior_logdensity(proposed) - m.prior_logdensity(state.theta)
                    + m.exact_loglik(proposed, d.y)
                    - m.exact_loglik(state.theta, d.y))
        assert log_r == expected
        if accepted:
            np.testing.assert_array_equal(new.theta, proposed)
        else:
            np.testing.assert_array_equal(new.theta, state.theta)

    def test_caches_exact_loglik_at_current_point(self):
        m, d, _ = _setup()
        state = ChainState(theta=np.array([0.3]))
        rng = np.random.default_rng(22)
        for _ in range(20):
            state, _, _, _ = marginal_mh_step(state, m, d,
                                              RwProposal(np.array([0.4])), rng)
            assert state.cached_loglik == m.exact_loglik(state.theta, d.y)

    def test_needs_exact_likelihood(self):
        m = nonlinear_benchmark_model()
        d = simulate(m, [10.0, 1.0], 5, derive_rng(23, "d"))
        with pytest.raises(UnsupportedModelError):
            marginal_mh_step(ChainState(theta=np.array([10.0, 1.0])), m, d,
                             RwProposal(np.array([0.1, 0.1])),
                             np.random.default_rng(0))

    def test_identity_proposal_always_accepts(self):
        m, d, _ = _setup()
        state = ChainState(theta=np.array([0.3]))
        _, accepted, log_r, proposed = marginal_mh_step(
            state, m, d, RwProposal(np.array([TINY])), np.random.default_rng(24))
        np.testing.assert_array_equal(proposed, state.theta)
        assert log_r == 0.0 and accepted


class TestPmmh:
    def test_cache_updates_only_on_acceptance(self):
        m, d, prop = _setup()
        kern = SmcConfig(20, prop)
        state = init_chain_state("pmmh", m, d, prop, 20,
                                 derive_rng(31, "i"), theta0=[0.3])
        rng = np.random.default_rng(32)
        krng = np.random.default_rng(33)
        for _ in range(40):
            before = state.cached_loglik
            state, accepted, _, _ = pmmh_step(state, m, d,
                                              RwProposal(np.array([0.5])),
                                              kern, rng, krng)
            if accepted:
                assert state.cached_loglik != before
            else:
                assert state.cached_loglik == before

    def test_log_ratio_uses_fresh_estimate_at_proposal(self):
        m, d, prop = _setup()
        kern = SmcConfig(15, prop)
        state = ChainState(theta=np.array([0.3]), cached_loglik=-12.5)
        new, accepted, log_r, proposed = pmmh_step(
            state, m, d, RwProposal(np.array([0.4])), kern,
            np.random.default_rng(34), np.random.default_rng(35))
        sys_ = smc_run(m, proposed, d, prop, 15, np.random.default_rng(35))
        ll_prop = log_likelihood_estimate(sys_).value
        expected = (m.prior_logdensity(proposed) - m.prior_logdensity(state.theta)
                    + ll_prop - (-12.5))
        assert log_r == expected

    def test_degenerate_proposal_is_certain_rejection(self, caplog):
        base, d, prop = _setup()

        def gated_obs(theta, t, x, y):
            out = base.obs_logdensity(theta, t, x, y)
            return np.where(theta[0] > 0.5, -np.inf, out)

        m = dataclasses.replace(base, obs_logdensity=gated_obs, iid_states=False)
        state = ChainState(theta=np.array([0.45]), cached_loglik=None)
        kern = SmcConfig(10, ProposalSpec.from_model_prior(m))
        rng = np.random.default_rng(36)
        krng = np.random.default_rng(37)
        with caplog.at_level(logging.WARNING, logger="smcbridge.samplers"):
            hits = 0
            for _ in range(60):
                state, accepted, log_r, proposed = pmmh_step(
                    state, m, d, RwProposal(np.array([0.3])), kern, rng, krng)
                if proposed is not None and proposed[0] > 0.5:
                    hits += 1
                    assert not accepted and log_r == -math.inf
                assert state.theta[0] <= 0.5
        assert hits > 0
        assert any("degenerate" in r.message for r in caplog.records)

    def test_matches_marginal_mh_at_large_n(self):
        m, d, prop = _setup(T=10)
        pm, pv = m.oracles.posterior_params(d.y)
        step = RwProposal(np.array([2.4 * math.sqrt(pv)]))
        th0 = np.array([pm])
        iters = 400
        tr_m = run_chain("marginal_mh", iters, 0, ChainState(theta=th0), m, d,
                         step, prop_rng=derive_rng(38, "prop"),
                         kernel_rng=derive_rng(38, "kern", "marginal"))
        agreement = {}
        for n in (8, 800):
            tr_p = run_chain("pmmh", iters, 0,
                             init_chain_state("pmmh", m, d, prop, n,
                                              derive_rng(38, "i"), theta0=th0),
                             m, d, step, kernel=SmcConfig(n, prop),
                             prop_rng=derive_rng(38, "prop"),
                             kernel_rng=derive_rng(38, "kern", "pmmh", n))
            agreement[n] = np.mean(tr_m.accepts == tr_p.accepts)
            if n == 800:
                assert abs(tr_m.accept_rate - tr_p.accept_rate) < 0.03
        # sharper estimates track the exact chain's decisions more closely
        assert agreement[800] > agreement[8] + 0.05


class TestMcmcAis:
    def test_log_ratio_reassembles_exactly(self):
        m, d, prop = _setup()
        state = _latent_state(m, d, [0.3], 41)
        kern = BridgeConfig(2, 12, prop)
        new, accepted, log_r, proposed = mcmc_ais_step(
            state, m, d, RwProposal(np.array([0.4])),
            kern, np.random.default_rng(42), np.random.default_rng(43))
        eps = np.random.default_rng(42).standard_normal(1)
        np.testing.assert_array_equal(proposed, state.theta + 0.4 * eps)
        bridge = AnnealingPath.build(state.theta, proposed, 2)
        est = ais_csmc_run(state.latent, bridge, m, d, prop, 12, True,
                           np.random.default_rng(43))
        expected = (m.prior_logdensity(proposed)
                    - m.prior_logdensity(state.theta) + est.log_value)
        assert log_r == expected
        if accepted:
            np.testing.assert_array_equal(new.latent.x, est.final_path.x)
        else:
            assert new.latent is state.latent

    def test_trajectory_moves_only_on_acceptance(self):
        m, d, prop = _setup()
        state = _latent_state(m, d, [0.3], 44)
        kern = BridgeConfig(1, 10, prop)
        rng = np.random.default_rng(45)
        moved = stayed = 0
        for _ in range(40):
            before = state.latent.x
            state, accepted, _, _ = mcmc_ais_step(
                state, m, d, RwProposal(np.array([0.6])), kern, rng)
            if accepted:
                moved += 1
                assert not np.array_equal(state.latent.x, before)
            else:
                stayed += 1
                np.testing.assert_array_equal(state.latent.x, before)
        assert moved > 0 and stayed > 0

    def test_identity_proposal_always_accepts(self):
        # bridge between equal endpoints telescopes to exactly zero
        m, d, prop = _setup()
        state = _latent_state(m, d, [0.3], 46)
        _, accepted, log_r, proposed = mcmc_ais_step(
            state, m, d, RwProposal(np.array([TINY])),
            BridgeConfig(3, 10, prop), np.random.default_rng(47))
        np.testing.assert_array_equal(proposed, state.theta)
        assert log_r == 0.0 and accepted

    def test_requires_stages_and_latent(self):
        m, d, prop = _setup()
        state = _latent_state(m, d, [0.3], 48)
        with pytest.raises(ValueError):
            mcmc_ais_step(state, m, d, RwProposal(np.array([0.4])),
                          BridgeConfig(0, 10, prop), np.random.default_rng(0))
        with pytest.raises(ValueError):
            mcmc_ais_step(ChainState(theta=np.array([0.3])), m, d,
                          RwProposal(np.array([0.4])),
                          BridgeConfig(1, 10, prop), np.random.default_rng(0))


class TestMwpg:
    def test_theta_half_is_a_joint_density_ratio(self):
        m, d, prop = _setup()
        state = _latent_state(m, d, [0.3], 51)
        new, accepted, log_r, proposed = mwpg_step(
            state, m, d, RwProposal(np.array([0.4])), CsmcConfig(10, prop),
            np.random.default_rng(52), np.random.default_rng(53))
        expected = (m.prior_logdensity(proposed) - m.prior_logdensity(state.theta)
                    + joint_logdensity(m, proposed, state.latent, d)
                    - joint_logdensity(m, state.theta, state.latent, d))
        assert log_r == expected
        settled = proposed if accepted else state.theta
        refreshed = csmc_run(True, m, settled, d, prop, 10, state.latent,
                             np.random.default_rng(53))
        np.testing.assert_array_equal(new.latent.x, refreshed.x)

    def test_trajectory_refreshes_even_on_rejection(self):
        m, d, prop = _setup()
        state = _latent_state(m, d, [0.3], 54)
        rng = np.random.default_rng(55)
        rejected = 0
        for _ in range(30):
            before = state.latent.x
            state, accepted, _, _ = mwpg_step(
                state, m, d, RwProposal(np.array([3.0])),
                CsmcConfig(10, prop), rng)
            if not accepted:
                rejected += 1
                assert not np.array_equal(state.latent.x, before)
        assert rejected > 0

    def test_needs_latent(self):
        m, d, prop = _setup()
        with pytest.raises(ValueError):
            mwpg_step(ChainState(theta=np.array([0.3])), m, d,
                      RwProposal(np.array([0.4])), CsmcConfig(10, prop),
                      np.random.default_rng(0))


class TestInitChainState:
    def test_per_kind_payload(self):
        m, d, prop = _setup()
        st = init_chain_state("marginal_mh", m, d, prop, 10, derive_rng(61, "a"))
        assert st.latent is None and st.cached_loglik is None
        st = init_chain_state("pmmh", m, d, prop, 10, derive_rng(61, "b"))
        assert st.latent is None and isinstance(st.cached_loglik, float)
        for kind in ("mcmc_ais", "mwpg"):
            st = init_chain_state(kind, m, d, prop, 10, derive_rng(61, kind))
            assert st.cached_loglik is None
            assert st.latent.x.shape == (d.T, 1)

    def test_explicit_theta0_and_box_resampling(self):
        m, d, prop = _setup()
        st = init_chain_state("marginal_mh", m, d, prop, 10,
                              derive_rng(62, "t"), theta0=[1.5])
        np.testing.assert_array_equal(st.theta, [1.5])
        st = init_chain_state("marginal_mh", m, d, prop, 10,
                              derive_rng(62, "box"), init_box=(-5.0, 5.0))
        assert -5.0 <= st.theta[0] <= 5.0

    def test_unreachable_box_raises(self):
        m = nonlinear_benchmark_model()
        d = simulate(m, [10.0, 1.0], 5, derive_rng(63, "d"))
        with pytest.raises(RuntimeError):
            init_chain_state("mwpg", m, d, ProposalSpec.from_model_prior(m),
                             10, derive_rng(63, "r"), init_box=(-2.0, -1.0),
                             max_draws=50)

    def test_unknown_kind(self):
        m, d, prop = _setup()
        with pytest.raises(ValueError):
            init_chain_state("gibbs", m, d, prop, 10, derive_rng(64, "r"))


class TestRunChain:
    def test_bookkeeping(self):
        m, d, prop = _setup()
        init = _latent_state(m, d, [0.3], 71)
        tr = run_chain("mcmc_ais", 60, 10, init, m, d,
                       RwProposal(np.array([0.6])),
                       kernel=BridgeConfig(1, 10, prop),
                       rng=derive_rng(72, "c"), latent_every=20)
        assert tr.kind == "mcmc_ais" and tr.iterations == 60
        assert tr.thetas.shape == (60, 1) and tr.burn_in == 10
        np.testing.assert_array_equal(tr.init_theta, init.theta)
        prev = init.theta
        for i in range(60):
            if tr.accepts[i]:
                np.testing.assert_array_equal(tr.thetas[i], tr.proposed[i])
            else:
                np.testing.assert_array_equal(tr.thetas[i], prev)
            prev = tr.thetas[i]
        assert set(tr.latent_snapshots) == {19, 39, 59}
        assert tr.post_burn().shape == (50, 1)
        assert tr.accept_rate == np.mean(tr.accepts[10:])

    def test_kernel_type_validation(self):
        m, d, prop = _setup()
        init = _latent_state(m, d, [0.3], 73)
        with pytest.raises(ValueError):
            run_chain("pmmh", 10, 0, init, m, d, RwProposal(np.array([0.4])),
                      kernel=BridgeConfig(1, 10, prop), rng=derive_rng(74, "a"))
        with pytest.raises(ValueError):
            run_chain("mcmc_ais", 10, 0, init, m, d, RwProposal(np.array([0.4])),
                      kernel=CsmcConfig(10, prop), rng=derive_rng(74, "b"))
        with pytest.raises(ValueError):
            run_chain("mwpg", 10, 0, init, m, d, RwProposal(np.array([0.4])),
                      kernel=SmcConfig(10, prop), rng=derive_rng(74, "c"))
        with pytest.raises(ValueError):
            run_chain("mwpg", 10, 0, init, m, d, RwProposal(np.array([0.4])),
                      kernel=CsmcConfig(10, prop))
        with pytest.raises(ValueError):
            run_chain("mwpg", 10, 11, init, m, d, RwProposal(np.array([0.4])),
                      kernel=CsmcConfig(10, prop), rng=derive_rng(74, "d"))

    def test_determinism(self):
        m, d, prop = _setup()
        init = _latent_state(m, d, [0.3], 75)
        t1 = run_chain("mwpg", 30, 0, init, m, d, RwProposal(np.array([0.5])),
                       kernel=CsmcConfig(8, prop), rng=derive_rng(76, "s"))
        t2 = run_chain("mwpg", 30, 0, init, m, d, RwProposal(np.array([0.5])),
                       kernel=CsmcConfig(8, prop), rng=derive_rng(76, "s"))
        np.testing.assert_array_equal(t1.thetas, t2.thetas)
        np.testing.assert_array_equal(t1.log_ratios, t2.log_ratios)

    def test_paired_proposal_streams_across_kinds(self):
        """With a shared proposal stream every kind sees the same increment
        sequence, the basis for matched-seed sampler comparisons."""
        m, d, prop = _setup()
        pm, pv = m.oracles.posterior_params(d.y)
        th0 = np.array([pm])
        step = RwProposal(np.array([math.sqrt(pv)]))
        kernels = {"marginal_mh": None, "pmmh": SmcConfig(10, prop),
                   "mcmc_ais": BridgeConfig(1, 10, prop),
                   "mwpg": CsmcConfig(10, prop)}
        incr = {}
        for kind in kernels:
            init = init_chain_state(kind, m, d, prop, 10,
                                    derive_rng(77, "i", kind), theta0=th0)
            tr = run_chain(kind, 50, 0, init, m, d, step, kernel=kernels[kind],
                           prop_rng=derive_rng(78, "prop"),
                           kernel_rng=derive_rng(78, "kern", kind))
            current = np.vstack([th0[None, :], tr.thetas[:-1]])
            incr[kind] = tr.proposed - current
        base = incr["marginal_mh"]
        for kind in ("pmmh", "mcmc_ais", "mwpg"):
            np.testing.assert_allclose(incr[kind], base, atol=1e-12)

    def test_marginal_chain_recovers_posterior(self):
        m, d, _ = _setup(T=30)
        pm, pv = m.oracles.posterior_params(d.y)
        init = ChainState(theta=np.array([pm]))
        tr = run_chain("marginal_mh", 4000, 400, init, m, d,
                       RwProposal(np.array([2.4 * math.sqrt(pv)])),
                       rng=derive_rng(79, "c"))
        x = tr.post_burn()[:, 0]
        iac = iac_time(x)
        se = x.std(ddof=1) * math.sqrt(iac / x.shape[0])
        assert abs(x.mean() - pm) < 5 * se
        assert abs(x.std(ddof=1) - math.sqrt(pv)) < 0.2 * math.sqrt(pv)


class TestSpsa:
    def test_oracle_mode_is_exact_central_difference(self):
        m, d, _ = _setup(T=12)
        th = np.array([0.3])
        delta = np.array([0.05])
        grad = spsa_gradient_estimate(m, d, th, delta, 1, 10, 1,
                                      derive_rng(81, "g"), oracle=True)
        expected = (m.exact_loglik(th + delta, d.y)
                    - m.exact_loglik(th - delta, d.y)) / (2 * delta)
        np.testing.assert_allclose(grad, expected, rtol=1e-12)

    def test_samples_average_to_the_estimate(self):
        m, d, _ = _setup(T=12)
        grad, samples = spsa_gradient_estimate(m, d, [0.3], [0.05], 1, 10, 6,
                                               derive_rng(82, "g"),
                                               return_samples=True)
        assert samples.shape == (6, 1)
        np.testing.assert_allclose(samples.mean(axis=0), grad, rtol=1e-12)

    def test_determinism_and_validation(self):
        m, d, _ = _setup(T=12)
        g1 = spsa_gradient_estimate(m, d, [0.3], [0.05], 1, 10, 3,
                                    derive_rng(83, "g"))
        g2 = spsa_gradient_estimate(m, d, [0.3], [0.05], 1, 10, 3,
                                    derive_rng(83, "g"))
        np.testing.assert_array_equal(g1, g2)
        with pytest.raises(ValueError):
            spsa_gradient_estimate(m, d, [0.3], [0.0], 1, 10, 3,
                                   derive_rng(84, "g"))
        nl = nonlinear_benchmark_model()
        dn = simulate(nl, [10.0, 1.0], 5, derive_rng(85, "d"))
        with pytest.raises(UnsupportedModelError):
            spsa_gradient_estimate(nl, dn, [10.0, 1.0], [0.1, 0.1], 1, 10, 1,
                                   derive_rng(86, "g"), oracle=True)
