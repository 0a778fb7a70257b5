"""Parameter samplers built on the particle and bridge estimators.

Four reversible kernels over the parameter posterior (or the joint
parameter-trajectory posterior) share one random-walk proposal type:

- ``marginal_mh_step``: textbook MH using an exact likelihood (oracle models
  only); the reference the approximate samplers are judged against.
- ``pmmh_step``: MH with the likelihood replaced by an unbiased particle
  estimate; the estimate at the current point is cached on acceptance and
  never refreshed, which is what keeps the chain exact.
- ``mcmc_ais_step``: MH on the joint space moving (theta, x) through an
  annealed bridge; the acceptance ratio uses the bridge's likelihood-ratio
  estimate and the proposed trajectory is adopted only on acceptance.
- ``mwpg_step``: Metropolis-within-particle-Gibbs; a direct density-ratio
  update of theta given the trajectory, then a backward-sampling conditional
  sweep of the trajectory at the current theta.

Each step consumes a fixed number of draws from the proposal stream (the
increment plus one acceptance uniform), so two samplers sharing a proposal
stream see identical increment sequences regardless of their kernels; chain
runners split their stream into a proposal half and a kernel half for
exactly that purpose.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .ais import AnnealingPath, ais_csmc_run, warm_start_path
from .models import (Dataset, LatentPath, ModelSpec, UnsupportedModelError,
                     joint_logdensity)
from .smc import (DegenerateParticlesError, ProposalSpec, csmc_run,
                  log_likelihood_estimate, sample_smc_path, smc_run)

logger = logging.getLogger(__name__)

CHAIN_KINDS = ("marginal_mh", "pmmh", "mcmc_ais", "mwpg")


@dataclass(frozen=True)
class RwProposal:
    """Gaussian random walk on theta with per-coordinate step sizes.

    ``scale`` "linear" perturbs theta directly (symmetric, zero proposal
    correction).  ``scale`` "sqrt" perturbs sqrt(theta) and squares: suited
    to variance parameters with steps quoted on the standard-deviation
    scale.  A sqrt-scale draw landing at a nonpositive root is an invalid
    proposal (auto-reject); otherwise the mapping back to theta is
    one-to-one and the correction log q(theta',theta) - log q(theta,theta')
    = 0.5 sum(log theta' - log theta) keeps the kernel exact.
    """

    sds: np.ndarray
    scale: str = "linear"

    def __post_init__(self):
        sds = np.atleast_1d(np.asarray(self.sds, dtype=float))
        if np.any(sds <= 0) or not np.all(np.isfinite(sds)):
            raise ValueError("proposal step sizes must be positive and finite")
        if self.scale not in ("linear", "sqrt"):
            raise ValueError(f"unknown proposal scale {self.scale!r}")
        object.__setattr__(self, "sds", sds)

    @classmethod
    def with_t_scaling(cls, base_sds, t: int, scale: str = "linear") -> "RwProposal":
        """Step sizes shrunk by 1/sqrt(t), for posterior-width scaling."""
        return cls(np.atleast_1d(np.asarray(base_sds, dtype=float)) / math.sqrt(t),
                   scale=scale)

    def propose(self, theta: np.ndarray, rng: np.random.Generator):
        """Return (theta_proposed or None, log proposal correction).

        Consumes exactly len(sds) normal draws in either outcome.
        """
        eps = rng.standard_normal(self.sds.shape[0])
        if self.scale == "linear":
            return theta + self.sds * eps, 0.0
        root = np.sqrt(theta) + self.sds * eps
        if np.any(root <= 0):
            return None, 0.0
        proposed = root * root
        return proposed, float(0.5 * np.sum(np.log(proposed) - np.log(theta)))


@dataclass(frozen=True)
class ChainState:
    """Current point of one chain: parameter, trajectory, cached estimate."""

    theta: np.ndarray
    latent: Optional[LatentPath] = None
    cached_loglik: Optional[float] = None
    iteration: int = 0


@dataclass(frozen=True)
class SmcConfig:
    n_particles: int
    proposal: ProposalSpec


@dataclass(frozen=True)
class BridgeConfig:
    n_stages: int
    n_particles: int
    proposal: ProposalSpec
    backward_sampling: bool = True
    schedule: Optional[Callable] = None
    kind: str = "parameter"


@dataclass(frozen=True)
class CsmcConfig:
    n_particles: int
    proposal: ProposalSpec
    backward_sampling: bool = True


def _accept(log_r: float, rng: np.random.Generator) -> bool:
    # one uniform per call, drawn even on certain rejection, so paired
    # proposal streams stay aligned across sampler kinds
    u = rng.random()
    return u < math.exp(min(log_r, 0.0))


def _propose_valid(state: ChainState, model: ModelSpec, proposal: RwProposal,
                   rng: np.random.Generator):
    """Draw a proposal; returns (theta or None, logq, prior_diff or None)."""
    proposed, logq = proposal.propose(state.theta, rng)
    if proposed is None or not model.domain.contains(proposed):
        return None, logq, None
    lp = model.prior_logdensity(proposed)
    if lp == -math.inf:
        return None, logq, None
    return proposed, logq, lp - model.prior_logdensity(state.theta)


def marginal_mh_step(state: ChainState, model: ModelSpec, data: Dataset,
                     proposal: RwProposal, rng: np.random.Generator):
    """One MH step on theta using the model's exact log likelihood.

    Returns (state', accepted, log_r, proposed_theta).
    """
    if model.exact_loglik is None:
        raise UnsupportedModelError("marginal MH needs an exact likelihood")
    ll = state.cached_loglik
    if ll is None:
        ll = model.exact_loglik(state.theta, data.y)
    proposed, logq, prior_diff = _propose_valid(state, model, proposal, rng)
    log_r = -math.inf
    ll_prop = None
    if proposed is not None:
        ll_prop = model.exact_loglik(proposed, data.y)
        log_r = logq + prior_diff + ll_prop - ll
    if _accept(log_r, rng):
        new = ChainState(theta=proposed, latent=state.latent,
                         cached_loglik=ll_prop, iteration=state.iteration + 1)
        return new, True, log_r, proposed
    new = replace(state, cached_loglik=ll, iteration=state.iteration + 1)
    return new, False, log_r, proposed


def pmmh_step(state: ChainState, model: ModelSpec, data: Dataset,
              proposal: RwProposal, kernel: SmcConfig,
              rng: np.random.Generator,
              kernel_rng: Optional[np.random.Generator] = None):
    """One pseudo-marginal MH step with a fresh filter run at the proposal.

    The cached estimate at the current point is reused as-is; refreshing it
    would break exactness.  A degenerate filter at the proposal counts as a
    -inf estimate (certain rejection) and is logged.
    """
    krng = kernel_rng if kernel_rng is not None else rng
    ll = state.cached_loglik
    if ll is None:
        system = smc_run(model, state.theta, data, kernel.proposal,
                         kernel.n_particles, krng)
        ll = log_likelihood_estimate(system).value
    proposed, logq, prior_diff = _propose_valid(state, model, proposal, rng)
    log_r = -math.inf
    ll_prop = None
    if proposed is not None:
        try:
            system = smc_run(model, proposed, data, kernel.proposal,
                             kernel.n_particles, krng)
            ll_prop = log_likelihood_estimate(system).value
        except DegenerateParticlesError as err:
            logger.warning("degenerate filter at proposed theta %s (t=%d)",
                           proposed, err.t)
            ll_prop = -math.inf
        if ll_prop > -math.inf:
            log_r = logq + prior_diff + ll_prop - ll
    if _accept(log_r, rng):
        new = ChainState(theta=proposed, latent=state.latent,
                         cached_loglik=ll_prop, iteration=state.iteration + 1)
        return new, True, log_r, proposed
    new = replace(state, cached_loglik=ll, iteration=state.iteration + 1)
    return new, False, log_r, proposed


def mcmc_ais_step(state: ChainState, model: ModelSpec, data: Dataset,
                  proposal: RwProposal, kernel: BridgeConfig,
                  rng: np.random.Generator,
                  kernel_rng: Optional[np.random.Generator] = None):
    """One joint (theta, x) step through an annealed bridge.

    The bridge runs from the current theta to the proposal, started at the
    current trajectory; on acceptance the chain adopts the proposal and the
    stage-K trajectory, on rejection both stay put.  Requires K >= 1
    (the K = 0 reduction is the trajectory-free density ratio of
    :func:`mwpg_step`).
    """
    if kernel.n_stages < 1:
        raise ValueError("bridge needs n_stages >= 1")
    if state.latent is None:
        raise ValueError("chain state carries no latent trajectory")
    krng = kernel_rng if kernel_rng is not None else rng
    proposed, logq, prior_diff = _propose_valid(state, model, proposal, rng)
    log_r = -math.inf
    estimate = None
    if proposed is not None:
        bridge = AnnealingPath.build(state.theta, proposed, kernel.n_stages,
                                     kind=kernel.kind, schedule=kernel.schedule)
        estimate = ais_csmc_run(state.latent, bridge, model, data,
                                kernel.proposal, kernel.n_particles,
                                kernel.backward_sampling, krng)
        log_r = logq + prior_diff + estimate.log_value
    if _accept(log_r, rng):
        new = ChainState(theta=proposed, latent=estimate.final_path,
                         cached_loglik=None, iteration=state.iteration + 1)
        return new, True, log_r, proposed
    new = replace(state, iteration=state.iteration + 1)
    return new, False, log_r, proposed


def mwpg_step(state: ChainState, model: ModelSpec, data: Dataset,
              proposal: RwProposal, kernel: CsmcConfig,
              rng: np.random.Generator,
              kernel_rng: Optional[np.random.Generator] = None):
    """Theta update given the trajectory, then a conditional sweep.

    The theta update accepts on the direct joint-density ratio (no bridge,
    no trajectory move); the trajectory is then refreshed by one conditional
    sweep at whatever theta the first half settled on.  The returned accept
    flag and log_r describe the theta half.
    """
    if state.latent is None:
        raise ValueError("chain state carries no latent trajectory")
    krng = kernel_rng if kernel_rng is not None else rng
    proposed, logq, prior_diff = _propose_valid(state, model, proposal, rng)
    log_r = -math.inf
    if proposed is not None:
        log_r = (logq + prior_diff
                 + joint_logdensity(model, proposed, state.latent, data)
                 - joint_logdensity(model, state.theta, state.latent, data))
    accepted = _accept(log_r, rng)
    theta = proposed if accepted else state.theta
    latent = csmc_run(kernel.backward_sampling, model, theta, data,
                      kernel.proposal, kernel.n_particles, state.latent, krng)
    new = ChainState(theta=theta, latent=latent, cached_loglik=None,
                     iteration=state.iteration + 1)
    return new, accepted, log_r, proposed


@dataclass
class ChainTrace:
    """Per-iteration record of one chain run."""

    kind: str
    thetas: np.ndarray
    proposed: np.ndarray
    accepts: np.ndarray
    log_ratios: np.ndarray
    burn_in: int
    init_theta: np.ndarray
    latent_snapshots: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return self.thetas.shape[0]

    def post_burn(self) -> np.ndarray:
        return self.thetas[self.burn_in:]

    @property
    def accept_rate(self) -> float:
        return float(np.mean(self.accepts[self.burn_in:]))


def init_chain_state(kind: str, model: ModelSpec, data: Dataset,
                     kernel_proposal: ProposalSpec, n_particles: int,
                     rng: np.random.Generator, theta0=None,
                     init_box: Optional[tuple] = None,
                     max_draws: int = 10000) -> ChainState:
    """Starting state: theta from the prior, trajectory from one filter run.

    ``init_box`` redraws theta0 from the prior until every coordinate lies
    inside [box[0], box[1]] (heavy-tailed priors put most mass at useless
    extremes); an explicit ``theta0`` skips the prior draw.  Marginal MH
    carries neither trajectory nor cache; the pseudo-marginal kind caches
    the filter's likelihood estimate and the trajectory-carrying kinds keep
    a path drawn from the same filter run.
    """
    if kind not in CHAIN_KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}")
    if theta0 is None:
        if model.prior_sampler is None:
            raise UnsupportedModelError("model has no prior sampler")
        for _ in range(max_draws):
            theta0 = model.prior_sampler(rng)
            if init_box is None or np.all((theta0 >= init_box[0])
                                          & (theta0 <= init_box[1])):
                break
        else:
            raise RuntimeError("no prior draw landed inside the init box")
    theta0 = model.check_theta(theta0)
    if kind == "marginal_mh":
        return ChainState(theta=theta0)
    system = smc_run(model, theta0, data, kernel_proposal, n_particles, rng)
    if kind == "pmmh":
        return ChainState(theta=theta0,
                          cached_loglik=log_likelihood_estimate(system).value)
    return ChainState(theta=theta0, latent=sample_smc_path(system, rng))


def run_chain(kind: str, iterations: int, burn_in: int, init: ChainState,
              model: ModelSpec, data: Dataset, proposal: RwProposal,
              kernel=None, rng: Optional[np.random.Generator] = None,
              prop_rng: Optional[np.random.Generator] = None,
              kernel_rng: Optional[np.random.Generator] = None,
              latent_every: int = 0, meta: Optional[dict] = None) -> ChainTrace:
    """Drive one sampler for ``iterations`` steps and record the trace.

    Parameters
    ----------
    kind : one of "marginal_mh", "pmmh", "mcmc_ais", "mwpg".
    kernel : SmcConfig / BridgeConfig / CsmcConfig matching the kind
        (None for marginal_mh).
    rng : stream for the whole chain, split internally into a proposal
        stream and a kernel stream.  Alternatively pass ``prop_rng`` and
        ``kernel_rng`` explicitly; deriving the proposal stream without
        reference to the sampler kind or kernel size makes runs of
        different kinds see identical proposal increments.
    latent_every : snapshot the trajectory every this many iterations
        (0 disables).

    Returns
    -------
    ChainTrace of length ``iterations`` (burn-in retained, marked).
    """
    if kind not in CHAIN_KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not 0 <= burn_in < iterations:
        raise ValueError("burn_in must lie in [0, iterations)")
    if prop_rng is not None and kernel_rng is not None:
        rng_prop, rng_kernel = prop_rng, kernel_rng
    elif rng is not None:
        rng_prop, rng_kernel = rng.spawn(2)
    else:
        raise ValueError("run_chain needs rng, or prop_rng and kernel_rng")

    if kind == "marginal_mh":
        step = lambda st: marginal_mh_step(st, model, data, proposal, rng_prop)
    elif kind == "pmmh":
        if not isinstance(kernel, SmcConfig):
            raise ValueError("pmmh needs an SmcConfig kernel")
        step = lambda st: pmmh_step(st, model, data, proposal, kernel,
                                    rng_prop, rng_kernel)
    elif kind == "mcmc_ais":
        if not isinstance(kernel, BridgeConfig):
            raise ValueError("mcmc_ais needs a BridgeConfig kernel")
        step = lambda st: mcmc_ais_step(st, model, data, proposal, kernel,
                                        rng_prop, rng_kernel)
    else:
        if not isinstance(kernel, CsmcConfig):
            raise ValueError("mwpg needs a CsmcConfig kernel")
        step = lambda st: mwpg_step(st, model, data, proposal, kernel,
                                    rng_prop, rng_kernel)

    d = init.theta.shape[0]
    thetas = np.empty((iterations, d))
    proposed_all = np.full((iterations, d), np.nan)
    accepts = np.zeros(iterations, dtype=bool)
    log_ratios = np.empty(iterations)
    snapshots = {}
    state = init
    for i in range(iterations):
        state, accepted, log_r, proposed = step(state)
        thetas[i] = state.theta
        if proposed is not None:
            proposed_all[i] = proposed
        accepts[i] = accepted
        log_ratios[i] = log_r
        if latent_every and (i + 1) % latent_every == 0 and state.latent is not None:
            snapshots[i] = state.latent.x.copy()
    return ChainTrace(kind=kind, thetas=thetas, proposed=proposed_all,
                      accepts=accepts, log_ratios=log_ratios, burn_in=burn_in,
                      init_theta=init.theta.copy(),
                      latent_snapshots=snapshots, meta=dict(meta or {}))


def spsa_gradient_estimate(model: ModelSpec, data: Dataset, theta, delta,
                           n_stages: int, n_particles: int,
                           replicates: int, rng: np.random.Generator,
                           backward_sampling: bool = True,
                           proposal: Optional[ProposalSpec] = None,
                           warm_sweeps: int = 5, oracle: bool = False,
                           return_samples: bool = False):
    """Two-sided gradient estimate from annealed likelihood ratios.

    Component i is log of the likelihood ratio between theta+delta and
    theta-delta divided by 2 delta_i; the log ratio is the mean of
    ``replicates`` bridge runs, each warm-started at theta-delta.  With
    ``oracle`` True the exact likelihood replaces the estimate (models with
    an exact likelihood only), giving the deterministic central difference.
    """
    theta = model.check_theta(theta)
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    if np.any(delta == 0):
        raise ValueError("every perturbation component must be nonzero")
    lo = model.check_theta(theta - delta)
    hi = model.check_theta(theta + delta)
    if oracle:
        if model.exact_loglik is None:
            raise UnsupportedModelError("oracle mode needs an exact likelihood")
        log_ratio = model.exact_loglik(hi, data.y) - model.exact_loglik(lo, data.y)
        grad = log_ratio / (2.0 * delta)
        return (grad, np.tile(grad, (1, 1))) if return_samples else grad
    proposal = proposal or ProposalSpec.from_model_prior(model)
    bridge = AnnealingPath.build(lo, hi, n_stages)
    values = np.empty(replicates)
    for r in range(replicates):
        x0 = warm_start_path(model, lo, data, proposal, n_particles,
                             backward_sampling, warm_sweeps, rng)
        est = ais_csmc_run(x0, bridge, model, data, proposal, n_particles,
                           backward_sampling, rng)
        values[r] = est.log_value
    grad = float(np.mean(values)) / (2.0 * delta)
    if return_samples:
        return grad, values[:, None] / (2.0 * delta)
    return grad
