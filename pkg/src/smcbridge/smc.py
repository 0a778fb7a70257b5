"""Particle filtering: likelihood estimation and conditional sweeps.

The two entry points are :func:`smc_run`, the standard particle filter whose
per-step weight averages give an unbiased likelihood estimate, and
:func:`csmc_run`, the conditional sweep that pins a reference trajectory in
slot 0 and returns a new trajectory, optionally selected by backward
sampling.  Both take an explicit proposal; :meth:`ProposalSpec.from_model_prior`
builds the bootstrap proposal, under which the incremental weight reduces to
the observation density alone.

All weights live in log space.  Categorical draws use one uniform each,
mapped through the inverse CDF of the max-shifted normalized weights: the
selected index is the smallest one whose cumulative weight strictly exceeds
u times the total, so zero-weight particles are never chosen and ties
resolve to the lowest index carrying mass.

Models flagged ``iid_states`` (initial and transition laws identical and
memoryless) combined with the bootstrap proposal are run through a batched
implementation of the same algorithm: states and weights factorize over
time, and all resampling rows are drawn with a single offset searchsorted.
The law of every output is identical to the sequential path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .models import Dataset, LatentPath, ModelSpec, UnsupportedModelError


class DegenerateParticlesError(RuntimeError):
    """All particle weights vanished at one time step."""

    def __init__(self, t: int):
        super().__init__(f"all log weights are -inf at time step {t}")
        self.t = t


@dataclass(frozen=True)
class ProposalSpec:
    """Initial proposal m and transition proposal M for the filter.

    ``prior_proposal`` marks the bootstrap case m = mu, M = f, in which the
    incremental weight is the observation density and the transition density
    is never evaluated in the forward pass.
    """

    m_logdensity: Optional[Callable]
    m_sampler: Callable
    M_logdensity: Optional[Callable]
    M_sampler: Callable
    prior_proposal: bool = False

    @classmethod
    def from_model_prior(cls, model: ModelSpec) -> "ProposalSpec":
        return cls(
            m_logdensity=model.init_logdensity,
            m_sampler=model.init_sampler,
            M_logdensity=model.trans_logdensity,
            M_sampler=model.trans_sampler,
            prior_proposal=True,
        )


@dataclass(frozen=True)
class ParticleSystem:
    """Ancestors, states, and log weights from one particle sweep.

    Shapes: ``states`` (T, N, state_dim), ``log_weights`` (T, N),
    ``ancestors`` (T-1, N) with 0-based indices into the previous slice.
    """

    states: np.ndarray
    ancestors: np.ndarray
    log_weights: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.states.shape[1]

    @property
    def T(self) -> int:
        return self.states.shape[0]

    def trace_path(self, k_final: int) -> LatentPath:
        """Ancestral trajectory ending in particle ``k_final`` at time T."""
        T = self.T
        ks = np.empty(T, dtype=np.int64)
        ks[T - 1] = k_final
        for t in range(T - 2, -1, -1):
            ks[t] = self.ancestors[t, ks[t + 1]]
        return LatentPath(self.states[np.arange(T), ks, :])


@dataclass(frozen=True)
class LogLikeEstimate:
    """Log of the product over time of mean unnormalized weights."""

    value: float
    n_particles: int
    T: int
    degenerate: bool = False


def _categorical(logw: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF multinomial draws; caller guarantees max(logw) > -inf."""
    w = np.exp(logw - logw.max())
    c = np.cumsum(w)
    u = rng.random(size) * c[-1]
    return np.minimum(np.searchsorted(c, u, side="right"), logw.shape[0] - 1)


def _categorical_rows(logw: np.ndarray, n_draws: int,
                      rng: np.random.Generator) -> np.ndarray:
    """One batch of inverse-CDF draws per row of logw, (rows, n_draws)."""
    rows = logw.shape[0]
    if rows == 0:
        return np.empty((0, n_draws), dtype=np.int64)
    n = logw.shape[1]
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    c = np.cumsum(w, axis=1)
    cn = c / c[:, -1:]
    offs = np.arange(rows, dtype=float)[:, None]
    u = rng.random((rows, n_draws))
    flat = np.searchsorted((cn + offs).ravel(), (u + offs).ravel(), side="right")
    idx = flat.reshape(rows, n_draws) - np.arange(rows)[:, None] * n
    return np.clip(idx, 0, n - 1)


def _check_step_weights(lw: np.ndarray, t: int) -> None:
    m = float(np.max(lw))
    if m == -math.inf:
        raise DegenerateParticlesError(t)
    if math.isnan(m):
        raise FloatingPointError(f"NaN log weight at time step {t}")


def _check_rows(lw: np.ndarray) -> None:
    rowmax = lw.max(axis=1)
    if np.isnan(rowmax).any():
        t = int(np.flatnonzero(np.isnan(rowmax))[0]) + 1
        raise FloatingPointError(f"NaN log weight at time step {t}")
    bad = np.isneginf(rowmax)
    if bad.any():
        raise DegenerateParticlesError(int(np.flatnonzero(bad)[0]) + 1)


def _use_batched(model: ModelSpec, proposal: ProposalSpec) -> bool:
    return bool(model.iid_states and proposal.prior_proposal)


def smc_run(model: ModelSpec, theta, data: Dataset, proposal: ProposalSpec,
            n_particles: int, rng: np.random.Generator) -> ParticleSystem:
    """Run the particle filter and return the full particle system.

    Parameters
    ----------
    model, theta, data : model, parameter, and observations.
    proposal : ProposalSpec
    n_particles : int, at least 1.
    rng : numpy.random.Generator

    Returns
    -------
    ParticleSystem; feed it to :func:`log_likelihood_estimate` for the
    unbiased likelihood estimate, or to :func:`sample_smc_path` for one
    trajectory drawn from the final weighted particles.

    Raises
    ------
    DegenerateParticlesError if every weight at some step vanishes.
    """
    theta = model.check_theta(theta)
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if _use_batched(model, proposal):
        return _smc_batched(model, theta, data, n_particles, rng)
    return _smc_sequential(model, theta, data, proposal, n_particles, rng)


def _smc_sequential(model, theta, data, proposal, N, rng):
    y = data.y
    T = y.shape[0]
    prior = proposal.prior_proposal
    if not prior and (model.trans_logdensity is None or proposal.M_logdensity is None):
        raise UnsupportedModelError(
            "non-bootstrap proposal requires transition and proposal densities")
    z = np.empty((T, N, model.state_dim))
    logw = np.empty((T, N))
    anc = np.empty((T - 1, N), dtype=np.int64)

    x = proposal.m_sampler(theta, N, rng)
    z[0] = x
    lw = model.obs_logdensity(theta, 1, x, y[0])
    if not prior:
        lw = lw + model.init_logdensity(theta, x) - proposal.m_logdensity(theta, x)
    _check_step_weights(lw, 1)
    logw[0] = lw

    obs_logd = model.obs_logdensity
    for t in range(2, T + 1):
        idx = _categorical(logw[t - 2], N, rng)
        anc[t - 2] = idx
        xp = z[t - 2][idx]
        x = proposal.M_sampler(theta, t, xp, rng)
        z[t - 1] = x
        lw = obs_logd(theta, t, x, y[t - 1])
        if not prior:
            lw = (lw + model.trans_logdensity(theta, t, xp, x)
                  - proposal.M_logdensity(theta, t, xp, x))
        _check_step_weights(lw, t)
        logw[t - 1] = lw
    return ParticleSystem(states=z, ancestors=anc, log_weights=logw)


def _smc_batched(model, theta, data, N, rng):
    y = data.y
    T = y.shape[0]
    z = model.init_sampler(theta, T * N, rng).reshape(T, N, model.state_dim)
    ts = np.arange(1, T + 1)[:, None]
    logw = model.obs_logdensity(theta, ts, z, y[:, None, :])
    _check_rows(logw)
    anc = _categorical_rows(logw[:-1], N, rng)
    return ParticleSystem(states=z, ancestors=anc, log_weights=logw)


def log_likelihood_estimate(system: ParticleSystem) -> LogLikeEstimate:
    """Product over time of within-step mean weights, in log space.

    A fully degenerate step (possible only in hand-built systems, since the
    filter raises) yields value -inf with the ``degenerate`` flag set.
    """
    lw = system.log_weights
    m = lw.max(axis=1)
    if np.isneginf(m).any():
        return LogLikeEstimate(value=-math.inf, n_particles=system.n_particles,
                               T=system.T, degenerate=True)
    value = float(np.sum(m + np.log(np.mean(np.exp(lw - m[:, None]), axis=1))))
    return LogLikeEstimate(value=value, n_particles=system.n_particles, T=system.T)


def sample_smc_path(system: ParticleSystem, rng: np.random.Generator) -> LatentPath:
    """Draw one trajectory: final index from the last weights, then trace."""
    k = int(_categorical(system.log_weights[-1], 1, rng)[0])
    return system.trace_path(k)


def csmc_run(backward_sampling: bool, model: ModelSpec, theta, data: Dataset,
             proposal: ProposalSpec, n_particles: int, ref_path: LatentPath,
             rng: np.random.Generator, return_system: bool = False):
    """Conditional particle sweep holding ``ref_path`` fixed in slot 0.

    Runs the filter with the reference trajectory pinned (its ancestor is
    itself at every step), draws the final index from the last weights, and
    walks backwards: through stored ancestors when ``backward_sampling`` is
    False, or by reweighting each step with the transition density into the
    already-selected future state when True.

    Parameters
    ----------
    backward_sampling : bool
        Backward selection requires the model transition density.
    ref_path : LatentPath of length data.T.
    return_system : bool
        Also return the internal ParticleSystem (diagnostics hook).

    Returns
    -------
    LatentPath, or (LatentPath, ParticleSystem) when ``return_system``.

    With ``n_particles`` 1 the reference path is returned unchanged.
    """
    theta = model.check_theta(theta)
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if ref_path.x.shape[0] != data.T:
        raise ValueError("reference path length does not match data")
    if backward_sampling and model.trans_logdensity is None:
        raise UnsupportedModelError(
            "backward sampling requires a transition density")
    if _use_batched(model, proposal):
        system = _csmc_forward_batched(model, theta, data, n_particles,
                                       ref_path, rng)
    else:
        system = _csmc_forward_sequential(model, theta, data, proposal,
                                          n_particles, ref_path, rng)
    path = _select_path(backward_sampling, model, theta, system, rng)
    if return_system:
        return path, system
    return path


def _csmc_forward_sequential(model, theta, data, proposal, N, ref_path, rng):
    y = data.y
    T = y.shape[0]
    prior = proposal.prior_proposal
    if not prior and (model.trans_logdensity is None or proposal.M_logdensity is None):
        raise UnsupportedModelError(
            "non-bootstrap proposal requires transition and proposal densities")
    z = np.empty((T, N, model.state_dim))
    logw = np.empty((T, N))
    anc = np.zeros((T - 1, N), dtype=np.int64)

    z[:, 0, :] = ref_path.x
    z[0, 1:] = proposal.m_sampler(theta, N - 1, rng)
    lw = model.obs_logdensity(theta, 1, z[0], y[0])
    if not prior:
        lw = lw + model.init_logdensity(theta, z[0]) - proposal.m_logdensity(theta, z[0])
    _check_step_weights(lw, 1)
    logw[0] = lw

    for t in range(2, T + 1):
        idx = _categorical(logw[t - 2], N - 1, rng)
        anc[t - 2, 1:] = idx
        z[t - 1, 1:] = proposal.M_sampler(theta, t, z[t - 2][idx], rng)
        xp = z[t - 2][anc[t - 2]]
        lw = model.obs_logdensity(theta, t, z[t - 1], y[t - 1])
        if not prior:
            lw = (lw + model.trans_logdensity(theta, t, xp, z[t - 1])
                  - proposal.M_logdensity(theta, t, xp, z[t - 1]))
        _check_step_weights(lw, t)
        logw[t - 1] = lw
    return ParticleSystem(states=z, ancestors=anc, log_weights=logw)


def _csmc_forward_batched(model, theta, data, N, ref_path, rng):
    y = data.y
    T = y.shape[0]
    z = np.empty((T, N, model.state_dim))
    z[:, 0, :] = ref_path.x
    if N > 1:
        z[:, 1:, :] = model.init_sampler(theta, T * (N - 1), rng).reshape(
            T, N - 1, model.state_dim)
    ts = np.arange(1, T + 1)[:, None]
    logw = model.obs_logdensity(theta, ts, z, y[:, None, :])
    _check_rows(logw)
    anc = np.zeros((T - 1, N), dtype=np.int64)
    if N > 1:
        anc[:, 1:] = _categorical_rows(logw[:-1], N - 1, rng)
    return ParticleSystem(states=z, ancestors=anc, log_weights=logw)


def _select_path(backward_sampling, model, theta, system, rng):
    z = system.states
    logw = system.log_weights
    T, N = logw.shape
    k_final = int(_categorical(logw[T - 1], 1, rng)[0])
    if not backward_sampling:
        return system.trace_path(k_final)
    if model.iid_states and T > 1:
        # memoryless transition: the backward factor is constant across
        # particles, so every step reduces to a fresh draw from its weights
        ks = np.empty(T, dtype=np.int64)
        ks[:-1] = _categorical_rows(logw[:-1], 1, rng)[:, 0]
        ks[T - 1] = k_final
        return LatentPath(z[np.arange(T), ks, :])
    ks = np.empty(T, dtype=np.int64)
    ks[T - 1] = k_final
    trans_logd = model.trans_logdensity
    for t in range(T - 2, -1, -1):
        bw = logw[t] + trans_logd(theta, t + 2, z[t], z[t + 1, ks[t + 1]])
        _check_step_weights(bw, t + 1)
        ks[t] = int(_categorical(bw, 1, rng)[0])
    return LatentPath(z[np.arange(T), ks, :])
