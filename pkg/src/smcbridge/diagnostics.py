"""Chain quality measures and the penalty identity check.

Scalar diagnostics for MCMC output (integrated autocorrelation time, mean
squared jump distance, batch-means effective sample size) plus the
log-acceptance-ratio study for the conditional-sweep stage kernel: under a
local parameter move of size eps/sqrt(T) the log ratio concentrates, and on
the analytically tractable model its mean and variance must couple as
mean = -variance/2 up to Monte Carlo error.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .models import Dataset, ModelSpec, UnsupportedModelError
from .smc import ProposalSpec, csmc_run


def _autocovariance(series: np.ndarray) -> np.ndarray:
    """Biased autocovariance at all lags via FFT, length n."""
    x = np.asarray(series, dtype=float)
    n = x.shape[0]
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conjugate(f), nfft)[:n]
    return acov / n


def iac_time(series: np.ndarray) -> float:
    """Integrated autocorrelation time of a scalar chain.

    Sums adjacent-lag autocorrelation pairs, truncating at the first
    nonpositive pair sum and enforcing monotone decay of the pair sums
    (both are consistent estimates under reversibility and together give a
    stable truncation).  Returns at least 1.0.  A constant series has no
    autocorrelation structure; it returns 1.0 with a warning.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.shape[0]
    if n < 100:
        raise ValueError("need at least 100 samples for a stable estimate")
    acov = _autocovariance(x)
    if acov[0] <= 0:
        warnings.warn("constant series; autocorrelation time set to 1")
        return 1.0
    rho = acov / acov[0]
    n_pairs = (n - 1) // 2
    pair = rho[1 : 2 * n_pairs + 1 : 2] + rho[2 : 2 * n_pairs + 1 : 2]
    pos = np.nonzero(pair <= 0)[0]
    if pos.size:
        pair = pair[: pos[0]]
    if pair.size == 0:
        return 1.0
    pair = np.minimum.accumulate(pair)
    # rho_0 = 1 plus the paired tail; lag 0 appears in no pair
    return float(max(1.0, 2.0 * np.sum(pair) + 1.0))


def msjd(series: np.ndarray, t_scale: Optional[int] = None) -> float:
    """Mean squared jump distance, optionally multiplied by t_scale.

    Multi-dimensional input uses the squared Euclidean step.  The optional
    scaling compensates posterior contraction when comparing chains run on
    datasets of different lengths.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    jumps = np.sum(np.diff(x, axis=0) ** 2, axis=1)
    value = float(np.mean(jumps))
    return value * t_scale if t_scale else value


def ess_batch_means(series: np.ndarray) -> float:
    """Effective sample size from sqrt(n) batch means."""
    x = np.asarray(series, dtype=float).ravel()
    n = x.shape[0]
    if n < 100:
        raise ValueError("need at least 100 samples for a stable estimate")
    b = int(math.isqrt(n))
    m = n // b
    trimmed = x[: m * b]
    means = trimmed.reshape(m, b).mean(axis=1)
    var_hat = np.var(trimmed, ddof=1)
    if var_hat == 0:
        warnings.warn("constant series; effective sample size set to n")
        return float(n)
    var_bm = b * np.var(means, ddof=1)
    return float(n * var_hat / var_bm) if var_bm > 0 else float(n)


@dataclass(frozen=True)
class DiagnosticsReport:
    """Per-coordinate chain diagnostics plus acceptance summary."""

    iac: np.ndarray
    msjd: np.ndarray
    ess: np.ndarray
    accept_rate: float
    n_samples: int
    t_scale: Optional[int] = None

    def rows(self) -> list:
        out = []
        for i in range(self.iac.shape[0]):
            out.append({"coord": i, "iac": float(self.iac[i]),
                        "msjd": float(self.msjd[i]),
                        "ess": float(self.ess[i])})
        return out


def diagnostics_report(trace, t_scale: Optional[int] = None) -> DiagnosticsReport:
    """Compute the standard report from a ChainTrace (post burn-in)."""
    x = trace.post_burn()
    d = x.shape[1]
    iac = np.array([iac_time(x[:, i]) for i in range(d)])
    per_coord = np.array([msjd(x[:, i], t_scale=t_scale) for i in range(d)])
    ess = np.array([ess_batch_means(x[:, i]) for i in range(d)])
    return DiagnosticsReport(iac=iac, msjd=per_coord, ess=ess,
                             accept_rate=trace.accept_rate,
                             n_samples=x.shape[0], t_scale=t_scale)


@dataclass(frozen=True)
class LambdaSample:
    """Replicated log acceptance ratios for a local-move stage kernel."""

    values: np.ndarray
    theta: np.ndarray
    eps: np.ndarray
    T: int
    n_particles: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def variance(self) -> float:
        return float(np.var(self.values, ddof=1))

    @property
    def coupling(self) -> float:
        """mean + variance/2; zero in the limit of a locally Gaussian ratio."""
        return self.mean + 0.5 * self.variance

    @property
    def coupling_se(self) -> float:
        """Delta-method standard error of ``coupling`` under normality."""
        r = self.values.shape[0]
        v = self.variance
        return math.sqrt(v / r + v * v / (2.0 * (r - 1)))

    @property
    def normality_pvalue(self) -> float:
        v = self.values
        sd = np.std(v, ddof=1)
        if sd == 0:
            return 0.0
        return float(stats.kstest((v - v.mean()) / sd, "norm").pvalue)


def lambda_penalty_check(model: ModelSpec, data: Dataset, theta, eps,
                         n_particles: int, replicates: int,
                         rng: np.random.Generator,
                         proposal: Optional[ProposalSpec] = None) -> LambdaSample:
    """Sample the log acceptance ratio of a single-stage local move.

    For a move theta -> theta + eps/sqrt(T) the one intermediate stage sits
    at the midpoint.  Each replicate draws a trajectory x exactly from the
    smoothing law at theta (hence the exact-conditional requirement) and
    pushes it through one backward-sampling conditional sweep at the
    midpoint, giving x'.  The recorded value is

        log p_mid(x | y) - log p_start(x | y)
        + log p_end(x' | y) - log p_mid(x' | y)

    which is the bridge's likelihood-ratio estimate minus the exact
    log-likelihood ratio.  Sweep reversibility at the midpoint forces
    E[exp(value)] = 1, so mean ~ -variance/2 when the law is near Gaussian.
    """
    theta = model.check_theta(theta)
    if model.oracles is None:
        raise UnsupportedModelError(
            "penalty check needs exact conditional-state sampling")
    T = data.T
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    theta_end = model.check_theta(theta + eps / math.sqrt(T))
    theta_mid = model.check_theta(theta + eps / (2.0 * math.sqrt(T)))
    proposal = proposal or ProposalSpec.from_model_prior(model)
    oracles = model.oracles
    values = np.empty(replicates)
    for r in range(replicates):
        x = oracles.sample_conditional(theta, data.y, rng)
        x_new = csmc_run(True, model, theta_mid, data, proposal,
                         n_particles, x, rng)
        values[r] = float(
            np.sum(oracles.conditional_logpdf(theta_mid, data.y, x.x)
                   - oracles.conditional_logpdf(theta, data.y, x.x)
                   + oracles.conditional_logpdf(theta_end, data.y, x_new.x)
                   - oracles.conditional_logpdf(theta_mid, data.y, x_new.x)))
    return LambdaSample(values=values, theta=theta, eps=eps, T=T,
                        n_particles=n_particles)
