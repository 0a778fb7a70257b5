"""State-space model interface and reference models.

A model is a bundle of densities and samplers for

    x_1 ~ mu_theta,  x_t | x_{t-1} ~ f_theta(x_{t-1}, .),  y_t | x_t ~ g_theta(x_t, .),

with a prior eta(theta) on the parameter.  All densities are evaluated in
log space and broadcast elementwise: states ``x`` have shape ``(..., state_dim)``,
observations ``y`` shape ``(..., obs_dim)``, and the time index ``t`` (1-based,
the index of the *target* state x_t) may be an int or an integer array
broadcasting against the leading axes.  Log densities return shape ``(...)``
arrays whose entries are finite or ``-inf``, never NaN.

Two reference models ship with the package: a conjugate iid Gaussian model
whose likelihood, parameter posterior, and per-observation conditionals are
available in closed form (the ``oracles`` attribute), and a standard
nonlinear benchmark with a bimodal-friendly squared observation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Parameter or configuration outside its admissible domain."""


class UnsupportedModelError(RuntimeError):
    """Operation requires a model capability that is absent."""


def norm_logpdf(x, mean, var):
    """Gaussian log density, elementwise; var may broadcast."""
    d = x - mean
    return -0.5 * (d * d / var + np.log(var) + _LOG_2PI)


@dataclass(frozen=True)
class ParamDomain:
    """Open box constraint on theta: lower < theta_i < upper per coordinate."""

    lower: np.ndarray
    upper: np.ndarray

    def contains(self, theta: np.ndarray) -> bool:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.lower.shape:
            return False
        return bool(np.all(theta > self.lower) and np.all(theta < self.upper)
                    and np.all(np.isfinite(theta)))

    @classmethod
    def unbounded(cls, dim: int) -> "ParamDomain":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @classmethod
    def positive(cls, dim: int) -> "ParamDomain":
        return cls(np.zeros(dim), np.full(dim, np.inf))


@dataclass(frozen=True)
class ModelSpec:
    """Densities and samplers defining one state-space model.

    ``trans_logdensity`` may be None for models whose transition density is
    unavailable; operations that need it raise :class:`UnsupportedModelError`.
    ``iid_states`` marks models whose initial and transition laws coincide
    and ignore the previous state, which lets the particle routines use a
    batched implementation of the same algorithm.
    """

    name: str
    param_dim: int
    state_dim: int
    obs_dim: int
    domain: ParamDomain
    init_logdensity: Callable
    trans_logdensity: Optional[Callable]
    obs_logdensity: Callable
    init_sampler: Callable
    trans_sampler: Callable
    obs_sampler: Callable
    prior_logdensity: Callable
    prior_sampler: Optional[Callable] = None
    exact_loglik: Optional[Callable] = None
    oracles: Optional["IidGaussianOracles"] = None
    iid_states: bool = False

    def check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if not self.domain.contains(theta):
            raise DomainError(f"theta {theta!r} outside domain of model {self.name}")
        return theta


@dataclass(frozen=True)
class Dataset:
    """Observed series y_{1:T}, with the generating truth when simulated."""

    y: np.ndarray
    x_true: Optional[np.ndarray] = None
    theta_true: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[0] < 1:
            raise ValueError("y must have shape (T, obs_dim) with T >= 1")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        object.__setattr__(self, "y", y)

    @property
    def T(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class LatentPath:
    """One latent trajectory x_{1:T}, shape (T, state_dim)."""

    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("path must have shape (T, state_dim) with T >= 1")
        object.__setattr__(self, "x", x)

    def __len__(self) -> int:
        return self.x.shape[0]


def simulate(model: ModelSpec, theta, T: int, rng: np.random.Generator) -> Dataset:
    """Draw (x_{1:T}, y_{1:T}) from the model at theta.

    Parameters
    ----------
    model : ModelSpec
    theta : array_like, shape (param_dim,)
    T : int
        Series length, at least 1.
    rng : numpy.random.Generator

    Returns
    -------
    Dataset with x_true and theta_true filled in.
    """
    theta = model.check_theta(theta)
    if T < 1:
        raise ValueError("T must be >= 1")
    x = np.empty((T, model.state_dim))
    y = np.empty((T, model.obs_dim))
    x[0] = model.init_sampler(theta, 1, rng)[0]
    y[0] = model.obs_sampler(theta, 1, x[0:1], rng)[0]
    for t in range(2, T + 1):
        x[t - 1] = model.trans_sampler(theta, t, x[t - 2:t - 1], rng)[0]
        y[t - 1] = model.obs_sampler(theta, t, x[t - 1:t], rng)[0]
    return Dataset(y=y, x_true=x, theta_true=theta)


def joint_logdensity(model: ModelSpec, theta, path: LatentPath, data: Dataset) -> float:
    """log p_theta(x_{1:T}, y_{1:T}), the unnormalized AIS stage target."""
    theta = model.check_theta(theta)
    x = path.x
    y = data.y
    T = y.shape[0]
    if x.shape[0] != T:
        raise ValueError("path length does not match data length")
    total = float(model.init_logdensity(theta, x[0]))
    ts = np.arange(1, T + 1)
    total += float(np.sum(model.obs_logdensity(theta, ts, x, y)))
    if T > 1:
        if model.trans_logdensity is None:
            raise UnsupportedModelError(
                f"model {model.name} has no transition density")
        total += float(np.sum(model.trans_logdensity(theta, ts[1:], x[:-1], x[1:])))
    return total


# ---------------------------------------------------------------------------
# iid Gaussian reference model


@dataclass(frozen=True)
class IidGaussianOracles:
    """Closed forms for the iid Gaussian model.

    The marginal law of each observation is y_t ~ N(theta, sigma_x2 + sigma_y2)
    independently of the mixing coefficient a, so the likelihood, the Gaussian
    parameter posterior, and the per-observation conditional p_theta(x_t | y_t)
    are all exact.
    """

    a: float
    sigma_x2: float
    sigma_y2: float
    prior_mean: float
    prior_var: float

    @property
    def marginal_var(self) -> float:
        return self.sigma_x2 + self.sigma_y2

    def loglik(self, theta, y: np.ndarray) -> float:
        theta = np.atleast_1d(theta)
        return float(np.sum(norm_logpdf(y[:, 0], theta[0], self.marginal_var)))

    def posterior_params(self, y: np.ndarray) -> tuple[float, float]:
        """Mean and variance of theta | y_{1:T}."""
        prec = 1.0 / self.prior_var + y.shape[0] / self.marginal_var
        mean = (self.prior_mean / self.prior_var
                + np.sum(y[:, 0]) / self.marginal_var) / prec
        return float(mean), float(1.0 / prec)

    def conditional_params(self, theta, y: np.ndarray) -> tuple[np.ndarray, float]:
        """Means (T,) and common variance of x_t | y_t at theta."""
        theta = np.atleast_1d(theta)
        prec = 1.0 / self.sigma_x2 + 1.0 / self.sigma_y2
        var = 1.0 / prec
        means = var * ((1.0 - self.a) * theta[0] / self.sigma_x2
                       + (y[:, 0] - self.a * theta[0]) / self.sigma_y2)
        return means, float(var)

    def conditional_logpdf(self, theta, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        means, var = self.conditional_params(theta, y)
        return norm_logpdf(x[..., 0], means, var)

    def sample_conditional(self, theta, y: np.ndarray,
                           rng: np.random.Generator) -> LatentPath:
        means, var = self.conditional_params(theta, y)
        draws = means + math.sqrt(var) * rng.standard_normal(means.shape[0])
        return LatentPath(draws[:, None])

    def score(self, theta, y: np.ndarray) -> np.ndarray:
        """Gradient of the exact log likelihood at theta."""
        theta = np.atleast_1d(theta)
        return np.array([np.sum(y[:, 0] - theta[0]) / self.marginal_var])


def iid_gaussian_model(a: float = 1.0, sigma_x2: float = 1.0,
                       sigma_y2: float = 0.01, prior_mean: float = 0.0,
                       prior_var: float = 1e5) -> ModelSpec:
    """Conjugate iid Gaussian model with mixing coefficient ``a``.

    States are iid N((1-a) theta, sigma_x2) at every time, observations are
    N(a theta + x_t, sigma_y2), and the prior on theta is
    N(prior_mean, prior_var).  The marginal law of y does not depend on a,
    which makes the family a pure parametrization study: only the inference
    geometry changes with a.

    Returns
    -------
    ModelSpec with ``exact_loglik`` and closed-form ``oracles`` attached.
    """
    if sigma_x2 <= 0 or sigma_y2 <= 0 or prior_var <= 0:
        raise DomainError("variances must be positive")
    a = float(a)
    sx2, sy2 = float(sigma_x2), float(sigma_y2)
    state_mean = lambda th: (1.0 - a) * th[0]

    def init_logdensity(theta, x):
        return norm_logpdf(x[..., 0], state_mean(theta), sx2)

    def trans_logdensity(theta, t, x_prev, x):
        return norm_logpdf(x[..., 0], state_mean(theta), sx2)

    def obs_logdensity(theta, t, x, y):
        return norm_logpdf(y[..., 0], a * theta[0] + x[..., 0], sy2)

    def init_sampler(theta, n, rng):
        return state_mean(theta) + math.sqrt(sx2) * rng.standard_normal((n, 1))

    def trans_sampler(theta, t, x_prev, rng):
        shape = x_prev.shape[:-1] + (1,)
        return state_mean(theta) + math.sqrt(sx2) * rng.standard_normal(shape)

    def obs_sampler(theta, t, x, rng):
        shape = x.shape[:-1] + (1,)
        return a * theta[0] + x[..., 0:1] + math.sqrt(sy2) * rng.standard_normal(shape)

    def prior_logdensity(theta):
        return float(norm_logpdf(theta[0], prior_mean, prior_var))

    def prior_sampler(rng):
        return np.array([prior_mean + math.sqrt(prior_var) * rng.standard_normal()])

    oracles = IidGaussianOracles(a, sx2, sy2, float(prior_mean), float(prior_var))
    return ModelSpec(
        name="iid_gaussian",
        param_dim=1, state_dim=1, obs_dim=1,
        domain=ParamDomain.unbounded(1),
        init_logdensity=init_logdensity,
        trans_logdensity=trans_logdensity,
        obs_logdensity=obs_logdensity,
        init_sampler=init_sampler,
        trans_sampler=trans_sampler,
        obs_sampler=obs_sampler,
        prior_logdensity=prior_logdensity,
        prior_sampler=prior_sampler,
        exact_loglik=oracles.loglik,
        oracles=oracles,
        iid_states=True,
    )


# ---------------------------------------------------------------------------
# Nonlinear benchmark model


def invgamma_logpdf(v, shape: float, scale: float):
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (shape * math.log(scale) - math.lgamma(shape)
               - (shape + 1.0) * np.log(v) - scale / v)
    return np.where(v > 0, out, -np.inf)


def nonlinear_benchmark_model(prior_shape: float = 0.01,
                              prior_scale: float = 0.01) -> ModelSpec:
    """Nonlinear benchmark with squared observations.

    mu = N(0, 10), the transition mean is x/2 + 25 x / (1 + x^2) + 8 cos(1.2 t)
    with variance sigma_v2, and y_t ~ N(x_t^2 / 20, sigma_w2).  The parameter
    theta = (sigma_v2, sigma_w2) carries independent inverse-gamma priors.
    The t in the drift is the 1-based index of the target state.
    """
    init_var = 10.0
    sh, sc = float(prior_shape), float(prior_scale)

    def drift(t, x_prev):
        x = x_prev[..., 0]
        return x / 2.0 + 25.0 * x / (1.0 + x * x) + 8.0 * np.cos(1.2 * np.asarray(t))

    def init_logdensity(theta, x):
        return norm_logpdf(x[..., 0], 0.0, init_var)

    def trans_logdensity(theta, t, x_prev, x):
        return norm_logpdf(x[..., 0], drift(t, x_prev), theta[0])

    def obs_logdensity(theta, t, x, y):
        return norm_logpdf(y[..., 0], x[..., 0] ** 2 / 20.0, theta[1])

    def init_sampler(theta, n, rng):
        return math.sqrt(init_var) * rng.standard_normal((n, 1))

    def trans_sampler(theta, t, x_prev, rng):
        shape = x_prev.shape[:-1] + (1,)
        noise = math.sqrt(theta[0]) * rng.standard_normal(shape)
        return drift(t, x_prev)[..., None] + noise

    def obs_sampler(theta, t, x, rng):
        shape = x.shape[:-1] + (1,)
        return x[..., 0:1] ** 2 / 20.0 + math.sqrt(theta[1]) * rng.standard_normal(shape)

    def prior_logdensity(theta):
        if theta[0] <= 0 or theta[1] <= 0:
            return -np.inf
        return float(invgamma_logpdf(theta[0], sh, sc)
                     + invgamma_logpdf(theta[1], sh, sc))

    def prior_sampler(rng):
        g = rng.standard_gamma(sh, size=2)
        return sc / g

    return ModelSpec(
        name="nonlinear_benchmark",
        param_dim=2, state_dim=1, obs_dim=1,
        domain=ParamDomain.positive(2),
        init_logdensity=init_logdensity,
        trans_logdensity=trans_logdensity,
        obs_logdensity=obs_logdensity,
        init_sampler=init_sampler,
        trans_sampler=trans_sampler,
        obs_sampler=obs_sampler,
        prior_logdensity=prior_logdensity,
        prior_sampler=prior_sampler,
    )
