"""Network-free diffusion mathematics.

Noise schedule, closed-form forward corruption, posterior parameters of
the reverse conditional, the clean-signal estimate from predicted noise,
and the per-step refinement update.  Operations accept NumPy arrays or
torch tensors alike: all schedule coefficients are Python floats.

Time steps are 1-based: t runs over 1..T and ``alpha_bar(0) == 1``.
"""

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule and its derived arrays (all float64, index t-1)."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    posterior_vars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ScheduleError("betas must be a nonempty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ScheduleError("betas must lie in (0, 1)")
        if len(betas) > 1 and np.any(np.diff(betas) <= 0):
            raise ScheduleError("betas must be strictly increasing")
        object.__setattr__(self, "betas", betas)

        alphas = 1.0 - betas
        T = len(betas)
        alpha_bars = np.empty(T, dtype=np.float64)
        if T >= 10_000:
            # log-domain accumulation guards against underflow on very
            # long schedules (the exact-recursion invariant applies to the
            # sequential-product regime below)
            alpha_bars[:] = np.exp(np.cumsum(np.log(alphas)))
        else:
            acc = 1.0
            for t in range(T):
                acc = acc * alphas[t]
                alpha_bars[t] = acc

        prev = np.concatenate(([1.0], alpha_bars[:-1]))
        posterior_vars = (1.0 - prev) / (1.0 - alpha_bars) * betas
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "posterior_vars", posterior_vars)

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} outside 1..{self.T}")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self._check_t(t) - 1])

    def posterior_var(self, t: int) -> float:
        return float(self.posterior_vars[self._check_t(t) - 1])


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Evenly spaced betas from beta_start to beta_end over T steps."""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = beta_start + np.arange(T, dtype=np.float64) / (T - 1) * (beta_end - beta_start)
    return NoiseSchedule(betas=betas)


def _check_shapes(a, b, what="tensors"):
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise ShapeMismatchError(
            f"{what} shapes differ: {np.shape(a)} vs {np.shape(b)}")


def q_sample(g0, t: int, eps, sched: NoiseSchedule):
    """Closed-form forward corruption: sqrt(abar_t) g0 + sqrt(1-abar_t) eps."""
    _check_shapes(g0, eps, "signal/noise")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * g0 + math.sqrt(1.0 - ab) * eps


def posterior_params(g_t, g0, t: int, sched: NoiseSchedule):
    """Mean and variance of the reverse-conditional q(g_{t-1} | g_t, g0).

    mean = (sqrt(alpha_t)(1-abar_{t-1}) g_t + sqrt(abar_{t-1})(1-alpha_t) g0)
           / (1 - abar_t);  variance = posterior_var(t).
    """
    _check_shapes(g_t, g0, "state/signal")
    t = int(t)
    if t < 1:
        raise ScheduleError("posterior undefined for t < 1")
    a = sched.alpha(t)
    ab = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    mean = (math.sqrt(a) * (1.0 - ab_prev) * g_t
            + math.sqrt(ab_prev) * (1.0 - a) * g0) / (1.0 - ab)
    return mean, sched.posterior_var(t)


def posterior_mean_from_eps(g_t, eps, t: int, sched: NoiseSchedule):
    """Equivalent posterior mean written in terms of the corrupting noise:
    (g_t - beta_t / sqrt(1-abar_t) eps) / sqrt(alpha_t)."""
    _check_shapes(g_t, eps, "state/noise")
    t = int(t)
    if t < 1:
        raise ScheduleError("posterior undefined for t < 1")
    a = sched.alpha(t)
    ab = sched.alpha_bar(t)
    return (g_t - sched.beta(t) / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)


def predict_x0(g_t, eps_hat, t: int, sched: NoiseSchedule):
    """Clean-signal estimate from predicted noise (inverse of q_sample)."""
    _check_shapes(g_t, eps_hat, "state/noise")
    ab = sched.alpha_bar(t)
    return (g_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def reverse_step(g_t, eps_hat, t: int, noise, sched: NoiseSchedule):
    """One refinement update:
    (g_t - (1-alpha_t)/sqrt(1-abar_t) eps_hat) / sqrt(alpha_t)
    + sqrt(posterior_var_t) * noise.

    The injected noise must be exactly zero at t = 1.
    """
    _check_shapes(g_t, eps_hat, "state/noise-prediction")
    _check_shapes(g_t, noise, "state/injected-noise")
    t = int(t)
    if t < 1:
        raise ScheduleError("reverse step undefined for t < 1")
    if t == 1 and bool(np.any(np.asarray(noise) != 0)):
        raise ValueError("no noise may be injected at t = 1")
    a = sched.alpha(t)
    ab = sched.alpha_bar(t)
    mean = (g_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
    return mean + math.sqrt(sched.posterior_var(t)) * noise


def training_loss(eps_true, eps_hat):
    """Mean squared error between true and predicted noise (per element).

    Returns a scalar of the input family (0-d torch tensor for tensors,
    so the value stays differentiable inside training steps).
    """
    _check_shapes(eps_true, eps_hat, "noise")
    diff = eps_true - eps_hat
    return (diff * diff).mean()
