"""Flow maps and the stochastic transition kernels built from them.

Two map families are used:

* ``FlowMap.apply(x, t, r)`` transports a state along the marginal ODE from
  outer time t to r (deterministic).
* ``PosteriorDiamondMap.apply(x_bar, s, r, x_t, t)`` transports an inner
  state along the GLASS ODE conditioned on ``x_t``; from s=0 to r=1 it maps
  Gaussian noise to the posterior p(z | x_t).

Each map also offers ``apply_with_jacobian`` returning the sensitivity of the
output with respect to the conditioning input (x for flow maps, x_t for
diamond maps), which the gradient estimators pull reward gradients through.
"""

from __future__ import annotations

import numpy as np

from .glass import GlassField, sufficient_statistic
from .mixture import MixtureOracle
from .ode import rk4, rk4_tangent, time_grid
from .sched import Scheduler, ScheduleDomainError


class FlowMap:
    """Interface for deterministic flow maps X_{t,r}."""

    scheduler: Scheduler

    def apply(self, x, t, r):
        raise NotImplementedError

    def apply_with_jacobian(self, x, t, r):
        raise NotImplementedError


class PosteriorDiamondMap:
    """Interface for stochastic posterior flow maps X_{s,r}(x_bar | x_t, t)."""

    scheduler: Scheduler

    def apply(self, x_bar, s, r, x_t, t):
        raise NotImplementedError

    def apply_with_jacobian(self, x_bar, s, r, x_t, t):
        raise NotImplementedError


class OracleFlowMap(FlowMap):
    """RK4 integration of the exact marginal velocity."""

    def __init__(self, oracle: MixtureOracle, n_steps: int = 64):
        self.oracle = oracle
        self.scheduler = oracle.scheduler
        self.n_steps = n_steps

    def apply(self, x, t, r):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if r == t:
            return x.copy()
        if r < t:
            raise ValueError("flow maps run forward in time (t <= r)")
        sched = self.scheduler
        nodes, tail = time_grid(t, r, self.n_steps, sched.t_min, sched.t_max)
        return rk4(lambda y, s: self.oracle.velocity(y, s), x, nodes, tail)

    def apply_with_jacobian(self, x, t, r):
        """Endpoint and dX_{t,r}/dx of shape (n, d, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        eye = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        if r == t:
            return x.copy(), eye
        sched = self.scheduler
        nodes, tail = time_grid(t, r, self.n_steps, sched.t_min, sched.t_max)

        def field(y, s):
            u, j = self.oracle.velocity_jacobian(y, s)
            return u, j, None

        return rk4_tangent(field, x, eye, nodes, tail)


class OracleDiamondMap(PosteriorDiamondMap):
    """RK4 integration of the GLASS velocity built from the exact denoiser.

    The inner flow starts at s = 0 when the schedule allows it and at
    t_min otherwise; in the latter case ``x_bar`` at s=0 is taken as the
    state there.
    """

    def __init__(self, oracle: MixtureOracle, n_steps: int = 64):
        self.oracle = oracle
        self.glass = GlassField(oracle)
        self.scheduler = oracle.scheduler
        self.n_steps = n_steps

    def _degenerate(self, x_t, t):
        # sigma_t = 0: the posterior is the point mass at x_t / alpha_t.
        return np.all(self.scheduler.sigma(t) == 0.0)

    def apply(self, x_bar, s, r, x_t, t):
        x_bar = np.atleast_2d(np.asarray(x_bar, dtype=float))
        if r == s:
            return x_bar.copy()
        if self._degenerate(x_t, t):
            return np.broadcast_to(np.asarray(x_t) / self.scheduler.alpha(t), x_bar.shape).copy()
        return self.glass.integrate(x_bar, x_t, t, s, r, self.n_steps)

    def apply_with_jacobian(self, x_bar, s, r, x_t, t):
        """Endpoint and d endpoint / d x_t of shape (n, d, d)."""
        x_bar = np.atleast_2d(np.asarray(x_bar, dtype=float))
        n, d = x_bar.shape
        if self._degenerate(x_t, t):
            z = np.broadcast_to(np.asarray(x_t) / self.scheduler.alpha(t), x_bar.shape).copy()
            jac = np.broadcast_to(np.eye(d) / self.scheduler.alpha(t), (n, d, d)).copy()
            return z, jac
        tangent = np.zeros((n, d, d))
        if r == s:
            return x_bar.copy(), tangent
        sched = self.scheduler
        nodes, tail = time_grid(s, r, self.n_steps, self.glass.s_min, sched.t_max)
        x_t = np.broadcast_to(np.asarray(x_t, dtype=float), x_bar.shape)
        return rk4_tangent(
            lambda y, ss: self.glass.velocity_jacobians(y, x_t, ss, t), x_bar, tangent, nodes, tail
        )


def renoise(sched: Scheduler, x_t, t, t_prime, eps):
    """Forward-process jump from t back to the noisier time t' < t."""
    a_t, s_t = sched.alpha(t), sched.sigma(t)
    a_p, s_p = sched.alpha(t_prime), sched.sigma(t_prime)
    ratio = a_p / a_t
    var = s_p**2 - ratio**2 * s_t**2
    if np.any(var < 0):
        raise ScheduleDomainError("renoise needs t' < t (negative variance)")
    return ratio * np.asarray(x_t, dtype=float) + np.sqrt(var) * np.asarray(eps, dtype=float)


def renoise_std(sched: Scheduler, t, t_prime):
    ratio = sched.alpha(t_prime) / sched.alpha(t)
    return ratio, np.sqrt(sched.sigma(t_prime) ** 2 - ratio**2 * sched.sigma(t) ** 2)


def _batch(x_t, n, rng_seed, d=None):
    x_t = np.asarray(x_t, dtype=float)
    if x_t.ndim == 1 and n is not None:
        x_t = np.broadcast_to(x_t, (n, x_t.shape[0]))
    return np.atleast_2d(x_t), np.random.default_rng(rng_seed)


def diamond_ddpm_step(map: PosteriorDiamondMap, x_t, t, t_prime, rng_seed=None, n_samples=None):
    """One draw from the DDPM transition t -> t' by stopping the diamond flow early.

    ``x_t`` may be a single state (with ``n_samples`` draws) or a batch of
    states (one draw each).  ``rng_seed`` may be a seed or a Generator.
    """
    sched = map.scheduler
    if t_prime <= t:
        raise ScheduleDomainError("diamond_ddpm_step needs t' > t")
    single = np.ndim(x_t) == 1 and n_samples is None
    x_t, rng = _batch(x_t, n_samples, rng_seed)
    x0 = rng.standard_normal(x_t.shape)
    r = 1.0 if t_prime >= 1.0 else float(sched.r_star(t, t_prime))
    x_bar = map.apply(x0, 0.0, r, x_t, t)
    if r >= 1.0:
        out = x_bar * sched.alpha(min(t_prime, 1.0))
    else:
        out = sched.alpha(t_prime) * sufficient_statistic(sched, x_bar, x_t, r, t)
    return out[0] if single else out


def naive_renoise_step(map: PosteriorDiamondMap, x_t, t, t_prime, rng_seed=None, n_samples=None):
    """Denoise to a full posterior sample, then forward-noise it to t'."""
    sched = map.scheduler
    single = np.ndim(x_t) == 1 and n_samples is None
    x_t, rng = _batch(x_t, n_samples, rng_seed)
    x0 = rng.standard_normal(x_t.shape)
    x1 = map.apply(x0, 0.0, 1.0, x_t, t)
    if t_prime >= 1.0:
        out = x1
    else:
        out = sched.alpha(t_prime) * x1 + sched.sigma(t_prime) * rng.standard_normal(x1.shape)
    return out[0] if single else out


def ddpm_reference_moments(sched: Scheduler, t, t_prime):
    """(gain, residual std) of x_{t'} given (x_t, z): mean a' z + gain (x_t - a z)."""
    a_t, s_t = sched.alpha(t), sched.sigma(t)
    a_p, s_p = sched.alpha(t_prime), sched.sigma(t_prime)
    if t_prime >= 1.0:
        return 0.0, 0.0
    gain = a_t * s_p**2 / (a_p * s_t**2)
    var = s_p**2 * (1.0 - a_t**2 * s_p**2 / (a_p**2 * s_t**2))
    if var < -1e-15:
        raise ScheduleDomainError("reference kernel needs t' > t (negative variance)")
    return gain, np.sqrt(max(var, 0.0))


def ddpm_reference_sample(oracle: MixtureOracle, x_t, t, t_prime, rng_seed=None, n_samples=None):
    """Exact DDPM transition: posterior draw, then the conditional Gaussian bridge."""
    sched = oracle.scheduler
    if t_prime <= t:
        raise ScheduleDomainError("reference kernel needs t' > t")
    single = np.ndim(x_t) == 1 and n_samples is None
    x_t, rng = _batch(x_t, n_samples, rng_seed)
    z = oracle.sample_posterior(x_t, t, rng)
    gain, std = ddpm_reference_moments(sched, t, t_prime)
    a_p = sched.alpha(min(t_prime, 1.0))
    out = a_p * z + gain * (x_t - sched.alpha(t) * z) + std * rng.standard_normal(z.shape)
    return out[0] if single else out


def r_star_surface(sched: Scheduler, grid_t, grid_t_prime):
    """r*(t, t') on a grid; NaN where t >= t'.  Rows index t, columns t'."""
    tt, tp = np.meshgrid(np.asarray(grid_t, float), np.asarray(grid_t_prime, float), indexing="ij")
    out = np.full(tt.shape, np.nan)
    ok = tp > tt
    out[ok] = sched.r_star(tt[ok], tp[ok])
    return out
