"""GLASS reparameterization of a pretrained field into a posterior sampler.

An inner state ``x_bar_s`` and the fixed outer state ``x_t`` are fused into
one effective observation at time ``t_star(s, t)``; denoising it with the
ordinary denoiser yields a velocity whose ODE transports N(0, I) at s=0 to
the posterior p(z | x_t) at s=1.  The inner schedule equals the outer one.
"""

from __future__ import annotations

import numpy as np

from .mixture import MixtureOracle
from .ode import rk4, time_grid
from .sched import Scheduler, ScheduleDomainError


def _col(v):
    v = np.asarray(v, dtype=float)
    return v[:, None] if v.ndim else v


def fusion_coeffs(sched: Scheduler, s, t):
    """Weights (c1, c2) with S = c1 * x_bar + c2 * x_t."""
    a_s, s_s = sched.alpha(s), sched.sigma(s)
    a_t, s_t = sched.alpha(t), sched.sigma(t)
    den = s_t**2 * a_s**2 + a_t**2 * s_s**2
    if np.any(den <= 0):
        raise ScheduleDomainError("sufficient statistic undefined: zero precision")
    return a_s * s_t**2 / den, a_t * s_s**2 / den


def sufficient_statistic(sched: Scheduler, x_bar, x_t, s, t):
    """Precision-weighted fusion of x_bar (inner time s) and x_t (outer time t)."""
    c1, c2 = fusion_coeffs(sched, s, t)
    return _col(c1) * np.asarray(x_bar, dtype=float) + _col(c2) * np.asarray(x_t, dtype=float)


def inner_start(sched: Scheduler) -> float:
    """Lowest inner time the GLASS field can be evaluated at.

    0 when the denoiser coefficients are finite there (linear), else t_min.
    """
    with np.errstate(all="ignore"):
        try:
            w = sched.denoiser_coeffs(0.0)
        except ScheduleDomainError:
            return sched.t_min
    return 0.0 if np.all(np.isfinite(w)) else sched.t_min


class GlassField:
    """Posterior-sampling velocity built from a mixture oracle's denoiser."""

    def __init__(self, oracle: MixtureOracle):
        self.oracle = oracle
        self.scheduler = oracle.scheduler
        self.s_min = inner_start(oracle.scheduler)

    def coefficients(self, s):
        """(w1(s), w2(s)); identical to the outer denoiser coefficients."""
        return self.scheduler.denoiser_coeffs(s)

    def _fused(self, x_bar, x_t, s, t):
        sched = self.scheduler
        tau = sched.t_star(s, t)
        c1, c2 = fusion_coeffs(sched, s, t)
        a_tau = sched.alpha(tau)
        y = _col(a_tau) * (_col(c1) * x_bar + _col(c2) * x_t)
        return y, tau, a_tau * c1, a_tau * c2

    def velocity(self, x_bar, x_t, s, t):
        x_bar = np.asarray(x_bar, dtype=float)
        x_t = np.asarray(x_t, dtype=float)
        w1, w2 = self.coefficients(s)
        y, tau, _, _ = self._fused(x_bar, x_t, s, t)
        return _col(w1) * x_bar + _col(w2) * self.oracle.denoiser(y, tau)

    def velocity_jacobians(self, x_bar, x_t, s, t):
        """(u, du/dx_bar, du/dx_t) for batched x_bar of shape (n, d)."""
        w1, w2 = self.coefficients(s)
        y, tau, k1, k2 = self._fused(x_bar, x_t, s, t)
        den, jd = self.oracle.denoiser_jacobian(y, tau)
        k1, k2 = np.asarray(k1), np.asarray(k2)
        if k1.ndim:
            k1, k2 = k1[:, None, None], k2[:, None, None]
        eye = np.eye(x_bar.shape[1])
        u = w1 * x_bar + w2 * den
        return u, w1 * eye + (w2 * k1) * jd, (w2 * k2) * jd

    def integrate(self, x_bar, x_t, t, s0=0.0, s1=1.0, n_steps=64):
        """Flow x_bar from inner time s0 to s1 (clamped RK4 + Euler tail)."""
        sched = self.scheduler
        x_bar = np.atleast_2d(np.asarray(x_bar, dtype=float))
        nodes, tail = time_grid(s0, s1, n_steps, self.s_min, sched.t_max)
        return rk4(lambda y, s: self.velocity(y, x_t, s, t), x_bar, nodes, tail)

    def sample_posterior_ode(self, x_t, t, n_steps: int, rng_seed, n_samples: int | None = None):
        """Posterior draws by integrating the GLASS ODE from Gaussian noise.

        One draw per seed; pass ``n_samples`` for a batch from the same seed.
        """
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        rng = np.random.default_rng(rng_seed)
        x_t = np.asarray(x_t, dtype=float)
        n = 1 if n_samples is None else n_samples
        x0 = rng.standard_normal((n, x_t.shape[-1]))
        out = self.integrate(x0, x_t, t, 0.0, 1.0, n_steps)
        return out[0] if n_samples is None else out
