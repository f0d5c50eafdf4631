"""Noise schedules and the scalar time algebra built on them.

A schedule is the pair (alpha_t, sigma_t) defining the Gaussian path
``x_t = alpha_t * z + sigma_t * eps`` with t=0 noise and t=1 data.  On top of
it live the noise-to-signal ratio ``g(t) = sigma_t**2 / alpha_t**2``, its
inverse, the fused time ``t_star`` of two observations, the early-stop inner
time ``r_star`` and the SNR-based renoising time.

All functions accept scalars or numpy arrays and broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("linear", "vp", "ve")


class ScheduleDomainError(ValueError):
    """Raised when a time argument hits a singularity of the schedule."""


@dataclass(frozen=True)
class Scheduler:
    """Closed-form (alpha, sigma) schedule.

    Args:
        kind: ``"linear"`` (alpha=t, sigma=1-t), ``"vp"`` (alpha=sqrt(t),
            sigma=sqrt(1-t)) or ``"ve"`` (alpha=1, sigma=sqrt(t)).
        t_min: lower clamp used wherever alpha or sigma vanish in a
            denominator.  ``t_max`` defaults to ``1 - t_min``.
    """

    kind: str = "linear"
    t_min: float = 1e-3
    t_max: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scheduler kind {self.kind!r}; expected one of {KINDS}")
        if self.t_max is None:
            object.__setattr__(self, "t_max", 1.0 - self.t_min)
        if not 0.0 < self.t_min < self.t_max < 1.0:
            raise ValueError("need 0 < t_min < t_max < 1")

    def clamp(self, t):
        return np.clip(t, self.t_min, self.t_max)

    # -- path coefficients ------------------------------------------------

    def alpha(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return t
        if self.kind == "vp":
            return np.sqrt(t)
        return np.ones_like(t)

    def sigma(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return 1.0 - t
        if self.kind == "vp":
            return np.sqrt(1.0 - t)
        return np.sqrt(t)

    def alpha_dot(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return np.ones_like(t)
        if self.kind == "vp":
            return 0.5 / np.sqrt(t)
        return np.zeros_like(t)

    def sigma_dot(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return -np.ones_like(t)
        if self.kind == "vp":
            return -0.5 / np.sqrt(1.0 - t)
        return 0.5 / np.sqrt(t)

    # -- noise-to-signal ratio -------------------------------------------

    def g(self, t):
        """Noise-to-signal ratio sigma_t^2 / alpha_t^2."""
        t = np.asarray(t, dtype=float)
        if self.kind == "ve":
            return t.copy()
        if np.any(t <= 0.0):
            raise ScheduleDomainError("g(t) is singular at t <= 0 (alpha vanishes)")
        if self.kind == "linear":
            return ((1.0 - t) / t) ** 2
        return (1.0 - t) / t

    def g_inv(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y < 0.0):
            raise ScheduleDomainError("g_inv requires y >= 0")
        if self.kind == "linear":
            with np.errstate(divide="ignore"):
                return 1.0 / (1.0 + np.sqrt(y))
        if self.kind == "vp":
            return 1.0 / (1.0 + y)
        return y.copy()

    def snr(self, t):
        """alpha_t^2 / sigma_t^2, i.e. 1/g, finite at t=0 and +inf at t=1."""
        a, s = self.alpha(t), self.sigma(t)
        with np.errstate(divide="ignore"):
            return a * a / (s * s)

    # -- fused and early-stop times ----------------------------------------

    def t_star(self, s, t):
        """Effective time of the statistic fusing observations at s and t.

        Satisfies 1/g(t_star) = 1/g(s) + 1/g(t).
        """
        a_s, s_s = self.alpha(s), self.sigma(s)
        a_t, s_t = self.alpha(t), self.sigma(t)
        den = s_t**2 * a_s**2 + a_t**2 * s_s**2
        if np.any(den <= 0.0):
            raise ScheduleDomainError("t_star undefined: both times carry no signal")
        return self.g_inv(s_t**2 * s_s**2 / den)

    def r_star(self, t, t_prime):
        """Inner time r at which ``t_star(r, t) == t_prime``."""
        t = np.asarray(t, dtype=float)
        t_prime = np.asarray(t_prime, dtype=float)
        if np.any(t_prime <= t):
            raise ScheduleDomainError("r_star requires t_prime > t")
        g_t = self.g(t)
        g_tp = self.g(t_prime)
        # 1/g(r) = 1/g(t') - 1/g(t); written in the product form to stay exact at g(t')=0.
        return self.g_inv(g_t * g_tp / (g_t - g_tp))

    def snr_shift_time(self, t, lam):
        """Earlier time t' whose noise-to-signal ratio is ``lam * g(t)``."""
        if np.any(np.asarray(lam) <= 0):
            raise ScheduleDomainError("lambda must be positive")
        return self.g_inv(lam * self.g(t))

    # -- field coefficients --------------------------------------------------

    def velocity_coeffs(self, t):
        """(a_t, b_t) with u_t(x) = a_t x + b_t grad log p_t(x)."""
        a = self.alpha(t)
        if np.any(a == 0.0):
            raise ScheduleDomainError("velocity_coeffs singular where alpha vanishes")
        ad, s, sd = self.alpha_dot(t), self.sigma(t), self.sigma_dot(t)
        return ad / a, s * s * ad / a - sd * s

    def denoiser_coeffs(self, t):
        """(w1, w2) with u_t(x) = w1 x + w2 D_t(x); also the GLASS coefficients."""
        s = self.sigma(t)
        if np.any(s == 0.0):
            raise ScheduleDomainError("denoiser_coeffs singular where sigma vanishes")
        w1 = self.sigma_dot(t) / s
        return w1, self.alpha_dot(t) - self.alpha(t) * w1
