"""Reward alignment: guided sampling, SMC, search and Best-of-N.

All samplers target the reward-tilted law p_data(z) exp(r(z)) / Z.  Time
runs from noise (t_min) to data (1).  Guidance adds b_t * grad V_t to the
marginal velocity, where b_t is the score coefficient of the velocity so
that the guided field is exactly the tilted velocity when grad V is exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .maps import FlowMap, PosteriorDiamondMap, diamond_ddpm_step
from .mixture import MixtureOracle
from .reward import (
    Reward,
    ess,
    posterior_value_gradients,
    posterior_values,
    weighted_diamond_gradients,
)
from .sched import ScheduleDomainError


@dataclass
class GuidanceConfig:
    n_steps: int = 50
    particles: int = 4
    lam: float = 20.0
    t_lo: float = 0.05
    t_hi: float = 0.25
    reward_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.t_lo < self.t_hi <= 1.0:
            raise ValueError("guidance window needs 0 <= t_lo < t_hi <= 1")
        if self.n_steps < 1 or self.particles < 1:
            raise ValueError("n_steps and particles must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        return cls(**d)


@dataclass
class ParticleEnsemble:
    states: np.ndarray
    log_potentials: np.ndarray
    last_values: np.ndarray
    t: float
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ValueError("ensemble needs an (M, d) state matrix with M >= 1")

    @property
    def size(self) -> int:
        return self.states.shape[0]


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _guidance_coeff(sched, t):
    return float(sched.velocity_coeffs(t)[1])


def _in_window(t, cfg):
    return cfg.t_lo <= t <= cfg.t_hi


def _initial_noise(oracle, n_samples, rng, x_init):
    if x_init is not None:
        return np.atleast_2d(np.array(x_init, dtype=float))
    return rng.standard_normal((n_samples, oracle.dim))


def guide_posterior(
    oracle: MixtureOracle,
    diamond_map: PosteriorDiamondMap | None,
    reward: Reward,
    cfg: GuidanceConfig,
    rng_seed=None,
    n_samples: int = 1,
    gradient: str = "estimator",
    x_init=None,
):
    """Euler-guided sampling with posterior-diamond value gradients.

    ``gradient="exact"`` swaps the estimator for the closed-form value
    gradient (the oracle upper bound).  Returns (n_samples, d) terminal states.
    """
    sched = oracle.scheduler
    rng = _rng(rng_seed)
    x = _initial_noise(oracle, n_samples, rng, x_init)
    grad_rng = np.random.default_rng(rng.integers(2**63))
    ts = np.linspace(sched.t_min, 1.0, cfg.n_steps + 1)
    for t, t_next in zip(ts[:-1], ts[1:]):
        u = oracle.velocity(x, t)
        if _in_window(t, cfg):
            if gradient == "exact":
                _, g = oracle.value_exact(x, t, reward)
            elif gradient == "estimator":
                g, _ = posterior_value_gradients(diamond_map, x, t, reward, cfg.particles, grad_rng)
            else:
                raise ValueError(f"unknown gradient mode {gradient!r}")
            u = u + cfg.reward_scale * _guidance_coeff(sched, t) * g
        x = x + (t_next - t) * u
    return x


def guide_weighted(
    oracle: MixtureOracle,
    flowmap: FlowMap,
    reward: Reward,
    cfg: GuidanceConfig,
    rng_seed=None,
    n_samples: int = 1,
    x_init=None,
    quadrature: str = "trapezoid",
):
    """Guidance with weighted-diamond gradients inside [t_lo, t_hi].

    The flow map jumps from t_min to t_lo, ``cfg.n_steps`` guided Euler steps
    cover the window and a second jump lands at 1.  Total map evaluations per
    sample: 2 + n_steps * (particles + 1).
    """
    sched = oracle.scheduler
    rng = _rng(rng_seed)
    x = _initial_noise(oracle, n_samples, rng, x_init)
    grad_rng = np.random.default_rng(rng.integers(2**63))
    lo = max(cfg.t_lo, sched.t_min)
    hi = min(cfg.t_hi, sched.t_max)
    x = flowmap.apply(x, sched.t_min, lo)
    ts = np.linspace(lo, hi, cfg.n_steps + 1)
    for t, t_next in zip(ts[:-1], ts[1:]):
        t_prime = float(sched.snr_shift_time(t, cfg.lam))
        if not t_prime < t:
            raise ScheduleDomainError("window and lambda give t' >= t")
        g, _ = weighted_diamond_gradients(flowmap, oracle.score, x, t, cfg.lam, reward, cfg.particles, grad_rng, quadrature)
        x = x + (t_next - t) * (oracle.velocity(x, t) + cfg.reward_scale * _guidance_coeff(sched, t) * g)
    return flowmap.apply(x, hi, 1.0)


def weighted_guidance_nfe(cfg: GuidanceConfig) -> int:
    return 2 + cfg.n_steps * (cfg.particles + 1)


def unguided_euler(oracle: MixtureOracle, n_steps: int, rng_seed=None, n_samples: int = 1, x_init=None):
    """Plain Euler integration of the marginal velocity (the base sampler)."""
    sched = oracle.scheduler
    rng = _rng(rng_seed)
    x = _initial_noise(oracle, n_samples, rng, x_init)
    ts = np.linspace(sched.t_min, 1.0, n_steps + 1)
    for t, t_next in zip(ts[:-1], ts[1:]):
        x = x + (t_next - t) * oracle.velocity(x, t)
    return x


# -- particle methods ---------------------------------------------------------------


def _resample_indices(log_w, rng, systematic):
    m = log_w.size
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    if systematic:
        cdf = np.cumsum(w)
        cdf[-1] = 1.0
        return np.searchsorted(cdf, (rng.random() + np.arange(m)) / m)
    return rng.choice(m, size=m, p=w)


def _values(map, x, t, reward, K, rng):
    if t >= 1.0:
        return reward.eval(x)
    return posterior_values(map, x, t, reward, K, rng)


def _time_grid(sched, n_steps):
    return np.linspace(sched.t_min, 1.0, n_steps + 1)


def smc(
    oracle: MixtureOracle,
    diamond_map: PosteriorDiamondMap,
    reward: Reward,
    M: int,
    N: int,
    K: int,
    resample_mode: str = "per-step-reset",
    rng_seed=None,
    systematic: bool = False,
    resample: bool = True,
    return_ensemble: bool = False,
):
    """Sequential Monte Carlo over diamond DDPM transitions.

    per-step-reset: weights softmax(V_{t'} - V_t), potentials reset after
    each resampling.  literal-carry: potentials accumulate across steps and
    resampling uses softmax(U).  ``resample=False`` only records weights.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if resample_mode not in ("per-step-reset", "literal-carry"):
        raise ValueError(f"unknown resample mode {resample_mode!r}")
    sched = oracle.scheduler
    rng = _rng(rng_seed)
    ts = _time_grid(sched, N)
    x = rng.standard_normal((M, oracle.dim))
    values = _values(diamond_map, x, ts[0], reward, K, rng)
    ens = ParticleEnsemble(x, np.zeros(M), values, float(ts[0]))
    for t, t_next in zip(ts[:-1], ts[1:]):
        ens.states = diamond_ddpm_step(diamond_map, ens.states, t, t_next, rng)
        new_values = _values(diamond_map, ens.states, t_next, reward, K, rng)
        incr = new_values - ens.last_values
        ens.log_potentials = ens.log_potentials + incr
        log_w = incr if resample_mode == "per-step-reset" else ens.log_potentials
        step_ess = ess(log_w)
        if M > 1 and step_ess <= (1.0 + 1e-9) / M:
            warnings.warn(f"degenerate ensemble at t={t_next:.4f} (ess={step_ess:.3g})", RuntimeWarning)
        did = resample and M > 1
        if did:
            idx = _resample_indices(log_w, rng, systematic)
            ens.states = ens.states[idx]
            new_values = new_values[idx]
            ens.log_potentials = (
                np.zeros(M) if resample_mode == "per-step-reset" else ens.log_potentials[idx]
            )
        ens.last_values = new_values
        ens.t = float(t_next)
        ens.history.append(
            {
                "t": float(t_next),
                "ess": step_ess,
                "resampled": did,
                "mean_value": float(np.mean(new_values)),
                "log_increment": incr,
            }
        )
    return ens if return_ensemble else ens.states


def search(
    oracle: MixtureOracle,
    diamond_map: PosteriorDiamondMap,
    reward: Reward,
    M: int,
    N: int,
    K: int,
    rng_seed=None,
    return_history: bool = False,
):
    """Greedy search: after every step all particles copy the best one."""
    if M < 1:
        raise ValueError("M must be >= 1")
    sched = oracle.scheduler
    rng = _rng(rng_seed)
    ts = _time_grid(sched, N)
    x = np.repeat(rng.standard_normal((1, oracle.dim)), M, axis=0)
    history = []
    for t, t_next in zip(ts[:-1], ts[1:]):
        x = diamond_ddpm_step(diamond_map, x, t, t_next, rng)
        v = _values(diamond_map, x, t_next, reward, K, rng)
        best = int(np.argmax(v))
        history.append({"t": float(t_next), "states": x.copy(), "values": v, "best": best})
        x = np.repeat(x[best : best + 1], M, axis=0)
    return (x[0], history) if return_history else x[0]


def best_of_n(sampler, reward: Reward, n: int, rng_seed=None):
    """Draw n samples with ``sampler(n, rng)`` and keep the highest reward."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = np.atleast_2d(sampler(n, _rng(rng_seed)))
    return z[int(np.argmax(reward.eval(z)))]


def flow_map_sampler(flowmap: FlowMap, dim: int):
    """One-evaluation sampler: noise at t_min mapped straight to data."""
    t0 = flowmap.scheduler.t_min

    def sampler(n, rng):
        return flowmap.apply(rng.standard_normal((n, dim)), t0, 1.0)

    return sampler
