"""Rewards and value-function estimators.

Estimators:

* ``posterior_value`` / ``posterior_value_gradient``: log-mean-exp and
  softmax-weighted reward gradients over one-step posterior samples drawn
  with a posterior diamond map.
* ``denoiser_value``: the plug-in r(D_t(x)) baseline (biased by the Jensen gap).
* ``weighted_diamond_gradient`` / ``weighted_diamond_value``: consistent
  estimators from a deterministic flow map made stochastic by renoising,
  with importance weights correcting the proposal.

Every estimator returns a :class:`ValueEstimate` carrying an effective sample
size and jackknife standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .maps import FlowMap, PosteriorDiamondMap, renoise_std
from .mixture import MixtureOracle
from .sched import ScheduleDomainError

LOG_2PI = np.log(2.0 * np.pi)


# -- rewards -------------------------------------------------------------------


class Reward:
    """r(z) evaluated row-wise on (n, d) arrays (or a single d-vector)."""

    kind = "abstract"

    def __call__(self, z):
        return self.eval(z)

    def eval(self, z):
        raise NotImplementedError

    def grad(self, z):
        raise NotImplementedError


class QuadraticReward(Reward):
    """r(z) = 0.5 z^T A z + b^T z + c0."""

    kind = "quadratic"

    def __init__(self, A, b, c0: float = 0.0):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.asarray(b, dtype=float)
        self.c0 = float(c0)
        if not np.allclose(self.A, self.A.T):
            raise ValueError("A must be symmetric")

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def quadratic_form(self):
        return self.A, self.b, self.c0

    def eval(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", z, self.A, z) + z @ self.b + self.c0

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        return z @ self.A + self.b


class LinearReward(QuadraticReward):
    """r(z) = c^T z."""

    kind = "linear"

    def __init__(self, c):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        super().__init__(np.zeros((c.size, c.size)), c)
        self.c = c

    def eval(self, z):
        return np.asarray(z, dtype=float) @ self.c

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(self.c, z.shape).copy()


class RadialReward(QuadraticReward):
    """r(z) = -scale * ||z - target||^2 / 2."""

    kind = "radial"

    def __init__(self, target, scale: float):
        target = np.atleast_1d(np.asarray(target, dtype=float))
        if scale <= 0:
            raise ValueError("scale must be positive")
        d = target.size
        super().__init__(-scale * np.eye(d), scale * target, -0.5 * scale * target @ target)
        self.target = target
        self.scale = float(scale)


def zero_reward(dim: int) -> LinearReward:
    return LinearReward(np.zeros(dim))


def reward_from_dict(spec: dict, dim: int) -> Reward:
    kind = spec.get("kind", "linear")
    if kind == "zero":
        return zero_reward(dim)
    if kind == "linear":
        return LinearReward(spec["c"])
    if kind == "quadratic":
        return QuadraticReward(spec["A"], spec["b"], spec.get("c0", 0.0))
    if kind == "radial":
        return RadialReward(spec["target"], spec["scale"])
    raise ValueError(f"unknown reward kind {kind!r}")


# -- estimates -----------------------------------------------------------------


@dataclass
class ValueEstimate:
    value: float | None = None
    gradient: np.ndarray | None = None
    ess: float = 1.0
    n_particles: int = 0
    std_error: float | None = None
    grad_std_error: np.ndarray | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "value": None if self.value is None else float(self.value),
            "grad": None if self.gradient is None else np.asarray(self.gradient).tolist(),
            "ess": float(self.ess),
            "K": int(self.n_particles),
            "stderr": None if self.std_error is None else float(self.std_error),
        }
        if self.grad_std_error is not None:
            out["grad_stderr"] = np.asarray(self.grad_std_error).tolist()
        return out


def ess(log_weights) -> float:
    """Normalized effective sample size (sum w)^2 / (N sum w^2) in (0, 1]."""
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0:
        raise ValueError("ess of an empty weight vector")
    if not np.any(np.isfinite(lw)):
        raise ValueError("ess undefined: all weights vanish")
    return float(np.exp(2 * logsumexp(lw) - logsumexp(2 * lw)) / lw.size)


def _ess_rows(lw):
    return np.exp(2 * logsumexp(lw, axis=-1) - logsumexp(2 * lw, axis=-1)) / lw.shape[-1]


def _softmax(v, axis=-1):
    w = np.exp(v - v.max(axis=axis, keepdims=True))
    return w / w.sum(axis=axis, keepdims=True)


def _jackknife_lme(v):
    """Jackknife standard error of log-mean-exp(v)."""
    k = v.size
    if k < 2:
        return float("nan")
    m = v.max()
    e = np.exp(v - m)
    tot = e.sum()
    loo = np.log(np.maximum(tot - e, 1e-300) / (k - 1)) + m
    return float(np.sqrt((k - 1) / k * np.sum((loo - loo.mean()) ** 2)))


def _jackknife_ratio(v, g):
    """Jackknife standard error of sum softmax(v)_i g_i, per coordinate."""
    k = v.size
    if k < 2:
        return np.full(g.shape[1], np.nan)
    e = np.exp(v - v.max())
    sw = e.sum()
    sg = e @ g
    loo = (sg[None, :] - e[:, None] * g) / np.maximum(sw - e, 1e-300)[:, None]
    return np.sqrt((k - 1) / k * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))


def _lme(v, axis=-1):
    return logsumexp(v, axis=axis) - np.log(v.shape[axis])


# -- posterior diamond estimators --------------------------------------------------


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def posterior_values(map: PosteriorDiamondMap, xs, t, reward: Reward, K: int, rng):
    """Batched value estimates, one per row of ``xs`` (K posterior draws each)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n, d = xs.shape
    rng = _rng(rng)
    rep = np.repeat(xs, K, axis=0)
    z = map.apply(rng.standard_normal(rep.shape), 0.0, 1.0, rep, t)
    r = reward.eval(z).reshape(n, K)
    return _lme(r, axis=1)


def posterior_value(map: PosteriorDiamondMap, x_t, t, reward: Reward, K: int, rng_seed=None) -> ValueEstimate:
    """Log-mean-exp of rewards over K one-step posterior samples."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = _rng(rng_seed)
    x_t = np.asarray(x_t, dtype=float)
    x0 = rng.standard_normal((K, x_t.shape[-1]))
    z = map.apply(x0, 0.0, 1.0, x_t, t)
    r = reward.eval(z)
    return ValueEstimate(
        value=float(_lme(r)),
        ess=ess(r),
        n_particles=K,
        std_error=_jackknife_lme(r),
    )


def _fd_pullback(apply, x_t, h, reward):
    """Central-difference d r(z) / d x_t with the noise held fixed; (K, d)."""
    d = x_t.shape[-1]
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        cols.append((reward.eval(apply(x_t + e)) - reward.eval(apply(x_t - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def posterior_value_gradient(
    map: PosteriorDiamondMap,
    x_t,
    t,
    reward: Reward,
    K: int,
    rng_seed=None,
    sensitivity: str = "tangent-ode",
    fd_step: float = 1e-4,
) -> ValueEstimate:
    """Softmax(r(z^k))-weighted pullbacks of reward gradients through the map."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = _rng(rng_seed)
    x_t = np.asarray(x_t, dtype=float)
    x0 = rng.standard_normal((K, x_t.shape[-1]))
    if sensitivity == "tangent-ode":
        z, jac = map.apply_with_jacobian(x0, 0.0, 1.0, x_t, t)
        pulled = np.einsum("kij,ki->kj", jac, reward.grad(z))
    elif sensitivity == "finite-difference":
        z = map.apply(x0, 0.0, 1.0, x_t, t)
        pulled = _fd_pullback(lambda xx: map.apply(x0, 0.0, 1.0, xx, t), x_t, fd_step, reward)
    else:
        raise ValueError(f"unknown sensitivity mode {sensitivity!r}")
    r = reward.eval(z)
    w = _softmax(r)
    return ValueEstimate(
        value=float(_lme(r)),
        gradient=w @ pulled,
        ess=ess(r),
        n_particles=K,
        std_error=_jackknife_lme(r),
        grad_std_error=_jackknife_ratio(r, pulled),
    )


def posterior_value_gradients(map: PosteriorDiamondMap, xs, t, reward: Reward, K: int, rng):
    """Batched gradient estimates, one per row of ``xs``; returns (grads, ess)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n, d = xs.shape
    rng = _rng(rng)
    rep = np.repeat(xs, K, axis=0)
    z, jac = map.apply_with_jacobian(rng.standard_normal(rep.shape), 0.0, 1.0, rep, t)
    pulled = np.einsum("kij,ki->kj", jac, reward.grad(z)).reshape(n, K, d)
    r = reward.eval(z).reshape(n, K)
    w = _softmax(r, axis=1)
    return np.einsum("nk,nkd->nd", w, pulled), _ess_rows(r)


def denoiser_value(oracle: MixtureOracle, x_t, t, reward: Reward) -> ValueEstimate:
    """Plug-in r(D_t(x)) with its exact gradient through the denoiser Jacobian."""
    den, jac = oracle.denoiser_jacobian(np.asarray(x_t, dtype=float), t)
    return ValueEstimate(
        value=float(reward.eval(den)),
        gradient=jac.T @ reward.grad(den),
        ess=1.0,
        n_particles=1,
        std_error=0.0,
    )


# -- weighted diamond estimators ------------------------------------------------------


def _weighted_terms(flowmap, score_fn, xs, t, t_prime, reward, N, rng, quadrature, sensitivity, fd_step):
    """Per-particle log-weights, gradients and pieces for B query points.

    Returns a dict of arrays shaped (B, N, ...).
    """
    sched = flowmap.scheduler
    B, d = xs.shape
    a_t, s_t = float(sched.alpha(t)), float(sched.sigma(t))
    ratio, std = renoise_std(sched, t, t_prime)
    ratio, std = float(ratio), float(std)
    x = np.repeat(xs, N, axis=0)
    eps = rng.standard_normal(x.shape)
    x_tp = ratio * x + std * eps
    if sensitivity == "tangent-ode":
        z, jac = flowmap.apply_with_jacobian(x_tp, t_prime, 1.0)
    elif sensitivity == "finite-difference":
        z = flowmap.apply(x_tp, t_prime, 1.0)
        jac = None
    else:
        raise ValueError(f"unknown sensitivity mode {sensitivity!r}")
    resid = x - a_t * z
    r_local = reward.eval(z) - np.sum(resid * resid, axis=1) / (2 * s_t**2)
    if jac is not None:
        # d z / d x_t = ratio * J; r_local = r(z) - |x - a z|^2 / (2 s^2)
        grad_local = ratio * np.einsum("nij,ni->nj", jac, reward.grad(z) + a_t * resid / s_t**2) - resid / s_t**2
    else:
        cols = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = fd_step
            vals = []
            for sign in (1.0, -1.0):
                xp = x + sign * e
                zp = flowmap.apply(ratio * xp + std * eps, t_prime, 1.0)
                rp = xp - a_t * zp
                vals.append(reward.eval(zp) - np.sum(rp * rp, axis=1) / (2 * s_t**2))
            cols.append((vals[0] - vals[1]) / (2 * fd_step))
        grad_local = np.stack(cols, axis=1)
    score_tp_xtp = score_fn(x_tp, t_prime)
    score_t_x = np.repeat(score_fn(xs, t), N, axis=0)
    step = x_tp - x
    if quadrature == "trapezoid":
        score_tp_x = np.repeat(score_fn(xs, t_prime), N, axis=0)
        gamma = 0.5 * np.sum((score_tp_x + score_tp_xtp) * step, axis=1)
    elif quadrature == "midpoint":
        gamma = np.sum(score_fn(0.5 * (x + x_tp), t_prime) * step, axis=1)
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    delta_score = ratio * score_tp_xtp - score_t_x
    half_eps = 0.5 * np.sum(eps * eps, axis=1)
    return {
        "eps": eps.reshape(B, N, d),
        "x_tp": x_tp.reshape(B, N, d),
        "z": z.reshape(B, N, d),
        "r": reward.eval(z).reshape(B, N),
        "r_local": r_local.reshape(B, N),
        "gamma": gamma.reshape(B, N),
        "v": (r_local + gamma + half_eps).reshape(B, N),
        "half_eps": half_eps.reshape(B, N),
        "grad_local": grad_local.reshape(B, N, d),
        "delta_score": delta_score.reshape(B, N, d),
        "resid_sq": np.sum(resid * resid, axis=1).reshape(B, N),
        "a_t": a_t,
        "s_t": s_t,
        "std": std,
    }


def _renoise_time(sched, t, lam):
    t_prime = float(sched.snr_shift_time(t, lam))
    if not t_prime < t:
        raise ScheduleDomainError("SNR factor must exceed 1 so that t' < t")
    return t_prime


def weighted_diamond_gradient(
    flowmap: FlowMap,
    score_fn,
    x_t,
    t,
    lam,
    reward: Reward,
    N: int,
    rng_seed=None,
    quadrature: str = "trapezoid",
    sensitivity: str = "tangent-ode",
    fd_step: float = 1e-4,
) -> ValueEstimate:
    """Value-gradient estimate from a deterministic flow map via renoising.

    Particles renoise ``x_t`` to t' = snr_shift_time(t, lam), map to data and
    are weighted by softmax(r_local + gamma + |eps|^2 / 2); the per-particle
    direction is grad r_local + delta_score.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    sched = flowmap.scheduler
    t_prime = _renoise_time(sched, t, lam)
    x_t = np.asarray(x_t, dtype=float)
    terms = _weighted_terms(
        flowmap, score_fn, x_t[None], t, t_prime, reward, N, _rng(rng_seed), quadrature, sensitivity, fd_step
    )
    v = terms["v"][0]
    direction = terms["grad_local"][0] + terms["delta_score"][0]
    w = _softmax(v)
    return ValueEstimate(
        gradient=w @ direction,
        ess=ess(v),
        n_particles=N,
        grad_std_error=_jackknife_ratio(v, direction),
        details={"t_prime": t_prime},
    )


def weighted_diamond_gradients(flowmap, score_fn, xs, t, lam, reward, N, rng, quadrature="trapezoid"):
    """Batched weighted gradients; returns (grads (B, d), ess (B,))."""
    t_prime = _renoise_time(flowmap.scheduler, t, lam)
    terms = _weighted_terms(
        flowmap, score_fn, np.atleast_2d(xs), t, t_prime, reward, N, _rng(rng), quadrature, "tangent-ode", 0.0
    )
    v = terms["v"]
    w = _softmax(v, axis=1)
    direction = terms["grad_local"] + terms["delta_score"]
    return np.einsum("bn,bnd->bd", w, direction), _ess_rows(v)


def log_density_offset(score_fn, velocity_jac_fn, x_t, t_prime, t, n_quad: int, n_hutchinson: int, rng):
    """Estimate log p_{t'}(x) - log p_t(x) = int_{t'}^{t} (score.u + div u) dr.

    Trapezoid rule over ``n_quad`` nodes; divergence by Gaussian Hutchinson
    probes.  Returns ``(estimate, std_error, analytic_trace_version)``.
    """
    x = np.asarray(x_t, dtype=float)[None]
    d = x.shape[1]
    nodes = np.linspace(t_prime, t, n_quad)
    wts = np.full(n_quad, nodes[1] - nodes[0] if n_quad > 1 else t - t_prime)
    if n_quad > 1:
        wts[[0, -1]] *= 0.5
    drift = np.empty(n_quad)
    trace_exact = np.empty(n_quad)
    probe_mean = np.empty(n_quad)
    probe_var = np.empty(n_quad)
    for i, r in enumerate(nodes):
        u, jac = velocity_jac_fn(x, r)
        drift[i] = float(score_fn(x, r)[0] @ u[0])
        trace_exact[i] = np.trace(jac[0])
        probes = rng.standard_normal((n_hutchinson, d))
        quad = np.einsum("pi,ij,pj->p", probes, jac[0], probes)
        probe_mean[i] = quad.mean()
        probe_var[i] = quad.var(ddof=1) / n_hutchinson if n_hutchinson > 1 else 0.0
    est = wts @ (drift + probe_mean)
    se = float(np.sqrt(wts**2 @ probe_var))
    return float(est), se, float(wts @ (drift + trace_exact))


def weighted_diamond_value(
    flowmap: FlowMap,
    score_fn,
    velocity_jac_fn,
    x_t,
    t,
    lam,
    reward: Reward,
    N: int,
    n_hutchinson: int,
    rng_seed=None,
    n_quad: int = 9,
    quadrature: str = "trapezoid",
) -> ValueEstimate:
    """Value estimate from a renoised flow map plus a fixed log-density offset.

    ``velocity_jac_fn(x, r)`` returns the velocity and its Jacobian (n, d, d);
    the offset's divergence term uses ``n_hutchinson`` Gaussian probes.
    """
    sched = flowmap.scheduler
    rng = _rng(rng_seed)
    t_prime = _renoise_time(sched, t, lam)
    x_t = np.asarray(x_t, dtype=float)
    d = x_t.shape[-1]
    terms = _weighted_terms(flowmap, score_fn, x_t[None], t, t_prime, reward, N, rng, quadrature, "tangent-ode", 0.0)
    s_t, std = terms["s_t"], terms["std"]
    log_lik = -terms["resid_sq"][0] / (2 * s_t**2) - 0.5 * d * np.log(2 * np.pi * s_t**2)
    log_q = -terms["half_eps"][0] - 0.5 * d * np.log(2 * np.pi * std**2)
    v = terms["r"][0] + terms["gamma"][0] + log_lik - log_q
    a_hat = float(_lme(v))
    offset, offset_se, offset_exact = log_density_offset(
        score_fn, velocity_jac_fn, x_t, t_prime, t, n_quad, n_hutchinson, rng
    )
    se = float(np.sqrt(_jackknife_lme(v) ** 2 + offset_se**2))
    return ValueEstimate(
        value=a_hat + offset,
        ess=ess(v),
        n_particles=N,
        std_error=se,
        details={
            "t_prime": t_prime,
            "importance_term": a_hat,
            "offset": offset,
            "offset_std_error": offset_se,
            "offset_analytic_trace": offset_exact,
        },
    )
