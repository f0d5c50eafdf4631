"""Gaussian-mixture data distributions and their exact flow-matching oracle.

Every quantity a trained flow model would only approximate (marginal
density, score, denoiser, velocity, posterior, value function) has a closed
form when the data are a finite Gaussian mixture and the path is Gaussian.
Components are stored in their covariance eigenbasis so that the noised
covariance ``alpha^2 Sigma + sigma^2 I`` is diagonal there and point-mass
components (zero covariance) need no special casing.

Batched functions take ``x`` of shape (n, d) or (d,) and ``t`` either scalar
or of shape (n,).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .sched import Scheduler, ScheduleDomainError

LOG_2PI = np.log(2.0 * np.pi)


class RewardCurvatureError(ValueError):
    """A quadratic reward makes a tilted posterior component improper."""


@dataclass
class GaussianMixture:
    """Weighted Gaussian components; covariances may be singular."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    _eig: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None]
        self.covs = covs
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.covs.shape != (k, d, d):
            raise ValueError("inconsistent mixture shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if not np.allclose(self.covs, np.swapaxes(self.covs, 1, 2), atol=1e-12):
            raise ValueError("component covariances must be symmetric")
        lam, vecs = np.linalg.eigh(self.covs)
        scale = max(1.0, float(np.abs(lam).max(initial=0.0)))
        if np.any(lam < -1e-10 * scale):
            raise ValueError("component covariances must be positive semidefinite")
        self._eig = (np.clip(lam, 0.0, None), vecs)

    @classmethod
    def from_dict(cls, spec: dict) -> "GaussianMixture":
        w = np.asarray(spec["weights"], dtype=float)
        return cls(w / w.sum(), spec["means"], spec["covs"])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def eig(self):
        """(eigenvalues (K, d), eigenvectors (K, d, d)) of the covariances."""
        return self._eig

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        diff = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum(
            "k,ki,kj->ij", self.weights, diff, diff
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        lam, vecs = self._eig
        eps = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k in range(self.n_components):
            idx = comp == k
            root = vecs[k] * np.sqrt(lam[k])
            out[idx] = self.means[k] + eps[idx] @ root.T
        return out

    def log_pdf(self, z) -> np.ndarray:
        """Log density; only defined when every component is non-degenerate."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        lam, vecs = self._eig
        if np.any(lam <= 0):
            raise ValueError("log_pdf undefined for degenerate components")
        terms = []
        for k in range(self.n_components):
            y = (z - self.means[k]) @ vecs[k]
            quad = np.sum(y * y / lam[k], axis=1)
            terms.append(np.log(self.weights[k]) - 0.5 * quad - 0.5 * np.sum(np.log(2 * np.pi * lam[k])))
        return logsumexp(np.stack(terms, axis=1), axis=1)

    def tilt_linear(self, c) -> "GaussianMixture":
        """Exact tilt p(z) exp(c.z) / Z."""
        c = np.asarray(c, dtype=float)
        shift = self.covs @ c
        logw = np.log(self.weights) + self.means @ c + 0.5 * np.einsum("ki,i->k", shift, c)
        w = np.exp(logw - logsumexp(logw))
        w /= w.sum()
        return GaussianMixture(w, self.means + shift, self.covs.copy())


def _rowsum(a):
    return a @ np.ones(a.shape[1])


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


class MixtureOracle:
    """Closed-form flow-matching quantities for a Gaussian-mixture dataset."""

    def __init__(self, mixture: GaussianMixture, scheduler: Scheduler):
        self.mixture = mixture
        self.scheduler = scheduler
        lam, vecs = mixture.eig
        self._lam = lam
        self._vecs = vecs
        self._mu_rot = np.einsum("kd,kde->ke", mixture.means, vecs)
        self._logw = np.log(np.where(mixture.weights > 0, mixture.weights, 1e-300))

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def _path(self, t, n):
        """alpha, sigma as scalars or (n, 1) columns."""
        t = np.asarray(t, dtype=float)
        a, s = self.scheduler.alpha(t), self.scheduler.sigma(t)
        if t.ndim:
            a = np.broadcast_to(a, (n,))[:, None]
            s = np.broadcast_to(s, (n,))[:, None]
        return a, s

    def _parts(self, x, t):
        """Per-component log-likelihoods, rotated posterior means and variances."""
        n, d = x.shape
        if np.any(np.asarray(t) < 0.0) or np.any(np.asarray(t) > 1.0):
            raise ScheduleDomainError("time outside [0, 1]")
        a, s = self._path(t, n)
        if np.any(s <= 0):
            raise ScheduleDomainError("posterior quantities need sigma_t > 0")
        s2 = s * s
        logn, m_rot, c_rot = [], [], []
        for k in range(self.mixture.n_components):
            xr = x @ self._vecs[k]
            var = a * a * self._lam[k] + s2
            diff = xr - a * self._mu_rot[k]
            if np.ndim(var) == 1:
                quad = (diff * diff) @ (1.0 / var)
                logdet = np.log(var).sum()
            else:
                quad = _rowsum(diff * diff / var)
                logdet = _rowsum(np.log(var))
            logn.append(-0.5 * (quad + logdet + d * LOG_2PI))
            m_rot.append((s2 * self._mu_rot[k] + a * self._lam[k] * xr) / var)
            c_rot.append(np.broadcast_to(self._lam[k] * s2 / var, xr.shape))
        return np.stack(logn, axis=1), m_rot, c_rot, a, s

    def _responsibilities(self, logn):
        joint = logn + self._logw
        m = joint.max(axis=1, keepdims=True)
        e = np.exp(joint - m)
        tot = _rowsum(e)
        return e / tot[:, None], m[:, 0] + np.log(tot)

    def _means(self, m_rot):
        return [m_rot[k] @ self._vecs[k].T for k in range(len(m_rot))]

    # -- densities and fields ---------------------------------------------

    def log_marginal(self, x, t):
        x, single = _as_batch(x)
        logn, _, _, _, _ = self._parts(x, t)
        _, out = self._responsibilities(logn)
        return out[0] if single else out

    def denoiser(self, x, t):
        x, single = _as_batch(x)
        logn, m_rot, _, _, _ = self._parts(x, t)
        resp, _ = self._responsibilities(logn)
        means = self._means(m_rot)
        out = sum(resp[:, k : k + 1] * means[k] for k in range(len(means)))
        return out[0] if single else out

    def score(self, x, t):
        x, single = _as_batch(x)
        a, s = self._path(t, x.shape[0])
        out = (a * self.denoiser(x, t) - x) / (s * s)
        return out[0] if single else out

    def velocity(self, x, t):
        x, single = _as_batch(x)
        w1, w2 = self.scheduler.denoiser_coeffs(t)
        w1, w2 = np.asarray(w1), np.asarray(w2)
        if w1.ndim:
            w1, w2 = w1[:, None], w2[:, None]
        out = w1 * x + w2 * self.denoiser(x, t)
        return out[0] if single else out

    def conditional_velocity(self, x, z, t):
        w1, w2 = self.scheduler.denoiser_coeffs(t)
        return w1 * np.asarray(x, dtype=float) + w2 * np.asarray(z, dtype=float)

    def posterior_moments(self, x, t):
        """Posterior mean (n, d) and covariance (n, d, d)."""
        x, single = _as_batch(x)
        logn, m_rot, c_rot, _, _ = self._parts(x, t)
        resp, _ = self._responsibilities(logn)
        means = self._means(m_rot)
        mean = sum(resp[:, k : k + 1] * means[k] for k in range(len(means)))
        cov = np.zeros((x.shape[0], x.shape[1], x.shape[1]))
        for k, mk in enumerate(means):
            vk = self._vecs[k]
            ck = np.einsum("ij,nj,kj->nik", vk, c_rot[k], vk)
            dk = mk - mean
            cov += resp[:, k, None, None] * (ck + dk[:, :, None] * dk[:, None, :])
        if single:
            return mean[0], cov[0]
        return mean, cov

    def denoiser_jacobian(self, x, t):
        """dD/dx = (alpha / sigma^2) * posterior covariance."""
        x, single = _as_batch(x)
        a, s = self._path(t, x.shape[0])
        mean, cov = self.posterior_moments(x, t)
        fac = np.asarray(a / (s * s))
        jac = cov * (fac[..., None] if fac.ndim else fac)
        return (mean[0], jac[0]) if single else (mean, jac)

    def velocity_jacobian(self, x, t):
        """(velocity, d velocity / dx)."""
        x, single = _as_batch(x)
        w1, w2 = self.scheduler.denoiser_coeffs(t)
        w1, w2 = np.asarray(w1), np.asarray(w2)
        mean, jd = self.denoiser_jacobian(x, t)
        eye = np.eye(x.shape[1])
        if w1.ndim:
            vel = w1[:, None] * x + w2[:, None] * mean
            jac = w1[:, None, None] * eye + w2[:, None, None] * jd
        else:
            vel = w1 * x + w2 * mean
            jac = w1 * eye + w2 * jd
        return (vel[0], jac[0]) if single else (vel, jac)

    def score_jacobian(self, x, t):
        x, single = _as_batch(x)
        a, s = self._path(t, x.shape[0])
        mean, cov = self.posterior_moments(x, t)
        a, s = np.asarray(a), np.asarray(s)
        if a.ndim:
            a, s = a[:, :, None], s[:, :, None]
        jac = (a * a * cov / (s * s) - np.eye(x.shape[1])) / (s * s)
        return jac[0] if single else jac

    # -- posterior ----------------------------------------------------------

    def posterior(self, x, t) -> GaussianMixture:
        """Exact posterior p(z | x_t = x) for a single state x."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        logn, m_rot, c_rot, _, _ = self._parts(x, t)
        resp, _ = self._responsibilities(logn)
        means = np.stack([m[0] for m in self._means(m_rot)])
        covs = np.stack(
            [self._vecs[k] @ np.diag(c_rot[k][0]) @ self._vecs[k].T for k in range(len(m_rot))]
        )
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        w = resp[0] / resp[0].sum()
        return GaussianMixture(w, means, covs)

    def sample_posterior(self, x, t, rng: np.random.Generator):
        """One exact posterior draw per row of x."""
        x, single = _as_batch(x)
        logn, m_rot, c_rot, _, _ = self._parts(x, t)
        resp, _ = self._responsibilities(logn)
        u = rng.random(x.shape[0])
        comp = np.minimum((np.cumsum(resp, axis=1) < u[:, None]).sum(axis=1), resp.shape[1] - 1)
        eps = rng.standard_normal(x.shape)
        out = np.empty_like(x)
        for k in range(len(m_rot)):
            idx = comp == k
            rot = m_rot[k][idx] + np.sqrt(c_rot[k][idx]) * eps[idx]
            out[idx] = rot @ self._vecs[k].T
        return out[0] if single else out

    # -- value function -----------------------------------------------------

    def value_exact(self, x, t, reward, n_mc: int = 100_000, rng: np.random.Generator | None = None):
        """Exact value log E[exp r(z) | x_t = x] and its gradient in x.

        Closed form for rewards exposing ``quadratic_form()`` (linear and
        concave-enough quadratic); otherwise Monte Carlo over exact
        posterior draws with the gradient ``alpha/sigma^2 (E_tilted z - D)``.
        Returns ``(value, gradient)``; batched inputs give (n,) and (n, d).
        """
        x, single = _as_batch(x)
        form = getattr(reward, "quadratic_form", None)
        if form is None:
            value, grad = self._value_mc(x, t, reward, n_mc, rng)
        else:
            value, grad = self._value_quadratic(x, t, *form())
        return (value[0], grad[0]) if single else (value, grad)

    def _value_quadratic(self, x, t, A, b, c0):
        n, d = x.shape
        logn, m_rot, c_rot, a, s = self._parts(x, t)
        resp, _ = self._responsibilities(logn)
        log_resp = np.log(np.clip(resp, 1e-300, None))
        means = self._means(m_rot)
        logs, tilted = [], []
        for k, mk in enumerate(means):
            vk = self._vecs[k]
            root = np.sqrt(c_rot[k])  # (n, d)
            # B = C^{1/2} A C^{1/2} expressed in the eigenbasis of component k.
            a_rot = vk.T @ A @ vk
            B = root[:, :, None] * a_rot[None] * root[:, None, :]
            eig_b = np.linalg.eigvalsh(B)
            if np.any(eig_b >= 1.0 - 1e-12):
                raise RewardCurvatureError("quadratic reward makes the tilted posterior improper")
            inv = np.linalg.inv(np.eye(d)[None] - B)
            mrot = inv * root[:, :, None] * root[:, None, :]  # C^{1/2}(I-B)^{-1}C^{1/2} in rotated coords
            gk = mk @ A.T + b
            grot = gk @ vk
            mg_rot = np.einsum("nij,nj->ni", mrot, grot)
            logdet = np.sum(np.log1p(-eig_b), axis=1)
            f_m = 0.5 * np.einsum("ni,ij,nj->n", mk, A, mk) + mk @ b + c0
            logs.append(f_m + 0.5 * np.sum(grot * mg_rot, axis=1) - 0.5 * logdet)
            tilted.append(mk + mg_rot @ vk.T)
        ell = log_resp + np.stack(logs, axis=1)
        value = logsumexp(ell, axis=1)
        w = np.exp(ell - value[:, None])
        mean_tilt = sum(w[:, k : k + 1] * tilted[k] for k in range(len(tilted)))
        den = sum(resp[:, k : k + 1] * means[k] for k in range(len(means)))
        grad = (a / (s * s)) * (mean_tilt - den)
        return value, grad

    def _value_mc(self, x, t, reward, n_mc, rng):
        rng = np.random.default_rng(0) if rng is None else rng
        n, d = x.shape
        a, s = self._path(t, n)
        values = np.empty(n)
        grads = np.empty((n, d))
        for i in range(n):
            ti = np.asarray(t)[i] if np.ndim(t) else t
            xi = np.repeat(x[i : i + 1], n_mc, axis=0)
            z = self.sample_posterior(xi, ti, rng)
            r = reward.eval(z)
            values[i] = logsumexp(r) - np.log(n_mc)
            w = np.exp(r - logsumexp(r))
            ai = a if np.ndim(a) == 0 else a[i, 0]
            si = s if np.ndim(s) == 0 else s[i, 0]
            grads[i] = ai / si**2 * (w @ z - self.denoiser(x[i], ti))
        return values, grads
