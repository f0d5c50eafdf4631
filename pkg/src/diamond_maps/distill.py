"""Distilling the GLASS flow into a small trainable diamond map.

The student is a tanh MLP predicting an average velocity v_{s,r}; the map is
X_{s,r} = x_bar + (r - s) v, so X_{s,s} = x_bar holds by construction.
Reverse-mode gradients and forward-mode tangents are hand-written; the
default trainer regresses the student onto teacher ODE rollouts.  The
student is posterior-only: its inputs are (x_bar, x_t, s, r - s, t) with no
separate target-time argument.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .glass import GlassField
from .maps import PosteriorDiamondMap
from .ode import rk4
from .sched import Scheduler

MAGIC = b"DIAMONDMAP\x00\x00"
VERSION = 1
_KINDS = ("linear", "vp", "ve")


class DistillationDivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# -- network -----------------------------------------------------------------------


def time_embedding(tau, n_freq: int):
    """[tau, sin(pi k tau), cos(pi k tau)] for k = 1..n_freq, and d/dtau."""
    tau = np.asarray(tau, dtype=float)[:, None]
    k = np.pi * np.arange(1, n_freq + 1)[None, :]
    emb = np.concatenate([tau, np.sin(k * tau), np.cos(k * tau)], axis=1)
    demb = np.concatenate([np.ones_like(tau), k * np.cos(k * tau), -k * np.sin(k * tau)], axis=1)
    return emb, demb


class SmallNet:
    """tanh MLP on a flat parameter vector with manual backprop and JVPs."""

    def __init__(self, in_dim: int, out_dim: int, width: int = 128, depth: int = 3, rng_seed=0):
        self.in_dim, self.out_dim, self.width, self.depth = in_dim, out_dim, width, depth
        self.shapes = []
        sizes = [in_dim] + [width] * depth + [out_dim]
        for a, b in zip(sizes[:-1], sizes[1:]):
            self.shapes.append(((a, b), (b,)))
        self.n_params = sum(a * b + b for (a, b), _ in self.shapes)
        rng = np.random.default_rng(rng_seed)
        theta = []
        for i, ((a, b), _) in enumerate(self.shapes):
            gain = 1.0 if i < depth else 0.1
            theta.append((gain * rng.standard_normal((a, b)) / np.sqrt(a)).ravel())
            theta.append(np.zeros(b))
        self.theta = np.concatenate(theta)

    def layers(self, theta=None):
        theta = self.theta if theta is None else theta
        out, i = [], 0
        for (a, b), _ in self.shapes:
            w = theta[i : i + a * b].reshape(a, b)
            i += a * b
            out.append((w, theta[i : i + b]))
            i += b
        return out

    def forward(self, feats, keep=False):
        h = feats
        acts = [h]
        layers = self.layers()
        for w, b in layers[:-1]:
            h = np.tanh(h @ w + b)
            acts.append(h)
        w, b = layers[-1]
        out = h @ w + b
        return (out, acts) if keep else out

    def backward(self, acts, g_out):
        """Parameter gradient of sum(g_out * out) given cached activations."""
        layers = self.layers()
        grads = [None] * (2 * len(layers))
        g = g_out
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            h_in = acts[i]
            grads[2 * i] = (h_in.T @ g).ravel()
            grads[2 * i + 1] = g.sum(axis=0)
            if i:
                g = (g @ w.T) * (1.0 - h_in * h_in)
        return np.concatenate(grads)

    def jvp(self, feats, dfeats):
        """Output and its directional derivative along input tangents ``dfeats``."""
        h, dh = feats, dfeats
        layers = self.layers()
        for w, b in layers[:-1]:
            h = np.tanh(h @ w + b)
            dh = (1.0 - h * h) * (dh @ w)
        w, b = layers[-1]
        return h @ w + b, dh @ w

    def copy(self) -> "SmallNet":
        other = SmallNet.__new__(SmallNet)
        other.__dict__.update(self.__dict__)
        other.shapes = list(self.shapes)
        other.theta = self.theta.copy()
        return other


class Adam:
    """First-order optimizer with per-parameter second-moment scaling."""

    def __init__(self, n: int, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0

    def step(self, theta, grad, lr=None):
        lr = self.lr if lr is None else lr
        self.k += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.k)
        vhat = self.v / (1 - self.beta2**self.k)
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base: float, k: int, n: int, floor: float = 0.0) -> float:
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * k / max(n, 1)))


# -- distilled diamond map -------------------------------------------------------------


class DistilledDiamondMap(PosteriorDiamondMap):
    """Student posterior map X_{s,r}(x_bar | x_t, t) = x_bar + (r - s) v_theta."""

    def __init__(self, scheduler: Scheduler, dim: int, width: int = 128, depth: int = 3, n_freq: int = 4, rng_seed=0):
        self.scheduler = scheduler
        self.dim = dim
        self.n_freq = n_freq
        in_dim = 2 * dim + 3 * (2 * n_freq + 1)
        self.net = SmallNet(in_dim, dim, width, depth, rng_seed)

    def _features(self, x_bar, x_t, s, r, t, ds=None, dr=None, dx_bar=None, dx_t=None):
        n = x_bar.shape[0]
        s = np.broadcast_to(np.asarray(s, dtype=float), (n,))
        r = np.broadcast_to(np.asarray(r, dtype=float), (n,))
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        es, des = time_embedding(s, self.n_freq)
        eh, deh = time_embedding(r - s, self.n_freq)
        et, _ = time_embedding(t, self.n_freq)
        feats = np.concatenate([x_bar, x_t, es, eh, et], axis=1)
        if ds is None and dr is None and dx_bar is None and dx_t is None:
            return feats, None
        ds = np.zeros(n) if ds is None else np.broadcast_to(np.asarray(ds, dtype=float), (n,))
        dr = np.zeros(n) if dr is None else np.broadcast_to(np.asarray(dr, dtype=float), (n,))
        zeros = np.zeros_like(x_bar)
        dfeats = np.concatenate(
            [
                zeros if dx_bar is None else dx_bar,
                zeros if dx_t is None else dx_t,
                des * ds[:, None],
                deh * (dr - ds)[:, None],
                np.zeros_like(et),
            ],
            axis=1,
        )
        return feats, dfeats

    @staticmethod
    def _prep(x_bar, x_t):
        x_bar = np.atleast_2d(np.asarray(x_bar, dtype=float))
        x_t = np.broadcast_to(np.asarray(x_t, dtype=float), x_bar.shape)
        return x_bar, x_t

    @staticmethod
    def _col(v, n):
        return np.broadcast_to(np.asarray(v, dtype=float), (n,))[:, None]

    def average_velocity(self, x_bar, s, r, x_t, t):
        x_bar, x_t = self._prep(x_bar, x_t)
        return self.net.forward(self._features(x_bar, x_t, s, r, t)[0])

    def apply(self, x_bar, s, r, x_t, t):
        x_bar, x_t = self._prep(x_bar, x_t)
        v = self.net.forward(self._features(x_bar, x_t, s, r, t)[0])
        h = self._col(r, len(x_bar)) - self._col(s, len(x_bar))
        return x_bar + h * v

    def tangent(self, x_bar, s, r, x_t, t, ds=0.0, dr=0.0, dx_bar=None, dx_t=None):
        """Endpoint and its directional derivative (forward mode)."""
        x_bar, x_t = self._prep(x_bar, x_t)
        n = len(x_bar)
        feats, dfeats = self._features(x_bar, x_t, s, r, t, ds, dr, dx_bar, dx_t)
        v, dv = self.net.jvp(feats, dfeats)
        h = self._col(r, n) - self._col(s, n)
        dh = self._col(dr, n) - self._col(ds, n)
        dx = (0.0 if dx_bar is None else dx_bar) + dh * v + h * dv
        return x_bar + h * v, dx

    def apply_with_jacobian(self, x_bar, s, r, x_t, t):
        """Endpoint and d endpoint / d x_t via one tangent per coordinate."""
        x_bar, x_t = self._prep(x_bar, x_t)
        n, d = x_bar.shape
        jac = np.empty((n, d, d))
        out = None
        for j in range(d):
            e = np.zeros((n, d))
            e[:, j] = 1.0
            out, col = self.tangent(x_bar, s, r, x_t, t, dx_t=e)
            jac[:, :, j] = col
        return out, jac

    # checkpointing

    def save(self, path) -> None:
        header = struct.pack("<12sI", MAGIC, VERSION)
        arch = struct.pack(
            "<6I", self.dim, self.net.width, self.net.depth, self.n_freq, _KINDS.index(self.scheduler.kind), self.net.n_params
        )
        body = struct.pack("<d", self.scheduler.t_min) + self.net.theta.astype("<f8").tobytes()
        path = os.fspath(path)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + arch + body)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "DistilledDiamondMap":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < 48:
            raise CheckpointError("checkpoint too short")
        magic, version = struct.unpack_from("<12sI", raw, 0)
        if magic != MAGIC:
            raise CheckpointError("not a diamond-map checkpoint")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        dim, width, depth, n_freq, kind, n_params = struct.unpack_from("<6I", raw, 16)
        if kind >= len(_KINDS):
            raise CheckpointError("unknown schedule code")
        (t_min,) = struct.unpack_from("<d", raw, 40)
        theta = np.frombuffer(raw, dtype="<f8", offset=48)
        obj = cls(Scheduler(_KINDS[kind], t_min), dim, width, depth, n_freq)
        if theta.size != n_params or n_params != obj.net.n_params:
            raise CheckpointError("parameter count does not match the architecture header")
        obj.net.theta = theta.astype(float)
        return obj


# -- teacher data -------------------------------------------------------------------------


@dataclass
class DistillBatch:
    x_bar: np.ndarray
    x_t: np.ndarray
    s: np.ndarray
    r: np.ndarray
    t: np.ndarray
    target: np.ndarray | None = None


@dataclass
class TrajectoryDataset:
    """Teacher GLASS trajectories on a shared inner-time grid.

    ``states[i, k]`` is trajectory i at inner time ``times[k]``; the first
    node is labelled 0 (noise) and the last 1 (data).
    """

    states: np.ndarray
    x_t: np.ndarray
    t: np.ndarray
    times: np.ndarray

    def sample(self, batch: int, rng) -> DistillBatch:
        n, k = self.states.shape[:2]
        i = rng.integers(n, size=batch)
        a = rng.integers(k, size=batch)
        b = rng.integers(k, size=batch)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return DistillBatch(
            x_bar=self.states[i, lo],
            x_t=self.x_t[i],
            s=self.times[lo],
            r=self.times[hi],
            t=self.t[i],
            target=self.states[i, hi],
        )


def teacher_dataset(glass: GlassField, n_traj: int, n_nodes: int = 33, substeps: int = 4, rng_seed=0) -> TrajectoryDataset:
    """Roll out the teacher ODE from noise for random (z, t, x_t) draws."""
    sched = glass.scheduler
    oracle = glass.oracle
    rng = np.random.default_rng(rng_seed)
    z = oracle.mixture.sample(n_traj, rng)
    t = rng.uniform(sched.t_min, sched.t_max, n_traj)
    x_t = sched.alpha(t)[:, None] * z + sched.sigma(t)[:, None] * rng.standard_normal(z.shape)
    grid = np.linspace(glass.s_min, sched.t_max, n_nodes - 1)
    y = rng.standard_normal(z.shape)
    states = [y]
    for a, b in zip(grid[:-1], grid[1:]):
        nodes = np.linspace(a, b, substeps + 1)
        y = rk4(lambda yy, s: glass.velocity(yy, x_t, s, t), y, nodes)
        states.append(y)
    y = y + (1.0 - grid[-1]) * glass.velocity(y, x_t, grid[-1], t)
    states.append(y)
    times = np.concatenate([[0.0], grid[1:], [1.0]])
    return TrajectoryDataset(np.stack(states, axis=1), x_t, t, times)


# -- training --------------------------------------------------------------------------


def regression_loss_and_grad(student: DistilledDiamondMap, batch: DistillBatch):
    x_bar, x_t = batch.x_bar, batch.x_t
    feats, _ = student._features(x_bar, x_t, batch.s, batch.r, batch.t)
    v, acts = student.net.forward(feats, keep=True)
    h = (batch.r - batch.s)[:, None]
    resid = x_bar + h * v - batch.target
    n = len(x_bar)
    loss = float(np.sum(resid * resid) / n)
    grad = student.net.backward(acts, 2.0 * h * resid / n)
    return loss, grad


def rollout_regression_train(
    glass: GlassField,
    student: DistilledDiamondMap,
    n_iters: int,
    batch: int = 256,
    lr: float = 1e-3,
    rng_seed=0,
    dataset: TrajectoryDataset | None = None,
    n_traj: int = 8192,
    log_every: int = 100,
    schedule: str = "cosine",
):
    """Fit the student to teacher rollouts; returns (student, loss log).

    The loss log holds the mean loss of every ``log_every`` iterations.
    """
    rng = np.random.default_rng(rng_seed)
    if dataset is None:
        dataset = teacher_dataset(glass, n_traj, rng_seed=rng.integers(2**63))
    opt = Adam(student.net.n_params, lr)
    log, window = [], []
    first = None
    ema = None
    for k in range(n_iters):
        loss, grad = regression_loss_and_grad(student, dataset.sample(batch, rng))
        if not np.isfinite(loss):
            raise DistillationDivergenceError(f"non-finite loss at iteration {k}")
        first = loss if first is None else first
        ema = loss if ema is None else 0.9 * ema + 0.1 * loss
        if ema > 10.0 * first:
            raise DistillationDivergenceError(f"loss {ema:.3g} exceeds 10x its initial value {first:.3g}")
        step = cosine_lr(lr, k, n_iters) if schedule == "cosine" else lr
        student.net.theta = opt.step(student.net.theta, grad, step)
        window.append(loss)
        if len(window) == log_every:
            log.append(float(np.mean(window)))
            window = []
    if window:
        log.append(float(np.mean(window)))
    student.train_log = log
    return student, log


# -- loss evaluators -------------------------------------------------------------------------


def _apply_rows(map, x_bar, s, r, x_t, t):
    """Row-by-row apply for maps that only take scalar times."""
    n = len(x_bar)
    s, r, t = (np.broadcast_to(np.asarray(v, dtype=float), (n,)) for v in (s, r, t))
    return np.concatenate(
        [map.apply(x_bar[i : i + 1], float(s[i]), float(r[i]), x_t[i], float(t[i])) for i in range(n)]
    )


def _fd_r(map, b: DistillBatch, h):
    r = np.broadcast_to(np.asarray(b.r, dtype=float), (len(b.x_bar),))
    s = np.broadcast_to(np.asarray(b.s, dtype=float), r.shape)
    x0 = _apply_rows(map, b.x_bar, s, r, b.x_t, b.t)
    plus = _apply_rows(map, b.x_bar, s, r + h, b.x_t, b.t)
    back = (r - h) >= s
    minus = _apply_rows(map, b.x_bar, s, np.where(back, r - h, r), b.x_t, b.t)
    plus2 = _apply_rows(map, b.x_bar, s, r + 2 * h, b.x_t, b.t)
    central = (plus - minus) / (2 * h)
    forward = (-3 * x0 + 4 * plus - plus2) / (2 * h)
    return x0, np.where(back[:, None], central, forward)


def lagrangian_loss_eval(student: PosteriorDiamondMap, teacher_field: GlassField, batch: DistillBatch, fd_step: float = 1e-4) -> float:
    """Mean |d_r X_{s,r} - u_r(X_{s,r} | x_t, t)|^2 over the batch.

    Distilled students use a forward-mode tangent in r; other maps fall back
    to finite differences in r.
    """
    if isinstance(student, DistilledDiamondMap):
        x, dx = student.tangent(batch.x_bar, batch.s, batch.r, batch.x_t, batch.t, dr=1.0)
    else:
        x, dx = _fd_r(student, batch, fd_step)
    u = teacher_field.velocity(x, batch.x_t, batch.r, batch.t)
    return float(np.mean(np.sum((dx - u) ** 2, axis=1)))


def eulerian_loss_eval(
    student: PosteriorDiamondMap, teacher_field: GlassField, batch: DistillBatch, n_jvp_probes: int = 1, fd_step: float = 1e-4
) -> float:
    """Mean |d_s X_{s,r} + (dX/dx_bar) u_s(x_bar)|^2 over the batch.

    The combined derivative is one directional derivative along (1, u_s) in
    (s, x_bar); ``n_jvp_probes`` is accepted for interface symmetry only.
    """
    v = teacher_field.velocity(batch.x_bar, batch.x_t, batch.s, batch.t)
    if isinstance(student, DistilledDiamondMap):
        _, dx = student.tangent(batch.x_bar, batch.s, batch.r, batch.x_t, batch.t, ds=1.0, dx_bar=v)
    else:
        n = len(batch.x_bar)
        s = np.broadcast_to(np.asarray(batch.s, dtype=float), (n,))
        r = np.broadcast_to(np.asarray(batch.r, dtype=float), (n,))
        s_lo = np.maximum(s - fd_step, 0.0)
        s_hi = np.minimum(s + fd_step, r)
        plus = _apply_rows(student, batch.x_bar + (s_hi - s)[:, None] * v, s_hi, r, batch.x_t, batch.t)
        minus = _apply_rows(student, batch.x_bar + (s_lo - s)[:, None] * v, s_lo, r, batch.x_t, batch.t)
        dx = (plus - minus) / (s_hi - s_lo)[:, None]
    return float(np.mean(np.sum(dx**2, axis=1)))
