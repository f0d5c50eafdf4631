"""End-to-end acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line (printed immediately and again in
the terminal summary) before asserting.
"""

import time

import numpy as np
import pytest

from diamond_maps import (
    GlassField,
    GuidanceConfig,
    LinearReward,
    MixtureOracle,
    OracleDiamondMap,
    OracleFlowMap,
    QuadraticReward,
    Scheduler,
    ddpm_reference_sample,
    denoiser_value,
    diamond_ddpm_step,
    guide_posterior,
    naive_renoise_step,
    posterior_value,
    posterior_value_gradient,
    smc,
    weighted_diamond_gradient,
    weighted_diamond_value,
    zero_reward,
)
from diamond_maps.align import best_of_n, flow_map_sampler, guide_weighted, weighted_guidance_nfe
from diamond_maps.bench.metrics import ks_test_1d, mean_var_check, sliced_w2
from diamond_maps.bench.problems import PARETO_C, TILT_C, gaussian, standard_normal_1d, two_mode_mixture
from diamond_maps.bench.runner import pareto_schedule
from diamond_maps.distill import DistilledDiamondMap, rollout_regression_train, teacher_dataset

from conftest import ACCEPTANCE_LINES


def record(n, ok, detail, started):
    line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}  ({time.time() - started:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def gm():
    return two_mode_mixture()


@pytest.fixture(scope="module")
def linear_sched():
    return Scheduler("linear")


def test_criterion_01_time_algebra():
    started = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for kind in ("linear", "vp"):
        sched = Scheduler(kind)
        a = rng.uniform(sched.t_min, sched.t_max, 1000)
        b = rng.uniform(sched.t_min, sched.t_max, 1000)
        t, tp = np.minimum(a, b), np.maximum(a, b)
        keep = tp - t > 1e-9
        t, tp = t[keep], tp[keep]
        worst = max(worst, float(np.max(np.abs(sched.t_star(sched.r_star(t, tp), t) - tp))))
    elapsed = time.time() - started
    record(1, worst <= 1e-10 and elapsed < 1.0, f"max |t*(r*(t,t'),t) - t'| = {worst:.2e} (<= 1e-10)", started)


def test_criterion_02_glass_posterior(gm):
    started = time.time()
    oracle = MixtureOracle(gm, Scheduler("linear"))
    glass = GlassField(oracle)
    x_t = np.array([0.2, 0.1])
    dists = {}
    for i, t in enumerate((0.2, 0.5, 0.8)):
        out = glass.sample_posterior_ode(x_t * t / 0.5, t, 32, 10 + i, n_samples=50_000)
        ref = oracle.posterior(x_t * t / 0.5, t).sample(50_000, np.random.default_rng(20 + i))
        dists[t] = sliced_w2(out, ref)
    worst = max(dists.values())
    text = ", ".join(f"t={t}: {d:.4f}" for t, d in dists.items())
    record(2, worst <= 0.03, f"GLASS endpoints vs exact posterior sliced-W2 [{text}] (<= 0.03)", started)


def test_criterion_03_diamond_ddpm_step():
    started = time.time()
    sched = Scheduler("linear")
    oracle = MixtureOracle(gaussian([0.5, -0.3], [[0.6, 0.15], [0.15, 0.4]]), sched)
    dm = OracleDiamondMap(oracle, 32)
    x_t = np.array([0.6, -0.2])
    ok, parts = True, []
    for i, (t, tp) in enumerate(((0.3, 0.5), (0.5, 0.7))):
        ours = diamond_ddpm_step(dm, x_t, t, tp, 100 + i, n_samples=100_000)
        ref = ddpm_reference_sample(oracle, x_t, t, tp, 200 + i, n_samples=100_000)
        zm, zv = mean_var_check(ours, ref)
        p = min(ks_test_1d(ours[:, j], ref[:, j]) for j in range(2))
        z_max = float(max(np.max(np.abs(zm)), np.max(np.abs(zv))))
        ok &= z_max <= 3.0 and p > 0.01
        parts.append(f"({t},{tp}): max|z|={z_max:.2f}, min KS p={p:.3f}")
    # chained early-stopped steps from noise to data
    ts = np.linspace(sched.t_min, 1.0, 9)
    x = np.random.default_rng(7).standard_normal((50_000, 2))
    rng = np.random.default_rng(8)
    for t, tp in zip(ts[:-1], ts[1:]):
        x = diamond_ddpm_step(dm, x, t, tp, rng)
    w2 = sliced_w2(x, oracle.mixture.sample(50_000, np.random.default_rng(9)))
    ok &= w2 <= 0.03
    parts.append(f"chained terminal sliced-W2={w2:.4f} (<= 0.03)")
    record(3, ok, "; ".join(parts), started)


def test_criterion_04_posterior_value(linear_sched):
    started = time.time()
    oracle = MixtureOracle(standard_normal_1d(), linear_sched)
    dm = OracleDiamondMap(oracle, 16)
    reward = LinearReward([1.0])
    x = np.array([1.0])
    exact_v, exact_g = oracle.value_exact(x, 0.5, reward)
    val = posterior_value(dm, x, 0.5, reward, 100_000, 1)
    tan = posterior_value_gradient(dm, x, 0.5, reward, 100_000, 2, "tangent-ode")
    fd = posterior_value_gradient(dm, x, 0.5, reward, 100_000, 2, "finite-difference", fd_step=1e-5)
    dv = abs(val.value - exact_v) / val.std_error
    # a linear reward on Gaussian data gives every particle the same pullback,
    # so the jackknife error collapses to roundoff; floor it at float64 noise
    dg = abs(tan.gradient[0] - exact_g[0]) / max(tan.grad_std_error[0], 1e-12)
    rel = abs(tan.gradient[0] - fd.gradient[0]) / abs(fd.gradient[0])
    ok = exact_v == pytest.approx(1.25) and dv <= 3 and dg <= 3 and rel <= 1e-3
    record(
        4,
        ok,
        f"V={val.value:.5f} vs 1.25 ({dv:.2f} se), grad={tan.gradient[0]:.5f} vs {exact_g[0]:.5f} ({dg:.2f} se), "
        f"tangent/FD rel err {rel:.1e}",
        started,
    )


def test_criterion_05_weighted_gradient(linear_sched):
    started = time.time()
    oracle = MixtureOracle(standard_normal_1d(), linear_sched)
    fm = OracleFlowMap(oracle, 16)
    x = np.array([1.0])
    _, exact_g = oracle.value_exact(x, 0.5, LinearReward([1.0]))
    ok, parts = True, []
    for reward, label, target in ((LinearReward([1.0]), "linear", exact_g[0]), (zero_reward(1), "zero", 0.0)):
        for lam in (4.0, 20.0):
            g = np.array(
                [weighted_diamond_gradient(fm, oracle.score, x, 0.5, lam, reward, 10_000, s).gradient[0] for s in range(32)]
            )
            se = g.std(ddof=1) / np.sqrt(g.size)
            z = abs(g.mean() - target) / se
            ok &= z <= 4
            parts.append(f"{label} lam={lam:g}: {g.mean():.4f} vs {target:.4f} ({z:.2f} se)")
    record(5, ok, "; ".join(parts), started)


def test_criterion_06_weighted_value(linear_sched):
    started = time.time()
    oracle = MixtureOracle(standard_normal_1d(), linear_sched)
    fm = OracleFlowMap(oracle, 16)
    x = np.array([1.0])
    est = weighted_diamond_value(
        fm, oracle.score, oracle.velocity_jacobian, x, 0.5, 4.0, LinearReward([1.0]), 10_000, 256, 3
    )
    d = est.details
    z_value = abs(est.value - 1.25) / est.std_error
    z_trace = abs(d["offset"] - d["offset_analytic_trace"]) / d["offset_std_error"]
    ok = z_value <= 4 and z_trace <= 3
    record(
        6,
        ok,
        f"V={est.value:.4f} vs 1.25 ({z_value:.2f} se); Hutchinson offset {d['offset']:.4f} vs analytic trace "
        f"{d['offset_analytic_trace']:.4f} ({z_trace:.2f} se)",
        started,
    )


def test_criterion_07_guidance(gm):
    started = time.time()
    oracle = MixtureOracle(gm, Scheduler("linear"))
    reward = LinearReward(TILT_C)
    full = GuidanceConfig(n_steps=100, t_lo=0.0, t_hi=1.0)
    exact = guide_posterior(oracle, None, reward, full, 0, n_samples=50_000, gradient="exact")
    target = gm.tilt_linear(np.array(TILT_C)).sample(50_000, np.random.default_rng(1))
    w_exact = sliced_w2(exact, target)
    # K-scan: distance to the exact-gradient run from the same initial noise
    dm = OracleDiamondMap(oracle, 4)
    scan = GuidanceConfig(n_steps=20, t_lo=0.0, t_hi=1.0)
    means = {}
    for K in (4, 16, 64):
        dists = []
        for s in range(5):
            x0 = np.random.default_rng(100 + s).standard_normal((1000, 2))
            ref = guide_posterior(oracle, None, reward, scan, s, gradient="exact", x_init=x0)
            cfg = GuidanceConfig(n_steps=20, particles=K, t_lo=0.0, t_hi=1.0)
            dists.append(sliced_w2(guide_posterior(oracle, dm, reward, cfg, s, x_init=x0), ref))
        means[K] = float(np.mean(dists))
    mono = means[4] > means[16] > means[64]
    text = ", ".join(f"K={k}: {v:.4f}" for k, v in means.items())
    record(7, w_exact <= 0.03 and mono, f"exact-gradient sliced-W2 {w_exact:.4f} (<= 0.03); K-scan [{text}] decreasing", started)


def test_criterion_08_smc(gm):
    started = time.time()
    oracle = MixtureOracle(gm, Scheduler("linear"))
    dm = OracleDiamondMap(oracle, 8)
    zero = smc(oracle, dm, zero_reward(2), 4096, 16, 64, rng_seed=0, systematic=True)
    w_zero = sliced_w2(zero, gm.sample(50_000, np.random.default_rng(2)))
    tilted = smc(oracle, dm, LinearReward(TILT_C), 4096, 16, 64, rng_seed=1, systematic=True)
    w_tilt = sliced_w2(tilted, gm.tilt_linear(np.array(TILT_C)).sample(50_000, np.random.default_rng(3)))
    ok = w_zero <= 0.05 and w_tilt <= 0.08
    record(8, ok, f"zero-reward sliced-W2 {w_zero:.4f} (<= 0.05); tilted {w_tilt:.4f} (<= 0.08)", started)


def test_criterion_09_jensen_gap(gm, linear_sched):
    started = time.time()
    oracle = MixtureOracle(gm, linear_sched)
    dm = OracleDiamondMap(oracle, 16)
    reward = QuadraticReward([[-0.8, 0.2], [0.2, -0.5]], [1.0, 0.6], 0.0)
    x = np.array([0.1, 0.05])
    exact, _ = oracle.value_exact(x, 0.5, reward)
    post = posterior_value(dm, x, 0.5, reward, 100_000, 4)
    den = denoiser_value(oracle, x, 0.5, reward)
    gap = abs(den.value - exact) / post.std_error
    err = abs(post.value - exact) / post.std_error
    record(
        9,
        gap > 5 and err <= 3,
        f"exact {exact:.4f}; denoiser {den.value:.4f} ({gap:.1f} se off, > 5); posterior {post.value:.4f} ({err:.2f} se, <= 3)",
        started,
    )


def test_criterion_10_distillation(gm):
    started = time.time()
    sched = Scheduler("linear")
    oracle = MixtureOracle(gm, sched)
    glass = GlassField(oracle)
    data = teacher_dataset(glass, 8192, 33, 4, 0)
    student = DistilledDiamondMap(sched, 2, rng_seed=0)
    rollout_regression_train(glass, student, 5000, dataset=data, rng_seed=0)
    # one-step posterior quality on held-out (x_t, t)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        t = rng.uniform(0.05, 0.95)
        z = gm.sample(1, rng)[0]
        x_t = sched.alpha(t) * z + sched.sigma(t) * rng.standard_normal(2)
        out = student.apply(rng.standard_normal((5000, 2)), 0.0, 1.0, x_t, t)
        worst = max(worst, sliced_w2(out, oracle.posterior(x_t, t).sample(5000, rng)))
    # chained sampling: early stop vs naive renoise
    ts = np.linspace(sched.t_min, 1.0, 9)
    ref = gm.sample(50_000, np.random.default_rng(77))
    wins, pairs = 0, []
    for seed in range(5):
        finals = []
        for step in (diamond_ddpm_step, naive_renoise_step):
            x = np.random.default_rng(seed).standard_normal((50_000, 2))
            srng = np.random.default_rng(1000 + seed)
            for t, tp in zip(ts[:-1], ts[1:]):
                x = step(student, x, t, tp, srng)
            finals.append(sliced_w2(x, ref))
        wins += finals[0] < finals[1]
        pairs.append(f"{finals[0]:.3f}/{finals[1]:.3f}")
    ok = worst <= 0.1 and wins >= 4
    record(
        10,
        ok,
        f"one-step max sliced-W2 {worst:.4f} (<= 0.1); early-stop beats naive in {wins}/5 [{', '.join(pairs)}]",
        started,
    )


def test_criterion_11_pareto(gm):
    started = time.time()
    oracle = MixtureOracle(gm, Scheduler("linear"))
    fm = OracleFlowMap(oracle, 16)
    reward = LinearReward(PARETO_C)
    sampler = flow_map_sampler(fm, 2)
    ok, parts = True, []
    for budget in (8, 16, 32, 64):
        n, k = pareto_schedule(budget)
        cfg = GuidanceConfig(n_steps=n, particles=k, lam=20.0, t_lo=0.05, t_hi=0.75)
        nfe = weighted_guidance_nfe(cfg)
        guided, bon = [], []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            guided.append(float(np.mean(reward.eval(guide_weighted(oracle, fm, reward, cfg, rng, 32)))))
            bon.append(float(np.mean([reward.eval(best_of_n(sampler, reward, budget, rng)) for _ in range(32)])))
        g, b = float(np.mean(guided)), float(np.mean(bon))
        ok &= g > b and nfe <= budget
        parts.append(f"{budget}: guided {g:.2f} (nfe {nfe}) vs BoN {b:.2f}")
    record(11, ok, "; ".join(parts), started)
