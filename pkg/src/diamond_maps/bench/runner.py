"""Experiment orchestration: dispatch a config to an algorithm and write the report."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .. import align
from ..distill import DistillationDivergenceError, DistilledDiamondMap, rollout_regression_train
from ..glass import GlassField
from ..maps import (
    OracleDiamondMap,
    OracleFlowMap,
    ddpm_reference_sample,
    diamond_ddpm_step,
    naive_renoise_step,
    r_star_surface,
)
from ..mixture import RewardCurvatureError
from ..reward import (
    LinearReward,
    denoiser_value,
    posterior_value_gradient,
    weighted_diamond_gradient,
    weighted_diamond_value,
)
from ..sched import ScheduleDomainError
from . import report
from .config import ConfigError, ExperimentConfig
from .metrics import ks_test_1d, sliced_w2

EXIT_OK, EXIT_CONFIG, EXIT_DOMAIN = 0, 2, 3
DOMAIN_ERRORS = (ScheduleDomainError, RewardCurvatureError, DistillationDivergenceError, FloatingPointError)


# -- atomic writers ----------------------------------------------------------------------


def write_atomic(path, data) -> None:
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def csv_text(samples, prefix="x") -> str:
    samples = np.atleast_2d(samples)
    lines = [",".join(f"{prefix}{j}" for j in range(samples.shape[1]))]
    lines += [",".join(f"{v:.17g}" for v in row) for row in samples]
    return "\n".join(lines) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def jsonl_text(rows) -> str:
    return "".join(json.dumps(_jsonable(r), sort_keys=True) + "\n" for r in rows)


# -- helpers -----------------------------------------------------------------------------


def _diamond_map(cfg: ExperimentConfig, oracle):
    choice = cfg.param("map", "oracle")
    if choice == "oracle":
        return OracleDiamondMap(oracle, cfg.param("inner_steps", 32))
    student = DistilledDiamondMap.load(choice)
    if student.dim != oracle.dim:
        raise ConfigError("checkpoint dimension does not match the mixture")
    return student


def _flow_map(cfg, oracle):
    return OracleFlowMap(oracle, cfg.param("inner_steps", 32))


def _target(cfg):
    """Law the algorithm should reproduce (tilted when the reward is linear)."""
    if isinstance(cfg.reward, LinearReward):
        return cfg.mixture.tilt_linear(cfg.reward.c)
    return cfg.mixture


def _x_t(cfg, oracle):
    if "x_t" in cfg.params:
        x = np.asarray(cfg.params["x_t"], dtype=float)
        if x.shape != (oracle.dim,):
            raise ConfigError("x_t has the wrong dimension")
        return x
    return np.full(oracle.dim, 0.5)


def _guidance_cfg(cfg, **defaults):
    keys = ("n_steps", "particles", "lam", "t_lo", "t_hi", "reward_scale")
    vals = {k: cfg.params[k] for k in keys if k in cfg.params}
    for k, v in defaults.items():
        vals.setdefault(k, v)
    try:
        return align.GuidanceConfig(**vals)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- algorithms: each returns (samples, metric rows, figure spec, extra files) ---------------


def _run_oracle(cfg, oracle, rng):
    z = cfg.mixture.sample(cfg.param("n_samples", 5000), rng)
    rows = [{"metric": "mean", "exact": cfg.mixture.mean(), "empirical": z.mean(0)}]
    rows.append({"metric": "covariance", "exact": cfg.mixture.covariance(), "empirical": np.cov(z.T)})
    return z, rows, ("scatter", cfg.mixture.log_pdf, "exact mixture samples"), {}


def _run_sample(cfg, oracle, rng):
    n = cfg.param("n_samples", 5000)
    kind = cfg.param("sampler", "flowmap")
    if kind == "flowmap":
        z = align.flow_map_sampler(_flow_map(cfg, oracle), oracle.dim)(n, rng)
    elif kind == "euler":
        z = align.unguided_euler(oracle, cfg.param("n_steps", 100), rng, n)
    else:
        z = cfg.mixture.sample(n, rng)
    ref = cfg.mixture.sample(max(n, 2), rng)
    rows = [{"metric": "sliced_w2_vs_data", "value": sliced_w2(z, ref, rng_seed=cfg.seed), "n": n, "sampler": kind}]
    rows.append({"metric": "mean_reward", "value": float(np.mean(cfg.reward.eval(z)))})
    return z, rows, ("scatter", cfg.mixture.log_pdf, f"unguided samples ({kind})"), {}


def _run_posterior(cfg, oracle, rng):
    x_t, t = _x_t(cfg, oracle), cfg.param("t", 0.5)
    n = cfg.param("n_samples", 5000)
    dmap = _diamond_map(cfg, oracle)
    z = dmap.apply(rng.standard_normal((n, oracle.dim)), 0.0, 1.0, x_t, t)
    post = oracle.posterior(x_t, t)
    ref = post.sample(n, rng)
    rows = [{"metric": "sliced_w2_vs_posterior", "value": sliced_w2(z, ref, rng_seed=cfg.seed), "t": t, "x_t": x_t}]
    return z, rows, ("scatter", post.log_pdf, f"posterior samples at t={t:g}"), {}


def _run_ddpm_step(cfg, oracle, rng):
    x_t, t = _x_t(cfg, oracle), cfg.param("t", 0.3)
    t_prime = cfg.param("t_prime", 0.5)
    n = cfg.param("n_samples", 20000)
    dmap = _diamond_map(cfg, oracle)
    seeds = rng.integers(2**63, size=3)
    kernels = {
        "diamond": diamond_ddpm_step(dmap, x_t, t, t_prime, int(seeds[0]), n),
        "naive": naive_renoise_step(dmap, x_t, t, t_prime, int(seeds[1]), n),
        "reference": ddpm_reference_sample(oracle, x_t, t, t_prime, int(seeds[2]), n),
    }
    ref = kernels["reference"]
    summary = {"t": t, "t_prime": t_prime, "x_t": x_t, "n": n, "kernels": {}}
    rows = []
    for name, s in kernels.items():
        entry = {"mean": s.mean(0), "var": s.var(0, ddof=1)}
        if name != "reference":
            entry["ks_pvalue_vs_reference"] = [ks_test_1d(s[:, j], ref[:, j]) for j in range(s.shape[1])]
        summary["kernels"][name] = entry
        rows.append({"kernel": name, **entry})
    extra = {f"samples_{k}.csv": csv_text(v) for k, v in kernels.items()}
    extra["ddpm_report.json"] = json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n"
    return kernels["diamond"], rows, ("scatter", None, f"diamond DDPM step {t:g} to {t_prime:g}"), extra


def _run_value(cfg, oracle, rng):
    x_t, t = _x_t(cfg, oracle), cfg.param("t", 0.5)
    est = cfg.param("estimator", "posterior")
    K = cfg.param("particles", 1000)
    lam = cfg.param("lam", 4.0)
    rows = []
    exact_v, exact_g = oracle.value_exact(x_t, t, cfg.reward, rng=rng)
    for k in range(cfg.param("seeds", 1)):
        seed = int(rng.integers(2**63))
        if est == "exact":
            row = {"value": exact_v, "grad": exact_g, "ess": 1.0, "K": 0, "stderr": 0.0}
        elif est == "denoiser":
            row = denoiser_value(oracle, x_t, t, cfg.reward).to_dict()
        elif est == "posterior":
            dmap = _diamond_map(cfg, oracle)
            row = posterior_value_gradient(dmap, x_t, t, cfg.reward, K, seed).to_dict()
        else:
            fmap = _flow_map(cfg, oracle)
            g = weighted_diamond_gradient(fmap, oracle.score, x_t, t, lam, cfg.reward, K, seed)
            v = weighted_diamond_value(
                fmap, oracle.score, oracle.velocity_jacobian, x_t, t, lam, cfg.reward, K, cfg.param("n_hutchinson", 16), seed
            )
            row = v.to_dict()
            row["grad"] = g.gradient.tolist()
        row.update({"estimator": est, "seed_index": k, "exact_value": exact_v, "exact_grad": exact_g})
        rows.append(row)
    dmap = _diamond_map(cfg, oracle)
    z = dmap.apply(rng.standard_normal((min(K, 5000) if K else 1000, oracle.dim)), 0.0, 1.0, x_t, t)
    return z, rows, ("scatter", oracle.posterior(x_t, t).log_pdf, f"posterior draws behind the value at t={t:g}"), {}


def _run_guide(cfg, oracle, rng):
    mode = cfg.param("gradient", "estimator")
    n = cfg.param("n_samples", 1000)
    if mode == "weighted":
        gcfg = _guidance_cfg(cfg)
        z = align.guide_weighted(oracle, _flow_map(cfg, oracle), cfg.reward, gcfg, rng, n)
        nfe = align.weighted_guidance_nfe(gcfg)
    else:
        gcfg = _guidance_cfg(cfg, t_lo=0.0, t_hi=1.0)
        dmap = _diamond_map(cfg, oracle) if mode == "estimator" else None
        z = align.guide_posterior(oracle, dmap, cfg.reward, gcfg, rng, n, gradient=mode)
        nfe = None
    target = _target(cfg)
    rows = [
        {"metric": "mean_reward", "value": float(np.mean(cfg.reward.eval(z))), "gradient": mode, "nfe": nfe},
        {"metric": "sliced_w2_vs_target", "value": sliced_w2(z, target.sample(max(n, 2), rng), rng_seed=cfg.seed)},
    ]
    return z, rows, ("scatter", target.log_pdf, f"guided samples ({mode})"), {}


def _run_smc(cfg, oracle, rng):
    ens = align.smc(
        oracle,
        _diamond_map(cfg, oracle),
        cfg.reward,
        cfg.param("M", 1024),
        cfg.param("n_steps", 16),
        cfg.param("particles", 16),
        cfg.param("resample_mode", "per-step-reset"),
        rng,
        systematic=cfg.param("systematic", False),
        return_ensemble=True,
    )
    rows = [
        {"t": h["t"], "ess": h["ess"], "resampled": h["resampled"], "mean_value": h["mean_value"]} for h in ens.history
    ]
    target = _target(cfg)
    rows.append(
        {
            "metric": "sliced_w2_vs_target",
            "value": sliced_w2(ens.states, target.sample(max(ens.size, 2), rng), rng_seed=cfg.seed),
            "mean_reward": float(np.mean(cfg.reward.eval(ens.states))),
        }
    )
    return ens.states, rows, ("scatter", target.log_pdf, "SMC terminal particles"), {}


def _run_search(cfg, oracle, rng):
    dmap = _diamond_map(cfg, oracle)
    picks, rows = [], []
    for k in range(cfg.param("seeds", 8)):
        z = align.search(oracle, dmap, cfg.reward, cfg.param("M", 8), cfg.param("n_steps", 8), cfg.param("particles", 16), rng)
        picks.append(z)
        rows.append({"seed_index": k, "reward": float(cfg.reward.eval(z))})
    picks = np.array(picks)
    return picks, rows, ("scatter", _target(cfg).log_pdf, "search terminal states"), {}


def pareto_schedule(budget: int):
    """(guidance steps, particles) with 2 + n (K + 1) <= budget."""
    table = {8: (1, 5), 16: (2, 6), 32: (5, 5), 64: (10, 5)}
    if budget in table:
        return table[budget]
    n = max(1, (budget - 2) // 6)
    return n, max(1, (budget - 2) // n - 1)


def _run_bon(cfg, oracle, rng):
    fmap = _flow_map(cfg, oracle)
    sampler = align.flow_map_sampler(fmap, oracle.dim)
    budgets = cfg.param("budgets", [8, 16, 32, 64])
    seeds = cfg.param("seeds", 20)
    per_seed = cfg.param("n_samples", 32)
    rows, bon_curve, guided_curve = [], [], []
    picks = None
    for b in budgets:
        bon = [
            float(cfg.reward.eval(align.best_of_n(sampler, cfg.reward, b, rng))) for _ in range(seeds * per_seed)
        ]
        n, k = pareto_schedule(b)
        gcfg = _guidance_cfg(cfg, n_steps=n, particles=k, t_lo=0.05, t_hi=0.75)
        gcfg.n_steps, gcfg.particles = n, k
        guided = []
        for _ in range(seeds):
            z = align.guide_weighted(oracle, fmap, cfg.reward, gcfg, rng, per_seed)
            guided.append(float(np.mean(cfg.reward.eval(z))))
        rows.append(
            {
                "budget": b,
                "bon_mean_reward": float(np.mean(bon)),
                "guided_mean_reward": float(np.mean(guided)),
                "guided_nfe": align.weighted_guidance_nfe(gcfg),
                "guided_steps": n,
                "guided_particles": k,
            }
        )
        bon_curve.append(float(np.mean(bon)))
        guided_curve.append(float(np.mean(guided)))
        picks = np.array([align.best_of_n(sampler, cfg.reward, b, rng) for _ in range(per_seed)])
    curves = {"Best-of-N": (budgets, bon_curve), "weighted guidance": (budgets, guided_curve)}
    return picks, rows, ("pareto", curves), {}


def _run_distill(cfg, oracle, rng, out: Path):
    student = DistilledDiamondMap(cfg.scheduler, oracle.dim, width=cfg.param("width", 128), rng_seed=int(rng.integers(2**31)))
    student, log = rollout_regression_train(
        GlassField(oracle),
        student,
        cfg.param("n_iters", 2000),
        cfg.param("batch", 256),
        cfg.param("lr", 1e-3),
        rng,
    )
    student.save(out / "student.bin")
    x_t, t = _x_t(cfg, oracle), cfg.param("t", 0.5)
    n = cfg.param("n_samples", 5000)
    z = student.apply(rng.standard_normal((n, oracle.dim)), 0.0, 1.0, x_t, t)
    post = oracle.posterior(x_t, t)
    rows = [{"window": i, "loss": v} for i, v in enumerate(log)]
    rows.append({"metric": "one_step_sliced_w2", "value": sliced_w2(z, post.sample(n, rng), rng_seed=cfg.seed), "t": t})
    return z, rows, ("scatter", post.log_pdf, f"distilled one-step posterior at t={t:g}"), {}


def _run_report(cfg, oracle, rng):
    sched = cfg.scheduler
    grid = np.linspace(sched.t_min, sched.t_max, 60)
    grid_tp = np.concatenate([grid[1:], [1.0]])
    surf = r_star_surface(sched, grid, grid_tp)
    rows = [
        {"metric": "r_star_at_t_prime_1", "min": float(np.nanmin(surf[:-1, -1])), "max": float(np.nanmax(surf[:-1, -1]))},
        {"metric": "r_star_near_diagonal_max", "value": float(np.nanmax(np.diagonal(surf)[:-1]))},
    ]
    table = np.column_stack([np.repeat(grid, grid_tp.size), np.tile(grid_tp, grid.size), surf.ravel()])
    extra = {"rstar_surface.csv": "t,t_prime,r_star\n" + "".join(f"{a:.17g},{b:.17g},{c:.17g}\n" for a, b, c in table)}
    return None, rows, ("rstar", grid, grid_tp, surf), extra


RUNNERS = {
    "oracle": _run_oracle,
    "sample": _run_sample,
    "posterior": _run_posterior,
    "ddpm-step": _run_ddpm_step,
    "value": _run_value,
    "guide": _run_guide,
    "smc": _run_smc,
    "search": _run_search,
    "bon": _run_bon,
    "report": _run_report,
}


def run_experiment(cfg, out_dir=None) -> Path:
    """Run one configured experiment and write its report directory.

    Raises ``ConfigError`` for invalid configurations and the domain errors
    in ``DOMAIN_ERRORS`` for numerical failures; ``main`` maps them to exit
    codes 2 and 3.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.from_dict(cfg)
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    oracle = cfg.oracle()
    rng = np.random.default_rng(cfg.seed)
    if cfg.algorithm == "distill":
        samples, rows, fig, extra = _run_distill(cfg, oracle, rng, out)
    else:
        samples, rows, fig, extra = RUNNERS[cfg.algorithm](cfg, oracle, rng)
    if samples is not None:
        write_atomic(out / "samples.csv", csv_text(samples))
    write_atomic(out / "metrics.jsonl", jsonl_text(rows))
    write_atomic(out / "config-echo.json", json.dumps(_jsonable(cfg.raw), indent=2, sort_keys=True) + "\n")
    for name, text in extra.items():
        write_atomic(out / name, text)
    if fig[0] == "scatter":
        report.scatter_with_contours(out / "report.svg", samples, fig[1], fig[2])
    elif fig[0] == "pareto":
        report.reward_vs_nfe(out / "report.svg", fig[1])
    else:
        report.rstar_heatmap(out / "report.svg", fig[1], fig[2], fig[3])
    return out
