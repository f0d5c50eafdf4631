"""Stochastic flow maps for reward alignment on Gaussian-mixture targets."""

import os as _os

# Cap BLAS threads before numpy loads.
_threads = _os.environ.get("DIAMOND_BENCH_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .sched import Scheduler, ScheduleDomainError
from .mixture import GaussianMixture, MixtureOracle, RewardCurvatureError
from .glass import GlassField, fusion_coeffs, sufficient_statistic
from .maps import (
    FlowMap,
    OracleDiamondMap,
    OracleFlowMap,
    PosteriorDiamondMap,
    ddpm_reference_sample,
    diamond_ddpm_step,
    naive_renoise_step,
    r_star_surface,
    renoise,
)
from .reward import (
    LinearReward,
    QuadraticReward,
    RadialReward,
    ValueEstimate,
    denoiser_value,
    ess,
    posterior_value,
    posterior_value_gradient,
    weighted_diamond_gradient,
    weighted_diamond_value,
    zero_reward,
)
from .align import GuidanceConfig, ParticleEnsemble, best_of_n, guide_posterior, guide_weighted, search, smc

__version__ = "0.1.0"
