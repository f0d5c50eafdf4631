"""Experiment configuration: JSON schema, defaults and object construction."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import jsonschema
from ..mixture import GaussianMixture, MixtureOracle
from ..reward import Reward, reward_from_dict
from ..sched import Scheduler
from .problems import TILT_C, two_mode_mixture

ALGORITHMS = ["oracle", "sample", "posterior", "ddpm-step", "value", "guide", "smc", "search", "bon", "distill", "report"]

_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ExperimentConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scheduler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["linear", "vp", "ve"]},
                "t_min": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.25},
            },
        },
        "mixture": {
            "type": "object",
            "additionalProperties": False,
            "required": ["weights", "means", "covs"],
            "properties": {
                "weights": _vec,
                "means": _mat,
                "covs": {"type": "array", "items": _mat, "minItems": 1},
            },
        },
        "reward": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["zero", "linear", "quadratic", "radial"]},
                "c": _vec,
                "A": _mat,
                "b": _vec,
                "c0": _num,
                "target": _vec,
                "scale": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "algorithm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ALGORITHMS},
                "params": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "n_samples": {"type": "integer", "minimum": 1},
                        "n_steps": {"type": "integer", "minimum": 1},
                        "inner_steps": {"type": "integer", "minimum": 1},
                        "particles": {"type": "integer", "minimum": 1},
                        "M": {"type": "integer", "minimum": 1},
                        "lam": {"type": "number", "exclusiveMinimum": 1},
                        "t_lo": _num,
                        "t_hi": _num,
                        "reward_scale": _num,
                        "t": _num,
                        "t_prime": _num,
                        "x_t": _vec,
                        "estimator": {"enum": ["posterior", "weighted", "denoiser", "exact"]},
                        "gradient": {"enum": ["estimator", "exact", "weighted"]},
                        "resample_mode": {"enum": ["per-step-reset", "literal-carry"]},
                        "systematic": {"type": "boolean"},
                        "seeds": {"type": "integer", "minimum": 1},
                        "n_hutchinson": {"type": "integer", "minimum": 1},
                        "n_iters": {"type": "integer", "minimum": 1},
                        "batch": {"type": "integer", "minimum": 1},
                        "lr": {"type": "number", "exclusiveMinimum": 0},
                        "width": {"type": "integer", "minimum": 1},
                        "map": {"type": "string"},
                        "budgets": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                        "sampler": {"enum": ["flowmap", "euler", "exact"]},
                        "figure": {"enum": ["fig2", "scatter"]},
                    },
                },
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
    },
}

DEFAULTS = {
    "scheduler": {"kind": "linear", "t_min": 1e-3},
    "reward": {"kind": "linear", "c": TILT_C.tolist()},
    "algorithm": {"name": "sample", "params": {}},
    "seed": 0,
    "output_dir": "out",
}


class ConfigError(ValueError):
    pass


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw


@dataclass
class ExperimentConfig:
    raw: dict
    scheduler: Scheduler
    mixture: GaussianMixture
    reward: Reward
    algorithm: str
    params: dict
    seed: int
    output_dir: str

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        validate(raw)
        cfg = copy.deepcopy(DEFAULTS)
        for key, val in raw.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(copy.deepcopy(val))
            else:
                cfg[key] = copy.deepcopy(val)
        cfg["algorithm"].setdefault("params", {})
        try:
            sched = Scheduler(cfg["scheduler"].get("kind", "linear"), cfg["scheduler"].get("t_min", 1e-3))
            if "mixture" in cfg:
                mix = GaussianMixture.from_dict(cfg["mixture"])
            else:
                mix = two_mode_mixture()
                cfg["mixture"] = mix.to_dict()
            reward = reward_from_dict(cfg["reward"], mix.dim)
            if getattr(reward, "dim", mix.dim) != mix.dim:
                raise ValueError("reward dimension does not match the mixture")
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(
            raw=cfg,
            scheduler=sched,
            mixture=mix,
            reward=reward,
            algorithm=cfg["algorithm"].get("name", "sample"),
            params=cfg["algorithm"]["params"],
            seed=int(cfg["seed"]),
            output_dir=cfg["output_dir"],
        )

    def oracle(self) -> MixtureOracle:
        return MixtureOracle(self.mixture, self.scheduler)

    def param(self, key, default):
        return self.params.get(key, default)
