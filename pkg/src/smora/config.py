"""Run configuration files: JSON with nested sections, strict key checking.

Every field has a default below; unknown keys are rejected so typos fail fast.
The single top-level seed fans out into named child streams (suite, init,
batches, ...), letting any component vary independently of the others.
"""

from __future__ import annotations

import copy
import json

from .training import TaskGenSpec, TrainConfig, gen_multitask_data
from .numerics import child_rng

__all__ = ["ConfigError", "DEFAULTS", "load_config", "suite_from_config", "train_config_from"]

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "out_dir": "out",
    "data": {
        "tasks": 8,
        "d_in": 32,
        "d_out": 32,
        "teacher_rank": 6,
        "shared_fraction": 0.25,
        "noise_std": 0.02,
        "train_per_task": 256,
        "eval_per_task": 128,
        "task_mean_scale": 3.0,
    },
    "model": {
        "adapter": "smora",
        "r": 64,
        "k": 8,
        "n_experts": 8,
        "expert_rank": 8,
        "top_m": 2,
        "scaling": 1.0,
        "balancing": False,
        "update_rate": 0.01,
        "balance_every": 1,
        "bias_in_weights": False,
        "router_skew": 0.0,
        "arch": "linear",
        "hidden_dim": 0,
    },
    "train": {
        "lr": 0.1,
        "steps": 1000,
        "batch_size": 64,
        "optimizer": "sgd",
    },
    "sweep": {
        "r_total": 64,
        "r_active": 16,
        "seeds": [0, 1, 2, 3, 4],
    },
    "rank_ablation": {
        "r_total": 64,
        "k_values": [8],
        "seeds": [0, 1, 2, 3, 4],
    },
    "analyze": {
        "checkpoint": None,
        "metrics": None,
        "cosine": False,
    },
}


def _merge(defaults: dict, given: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a section")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "version" not in raw:
        raise ConfigError("config is missing the mandatory 'version' field")
    if raw["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw['version']!r}")
    return _merge(DEFAULTS, raw, "")


def suite_from_config(cfg: dict):
    data = cfg["data"]
    spec = TaskGenSpec(
        m=data["tasks"],
        d_in=data["d_in"],
        d_out=data["d_out"],
        teacher_rank=data["teacher_rank"],
        shared_fraction=data["shared_fraction"],
        noise_std=data["noise_std"],
        train_per_task=data["train_per_task"],
        eval_per_task=data["eval_per_task"],
        task_mean_scale=data["task_mean_scale"],
    )
    return gen_multitask_data(spec, child_rng(cfg["seed"], "suite"))


def train_config_from(cfg: dict, seed: int | None = None) -> TrainConfig:
    model, train = cfg["model"], cfg["train"]
    try:
        return TrainConfig(
            adapter=model["adapter"],
            r=model["r"],
            k=model["k"],
            n_experts=model["n_experts"],
            expert_rank=model["expert_rank"],
            top_m=model["top_m"],
            scaling=model["scaling"],
            balancing=model["balancing"],
            update_rate=model["update_rate"],
            balance_every=model["balance_every"],
            bias_in_weights=model["bias_in_weights"],
            router_skew=model["router_skew"],
            lr=train["lr"],
            steps=train["steps"],
            batch_size=train["batch_size"],
            optimizer=train["optimizer"],
            seed=cfg["seed"] if seed is None else seed,
            arch=model["arch"],
            hidden_dim=model["hidden_dim"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
