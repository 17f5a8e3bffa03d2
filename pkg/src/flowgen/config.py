"""Experiment configuration: one canonical JSON document per run.

``default_config(experiment)`` returns the full document with every knob
present; ``validate_config`` normalizes a user document against it and
reports unknown or ill-typed fields by path.  Seeds are always explicit.
"""

from __future__ import annotations

import copy

from . import diffusion as df
from . import experiments as ex
from . import fluids2d as fl
from . import nn
from . import toymodels as tm

EXPERIMENTS = ("toy1", "toy2", "shear2d")
MODELS = (
    "deterministic-mlp",
    "diffusion-mlp",
    "mini-uvit-diffusion",
    "mini-uvit-deterministic",
)


class ConfigError(ValueError):
    """Invalid configuration; the message carries the offending field path."""


def default_config(experiment="toy1"):
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown kind {experiment!r}")
    base = {
        "experiment": experiment,
        "seed": 0,
        "out_dir": "out",
        "threads": 1,
        "data_dir": "",  # set by gen-data; consumed by train
    }
    if experiment in ("toy1", "toy2"):
        base["model"] = "diffusion-mlp"
        base["toy1"] = tm.Toy1Config().to_json()
        base["toy2"] = tm.Toy2Config().to_json()
        base["train"] = ex.ToyTrainConfig().to_json()
        base["sample"] = {"n_samples": ex.N_SAMPLES_PER_CONDITION,
                          "n_conditions": ex.N_PROBE_CONDITIONS}
    else:
        base["model"] = "mini-uvit-diffusion"
        base["ensemble"] = fl.EnsembleSpec().to_json()
        base["uvit"] = {
            "state_channels": 2,
            "cond_channels": 2,
            "grid": 64,
            "base_width": 32,
            "levels": 2,
            "res_blocks": 1,
            "heads": 4,
            "fourier_dim": 32,
        }
        base["schedule"] = df.DiffusionSchedule().to_json()
        base["lam_sq"] = 0.0
        base["optimizer"] = df.OptimizerConfig(batch_size=8, epochs=20).to_json()
        base["train_dtype"] = "float32"
        base["sample"] = {"steps": 128, "n_samples": 16}
        base["checkpoint_every"] = 0
    return base


def _merge(defaults, user, path=""):
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"{where}: unknown field")
        dval = defaults[key]
        if isinstance(dval, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected object")
            out[key] = _merge(dval, val, where)
        else:
            if dval is not None and val is not None and not isinstance(
                val, type(dval)
            ) and not (isinstance(dval, float) and isinstance(val, int)):
                raise ConfigError(
                    f"{where}: expected {type(dval).__name__}, got {type(val).__name__}"
                )
            out[key] = val
    return out


def validate_config(user):
    """Normalize a user config against the defaults for its experiment."""
    if not isinstance(user, dict):
        raise ConfigError(": config must be a JSON object")
    experiment = user.get("experiment", "toy1")
    defaults = default_config(experiment)
    cfg = _merge(defaults, user)
    if cfg["model"] not in MODELS:
        raise ConfigError(f"model: unknown kind {cfg['model']!r}")
    if cfg["experiment"] in ("toy1", "toy2") and "uvit" in cfg:
        raise ConfigError("uvit: not valid for toy experiments")
    if cfg["experiment"] == "shear2d" and cfg["model"].startswith("d"):
        raise ConfigError(f"model: {cfg['model']!r} not valid for shear2d")
    if cfg["seed"] < 0:
        raise ConfigError("seed: must be nonnegative")
    if cfg["threads"] < 1:
        raise ConfigError("threads: must be >= 1")
    return cfg


# -- constructors from validated configs -------------------------------------


def build_toy_config(cfg):
    if cfg["experiment"] == "toy1":
        return tm.Toy1Config.from_json(cfg["toy1"])
    return tm.Toy2Config.from_json(cfg["toy2"])


def build_train_config(cfg):
    return ex.ToyTrainConfig.from_json(cfg["train"])


def build_ensemble_spec(cfg):
    return fl.EnsembleSpec.from_json(cfg["ensemble"])


def build_uvit_descriptor(cfg):
    return nn.MiniUvitDescriptor(**cfg["uvit"])


def build_schedule(cfg):
    return df.DiffusionSchedule.from_json(cfg["schedule"])


def build_optimizer(cfg):
    return df.OptimizerConfig.from_json(cfg["optimizer"])
