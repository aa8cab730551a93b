"""Experiment configuration: one JSON document, merged over defaults."""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from pathlib import Path

import numpy as np

from . import gmm_oracle as oracle
from .label_noise import (FORWARD, REVERSE, TransitionMatrix, forward_from_reverse, make_asymmetric,
                          make_resampled, make_symmetric, reverse_from_forward)
from .metrics import GridSpec
from .objectives import KINDS, ObjectiveConfig
from .sampler import SamplerConfig


class ConfigError(ValueError):
    pass


# The toy task: two unit Gaussians at (3, 3) / (-3, -3) with the 0.8 / 0.2
# reverse matrix.  Times run to 40 so that a centred Gaussian prior is a good
# match for the class-conditional marginals at the start of sampling.
DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/default",
    "mixture": {"means": [[3.0, 3.0], [-3.0, -3.0]], "variances": [1.0, 1.0], "clean_prior": [0.5, 0.5]},
    "noise": {"kind": "matrix", "orientation": "reverse", "entries": [[0.8, 0.2], [0.2, 0.8]],
              "rate": 0.0, "flips": []},
    "data": {"n": 10000, "csv": None},
    "schedule": {"t_min": 0.05, "t_max": 40.0},
    "objective": {"kind": "TDSM", "skip_threshold": 0.01, "temporal_weight": "sigma2",
                  "detach_nontarget": True, "weight_source": "oracle"},
    "score_model": {"hidden": [64, 64, 64], "class_embed": 16, "time_embed": 32,
                    "parameterization": "direct-score", "steps": 8000, "batch_size": 256,
                    "lr": 1e-3, "uncond_prob": 0.0},
    "classifier": {"hidden": [64, 64], "time_embed": 32, "steps": 4000, "batch_size": 256,
                   "lr": 1e-3, "volmin": False, "vol_weight": 1e-2},
    "sampler": {"method": "reverse-sde", "steps": 256, "n_samples": 4096, "prior_var": 1.0,
                "guidance": {"kind": "none", "scale": 0.0}},
    "grid": {"lo": -6.0, "hi": 6.0, "n": 20, "times": [0.1, 1.0, 3.0, 10.0]},
    "contour": {"noisy_label": 0, "clean_label": 0, "times": [0.05, 0.5, 1.0, 3.0, 10.0, 40.0], "svg": False},
}

NOISE_KINDS = ("matrix", "symmetric", "resampled", "asymmetric")
GUIDANCE_KINDS = ("none", "cg", "tcg", "cfg", "affine")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path + key} must be an object")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, seed: int | None = None, out: str | None = None) -> dict:
    """Read, merge over defaults, apply CLI overrides and validate."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if "seed" not in doc:
            raise ConfigError("config must set an explicit integer seed")
    cfg = _merge(DEFAULTS, doc)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if cfg["noise"]["kind"] not in NOISE_KINDS:
        raise ConfigError(f"noise.kind must be one of {NOISE_KINDS}")
    if cfg["objective"]["kind"] not in KINDS:
        raise ConfigError(f"objective.kind must be one of {KINDS}")
    if cfg["objective"]["weight_source"] not in ("oracle", "classifier"):
        raise ConfigError("objective.weight_source must be 'oracle' or 'classifier'")
    if cfg["sampler"]["guidance"]["kind"] not in GUIDANCE_KINDS:
        raise ConfigError(f"sampler.guidance.kind must be one of {GUIDANCE_KINDS}")
    csv_path = cfg["data"]["csv"]
    if csv_path is not None and not Path(csv_path).is_file():
        raise ConfigError(f"data.csv {csv_path} does not exist")
    try:
        gmm = mixture(cfg)
        schedule(cfg)
        noise_spec_matrix(cfg, gmm.classes)
        objective_config(cfg)
        sampler_config(cfg)
        grid_spec(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    c = gmm.classes
    for key in ("noisy_label", "clean_label"):
        if not 0 <= cfg["contour"][key] < c:
            raise ConfigError(f"contour.{key} must lie in [0, {c})")


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def child_seed(seed: int, stream: str) -> int:
    """Independent, reproducible seed for a named purpose (data, model, ...)."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stream.encode())]).generate_state(1)[0])


def mixture(cfg: dict) -> oracle.GaussianMixture:
    m = cfg["mixture"]
    return oracle.GaussianMixture(np.array(m["means"]), np.array(m["variances"]), np.array(m["clean_prior"]))


def schedule(cfg: dict) -> oracle.VESchedule:
    return oracle.VESchedule(float(cfg["schedule"]["t_min"]), float(cfg["schedule"]["t_max"]))


def noise_spec_matrix(cfg: dict, c: int) -> TransitionMatrix:
    """The matrix exactly as configured (either orientation)."""
    spec = cfg["noise"]
    kind = spec["kind"]
    if kind == "matrix":
        orient = spec.get("orientation", REVERSE)
        if orient not in (FORWARD, REVERSE):
            raise ConfigError("noise.orientation must be 'forward' or 'reverse'")
        M = TransitionMatrix(np.array(spec["entries"], dtype=np.float64), orient)
        if M.c != c:
            raise ConfigError("noise matrix size does not match the mixture")
    elif kind == "symmetric":
        M = make_symmetric(c, float(spec["rate"]))
    elif kind == "resampled":
        M = make_resampled(c, float(spec["rate"]))
    else:
        M = make_asymmetric(c, [tuple(f) for f in spec["flips"]], float(spec["rate"]))
    return M


def noise_matrices(cfg: dict, gmm: oracle.GaussianMixture | None = None):
    """(forward T, reverse S) for the configured noise, Bayes-linked through the clean prior.

    Raises ``InconsistentInputs`` when the conversion is singular.
    """
    gmm = gmm or mixture(cfg)
    M = noise_spec_matrix(cfg, gmm.classes)
    if M.orientation == FORWARD:
        S, _ = reverse_from_forward(M, clean_prior=gmm.clean_prior)
        return M, S
    T, _ = forward_from_reverse(M, clean_prior=gmm.clean_prior)
    return T, M


def objective_config(cfg: dict) -> ObjectiveConfig:
    o = cfg["objective"]
    return ObjectiveConfig(kind=o["kind"], skip_threshold=float(o["skip_threshold"]),
                           temporal_weight=o["temporal_weight"], detach_nontarget=bool(o["detach_nontarget"]),
                           weight_source=o["weight_source"])


def sampler_config(cfg: dict, seed: int | None = None) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(method=s["method"], steps=int(s["steps"]), t_max=float(cfg["schedule"]["t_max"]),
                         t_min=float(cfg["schedule"]["t_min"]),
                         seed=child_seed(cfg["seed"], "sampler") if seed is None else seed,
                         prior_var=float(s["prior_var"]))


def grid_spec(cfg: dict) -> GridSpec:
    g = cfg["grid"]
    return GridSpec(float(g["lo"]), float(g["hi"]), int(g["n"]), tuple(float(t) for t in g["times"]))
