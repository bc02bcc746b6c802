"""Experiment configuration: JSON schema, validation, resolution.

The config is a single JSON document with sections data / arch / source
/ transfer / eval / sweep / output. Validation is strict: unknown keys
are rejected, mode-conditional requirements are enforced, and the fully
resolved config (all defaults materialized) is echoed into the run
directory for provenance.
"""

from __future__ import annotations

import copy
import json
import math

from .errors import ConfigError

EPS_DEFAULT = 8 / 255
ALPHA_DEFAULT = 2 / 255


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _check_keys(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    _require(not unknown, f"unknown keys in {where}: {sorted(unknown)}")


def _num(section, key, where, default=None, lo=None, hi=None, integer=False, required=False):
    if key not in section:
        _require(not required, f"{where}.{key} is required")
        return default
    v = section[key]
    _require(isinstance(v, (int, float)) and not isinstance(v, bool), f"{where}.{key} must be a number")
    if integer:
        _require(float(v).is_integer(), f"{where}.{key} must be an integer")
        v = int(v)
    _require(lo is None or v >= lo, f"{where}.{key} must be >= {lo}, got {v}")
    _require(hi is None or v <= hi, f"{where}.{key} must be <= {hi}, got {v}")
    _require(math.isfinite(float(v)), f"{where}.{key} must be finite")
    return v


def _choice(section, key, where, options, default=None, required=False):
    if key not in section:
        _require(not required, f"{where}.{key} is required")
        return default
    v = section[key]
    _require(v in options, f"{where}.{key} must be one of {sorted(options)}, got {v!r}")
    return v


def _resolve_attack(section: dict, where: str, steps_default: int) -> dict:
    _check_keys(section, {"eps", "alpha", "steps", "random_start"}, where)
    out = {
        "eps": _num(section, "eps", where, default=EPS_DEFAULT, lo=0.0, hi=1.0),
        "alpha": _num(section, "alpha", where, default=ALPHA_DEFAULT, lo=0.0),
        "steps": _num(section, "steps", where, default=steps_default, lo=1, integer=True),
        "random_start": section.get("random_start", True),
    }
    _require(isinstance(out["random_start"], bool), f"{where}.random_start must be a boolean")
    if out["eps"] > 0:
        _require(0 < out["alpha"] <= out["eps"], f"{where}: need 0 < alpha <= eps")
    return out


def _resolve_schedule(section: dict, where: str) -> dict:
    _check_keys(section, {"base_lr", "milestones", "decay"}, where)
    ms = section.get("milestones", [40, 70, 90])
    _require(isinstance(ms, list) and all(isinstance(m, int) and m >= 0 for m in ms),
             f"{where}.milestones must be a list of non-negative integers")
    return {
        "base_lr": _num(section, "base_lr", where, default=0.1, lo=0.0),
        "milestones": sorted(ms),
        "decay": _num(section, "decay", where, default=0.2, lo=0.0, hi=1.0),
    }


_DATA_KEYS = {
    "format", "fraction", "seed",
    # patterns
    "class_ids", "per_class", "test_per_class", "size", "noise", "robust_amp",
    "fragile_amp", "code_pixels", "code_noise", "world_seed",
    # blobs
    "classes", "dims", "separation",
    # files
    "train_images", "train_labels", "test_images", "test_labels", "train", "test",
}


def _resolve_data(section: dict, top_seed: int) -> dict:
    _check_keys(section, _DATA_KEYS, "data")
    fmt = _choice(section, "format", "data", {"patterns", "blobs", "idx", "cifar"}, required=True)
    out = {
        "format": fmt,
        "fraction": _num(section, "fraction", "data", default=1.0, lo=0.0, hi=1.0),
        "seed": _num(section, "seed", "data", default=top_seed, lo=0, integer=True),
    }
    _require(out["fraction"] > 0, "data.fraction must be > 0")
    if fmt == "patterns":
        ids = section.get("class_ids")
        _require(isinstance(ids, list) and ids and all(isinstance(i, int) for i in ids),
                 "data.class_ids must be a non-empty list of integers")
        out.update({
            "class_ids": ids,
            "per_class": _num(section, "per_class", "data", lo=1, integer=True, required=True),
            "test_per_class": _num(section, "test_per_class", "data", default=50, lo=1, integer=True),
            "size": _num(section, "size", "data", default=12, lo=4, integer=True),
            "noise": _num(section, "noise", "data", default=0.06, lo=0.0),
            "robust_amp": _num(section, "robust_amp", "data", default=0.9, lo=0.0),
            "fragile_amp": _num(section, "fragile_amp", "data", default=0.02, lo=0.0),
            "code_pixels": _num(section, "code_pixels", "data", default=8, lo=0, integer=True),
            "code_noise": _num(section, "code_noise", "data", default=0.005, lo=0.0),
            "world_seed": _num(section, "world_seed", "data", default=7, lo=0, integer=True),
        })
    elif fmt == "blobs":
        out.update({
            "classes": _num(section, "classes", "data", lo=1, integer=True, required=True),
            "per_class": _num(section, "per_class", "data", lo=1, integer=True, required=True),
            "test_per_class": _num(section, "test_per_class", "data", default=50, lo=1, integer=True),
            "dims": _num(section, "dims", "data", lo=1, integer=True, required=True),
            "separation": _num(section, "separation", "data", lo=0.0, required=True),
        })
        _require(out["separation"] > 0, "data.separation must be > 0")
    elif fmt == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            _require(isinstance(section.get(key), str), f"data.{key} (path) is required for idx format")
            out[key] = section[key]
    else:  # cifar
        for key in ("train", "test"):
            v = section.get(key)
            _require(isinstance(v, list) and v and all(isinstance(p, str) for p in v),
                     f"data.{key} must be a non-empty list of paths")
            out[key] = v
    return out


def _resolve_arch(section: dict) -> dict:
    _check_keys(section, {"family", "depth", "width", "classes", "input_shape"}, "arch")
    family = _choice(section, "family", "arch", {"small-cnn", "mini-resnet", "mlp"}, required=True)
    shape = section.get("input_shape")
    _require(isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s > 0 for s in shape),
             "arch.input_shape must be [channels, height, width]")
    return {
        "family": family,
        "depth": _num(section, "depth", "arch",
                      default={"small-cnn": 4, "mini-resnet": 8, "mlp": 3}[family],
                      lo=2 if family == "mlp" else 3, integer=True),
        "width": _num(section, "width", "arch", default=1, lo=1, integer=True),
        "classes": _num(section, "classes", "arch", lo=2, integer=True, required=True),
        "input_shape": shape,
    }


def _resolve_source(section: dict) -> dict:
    _check_keys(section, {"mode", "epochs", "batch_size", "lambda", "k", "attack", "schedule"}, "source")
    mode = _choice(section, "mode", "source", {"standard", "at", "at_fdm"}, required=True)
    out = {
        "mode": mode,
        "epochs": _num(section, "epochs", "source", lo=0, integer=True, required=True),
        "batch_size": _num(section, "batch_size", "source", default=128, lo=2, integer=True),
        "attack": _resolve_attack(section.get("attack", {}), "source.attack", steps_default=7),
        "schedule": _resolve_schedule(section.get("schedule", {}), "source.schedule"),
    }
    if mode == "at_fdm":
        out["lambda"] = _num(section, "lambda", "source", lo=0.0, required=True)
        out["k"] = _num(section, "k", "source", lo=1, integer=True, required=True)
    else:
        _require("lambda" not in section and "k" not in section,
                 f"source.lambda/source.k only apply to mode at_fdm, not {mode!r}")
    return out


def _resolve_transfer(section: dict, depth: int) -> dict:
    _check_keys(section, {"mode", "k", "beta", "lambda_d", "bn_stats", "bn_affine",
                          "reinit_head", "epochs", "batch_size", "schedule"}, "transfer")
    mode = _choice(section, "mode", "transfer", {"vanilla", "neft", "lwf"}, required=True)
    k = _num(section, "k", "transfer", default=(depth if mode == "lwf" else None),
             lo=1, integer=True, required=(mode != "lwf"))
    if mode == "lwf":
        _require(k == depth,
                 f"transfer.k must equal the block count {depth} in lwf mode "
                 f"(all layers are fine-tuned), got {k}")
    _require(k <= depth, f"transfer.k={k} exceeds the architecture's {depth} blocks")
    out = {
        "mode": mode,
        "k": k,
        "beta": _num(section, "beta", "transfer", default=1.0),
        "lambda_d": _num(section, "lambda_d", "transfer", default=0.0, lo=0.0),
        "bn_stats": _choice(section, "bn_stats", "transfer", {"frozen", "updating"}, default="frozen"),
        "bn_affine": _choice(section, "bn_affine", "transfer", {"frozen", "trainable"}, default="trainable"),
        "reinit_head": section.get("reinit_head", True),
        "epochs": _num(section, "epochs", "transfer", lo=0, integer=True, required=True),
        "batch_size": _num(section, "batch_size", "transfer", default=128, lo=2, integer=True),
        "schedule": _resolve_schedule(section.get("schedule", {}), "transfer.schedule"),
    }
    _require(isinstance(out["reinit_head"], bool), "transfer.reinit_head must be a boolean")
    if mode == "neft":
        _require(0.0 < out["beta"] <= 1.0, f"transfer.beta must be in (0, 1], got {out['beta']}")
    return out


def _resolve_eval(section: dict) -> dict:
    _check_keys(section, {"eps", "alpha", "steps", "random_start", "batch_size"}, "eval")
    out = _resolve_attack({k: v for k, v in section.items() if k != "batch_size"}, "eval", steps_default=100)
    out["batch_size"] = _num(section, "batch_size", "eval", default=256, lo=1, integer=True)
    return out


_SWEEP_AXES = {"k", "lambda_d", "beta", "fraction"}


def _resolve_sweep(section: dict) -> dict:
    _check_keys(section, {"axis", "values"}, "sweep")
    axis = _choice(section, "axis", "sweep", _SWEEP_AXES, required=True)
    values = section.get("values")
    _require(isinstance(values, list) and values, "sweep.values must be a non-empty list")
    for v in values:
        _require(isinstance(v, (int, float)) and not isinstance(v, bool),
                 f"sweep.values must be numbers, got {v!r}")
    if axis == "k":
        _require(all(float(v).is_integer() and v >= 1 for v in values), "sweep k values must be integers >= 1")
        values = [int(v) for v in values]
    if axis == "fraction":
        _require(all(0 < v <= 1 for v in values), "sweep fraction values must be in (0, 1]")
    if axis == "beta":
        _require(all(0 < v <= 1 for v in values), "sweep beta values must be in (0, 1]")
    return {"axis": axis, "values": values}


_TOP_KEYS = {"seed", "data", "arch", "source", "transfer", "eval", "sweep", "output"}


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return raw


def resolve_config(raw: dict, need: tuple = ()) -> dict:
    """Validate and materialize defaults. `need` lists required sections."""
    _check_keys(raw, _TOP_KEYS, "config")
    for section in need:
        _require(section in raw, f"config section {section!r} is required for this command")
    out = {"seed": _num(raw, "seed", "config", default=0, lo=0, integer=True)}
    if "data" in raw:
        out["data"] = _resolve_data(raw["data"], out["seed"])
    if "arch" in raw:
        out["arch"] = _resolve_arch(raw["arch"])
    if "source" in raw:
        _require("arch" in out, "source section requires an arch section")
        out["source"] = _resolve_source(raw["source"])
        if out["source"].get("k") is not None:
            _require(out["source"]["k"] <= out["arch"]["depth"],
                     f"source.k={out['source']['k']} exceeds arch depth {out['arch']['depth']}")
    if "transfer" in raw:
        _require("arch" in out, "transfer section requires an arch section")
        out["transfer"] = _resolve_transfer(raw["transfer"], out["arch"]["depth"])
    out["eval"] = _resolve_eval(raw.get("eval", {}))
    if "sweep" in raw:
        out["sweep"] = _resolve_sweep(raw["sweep"])
    if "output" in raw:
        _check_keys(raw["output"], {"dir"}, "output")
        _require(isinstance(raw["output"].get("dir"), str), "output.dir must be a path string")
        out["output"] = dict(raw["output"])
    return out


def echo_config(resolved: dict, path: str):
    with open(path, "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")


def override(resolved: dict, section: str, key: str, value):
    """CLI flag override on an already-resolved config."""
    out = copy.deepcopy(resolved)
    out.setdefault(section, {})[key] = value
    return out
