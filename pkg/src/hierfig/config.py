"""Run configuration: packaged defaults deep-merged with one user YAML file."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

PATH_KEYS = (("paths", "figures"), ("paths", "image_root"), ("paths", "work_dir"), ("lvlm", "mock_dir"))


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    text = resources.files(__package__).joinpath("data").joinpath("defaults.yaml").read_text("utf-8")
    return yaml.safe_load(text)


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config field {key!r}")
        if isinstance(base[k], dict) and not (key.endswith("branch_lr")):
            if not isinstance(v, dict):
                raise ConfigError(f"config field {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override must look like key.path=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad override value for {key}: {exc}") from None
    return key.strip().split("."), value


def _nest(keys: list[str], value) -> dict:
    out: Any = value
    for k in reversed(keys):
        out = {k: out}
    return out


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> dict:
    cfg = defaults()
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = yaml.safe_load(p.read_text("utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        cfg = _merge(cfg, user)
        base_dir = p.resolve().parent
        for section, key in PATH_KEYS:
            if user.get(section, {}).get(key) is not None:
                cfg[section][key] = str((base_dir / cfg[section][key]).resolve())
    for item in overrides:
        keys, value = _parse_override(item)
        cfg = _merge(cfg, _nest(keys, value))
    validate(cfg)
    return cfg


def _require(cond: bool, field: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def validate(cfg: dict) -> None:
    num = (int, float)
    lv = cfg["lvlm"]
    _require(lv["mode"] in ("mock", "http"), "lvlm.mode", "must be 'mock' or 'http'")
    _require(isinstance(lv["retry_limit"], int) and lv["retry_limit"] >= 1, "lvlm.retry_limit", "must be an integer >= 1")
    _require(isinstance(lv["max_in_flight"], int) and lv["max_in_flight"] >= 1, "lvlm.max_in_flight", "must be >= 1")
    for k, v in cfg["seeds"].items():
        _require(isinstance(v, int) and not isinstance(v, bool), f"seeds.{k}", "seeds must be explicit integers")
    _require(isinstance(cfg["workers"], int) and cfg["workers"] >= 1, "workers", "must be an integer >= 1")
    pn = cfg["panels"]
    _require(isinstance(pn["n_views"], int) and pn["n_views"] >= 1, "panels.n_views", "must be an integer >= 1")
    lo, hi = pn["scale_range"]
    _require(0 < lo <= hi <= 1, "panels.scale_range", "needs 0 < lo <= hi <= 1")
    for sec, key in (("panels", "merge_iou"), ("panels", "nms_iou"), ("regions", "nms_iou"),
                     ("cleanup", "nms_iou"), ("cleanup", "text_sim_threshold")):
        v = cfg[sec][key]
        _require(isinstance(v, num) and 0 < v <= 1, f"{sec}.{key}", "must lie in (0, 1]")
    _require(isinstance(cfg["regions"]["tau"], num) and cfg["regions"]["tau"] > 0, "regions.tau", "must be > 0")
    _require(isinstance(cfg["regions"]["inflate_fraction"], num) and 0 < cfg["regions"]["inflate_fraction"] <= 1,
             "regions.inflate_fraction", "must lie in (0, 1]")
    h = cfg["corpus"]["holdout_fraction"]
    _require(isinstance(h, num) and 0 < h < 1, "corpus.holdout_fraction", "must lie in (0, 1)")
    tr = cfg["train"]
    _require(isinstance(tr["steps"], int) and tr["steps"] >= 1, "train.steps", "must be an integer >= 1")
    _require(isinstance(tr["batch_size"], int) and tr["batch_size"] >= 1, "train.batch_size", "must be >= 1")
    _require(isinstance(tr["d"], int) and tr["d"] >= 2, "train.d", "must be an integer >= 2")
    _require(isinstance(tr["roi_grid"], int) and tr["roi_grid"] >= 1, "train.roi_grid", "must be >= 1")
    from .align.train import parse_cycle
    try:
        parse_cycle(str(tr["cycle"]))
    except ValueError as exc:
        raise ConfigError(f"train.cycle: {exc}") from None
    blr = tr["optim"]["branch_lr"]
    _require(isinstance(blr, dict) and set(blr) == {"shared", "bbox", "fine", "coarse"},
             "train.optim.branch_lr", "needs exactly shared, bbox, fine, coarse")
    _require(all(isinstance(cfg["eval"]["ks"], list) and isinstance(k, int) and k >= 1 for k in cfg["eval"]["ks"]),
             "eval.ks", "must be a list of positive integers")


def config_hash(cfg: dict) -> str:
    """sha256 of the config with machine-specific paths removed."""
    c = copy.deepcopy(cfg)
    c.pop("paths", None)
    c["lvlm"].pop("mock_dir", None)
    blob = json.dumps(c, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
