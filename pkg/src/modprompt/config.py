"""Experiment configuration (TOML)."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import tomli

from .data import MODALITIES
from .train import DEFAULT_LR, STRATEGIES

SEED_ENV = "MODPROMPT_SEED"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


# section -> key -> (required, accepted types)
_NUM = (int, float)
SCHEMA = {
    "data": {
        "root": (True, (str,)),
        "modality": (True, (str,)),
        "seed": (False, (int,)),
        "train_size": (False, (int,)),
        "test_size": (False, (int,)),
        "source_train_size": (False, (int,)),
        "source_test_size": (False, (int,)),
    },
    "strategy": {
        "kind": (True, (str, list)),
        "with_task_residuals": (True, (bool, list)),
        "patch_size": (True, (int,)),
    },
    "optim": {
        "lr": (True, (int, float, dict)),
        "weight_decay": (True, _NUM),
        "epochs": (True, (int,)),
        "batch_size": (True, (int,)),
        "seed": (True, (int, list)),
    },
    "eval": {
        "score_threshold": (True, _NUM),
        "nms_iou": (True, _NUM),
        "max_detections": (False, (int,)),
    },
    "pretrain": {
        "epochs": (False, (int,)),
        "lr": (False, _NUM),
        "weight_decay": (False, _NUM),
        "batch_size": (False, (int,)),
        "seed": (False, (int,)),
    },
}
REQUIRED_SECTIONS = ("data", "strategy", "optim", "eval")

DEFAULTS = {
    "data": {"seed": 0, "train_size": 64, "test_size": 128, "source_train_size": 512, "source_test_size": 128},
    "eval": {"max_detections": 100},
    "pretrain": {"epochs": 30, "lr": 2e-3, "weight_decay": 1e-4, "batch_size": 16, "seed": 0},
}


@dataclass
class ExperimentConfig:
    raw: dict  # validated, defaults filled in
    path: Path | None = None

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def strategy(self) -> dict:
        return self.raw["strategy"]

    @property
    def optim(self) -> dict:
        return self.raw["optim"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    @property
    def pretrain(self) -> dict:
        return self.raw["pretrain"]

    @property
    def data_root(self) -> Path:
        root = Path(self.data["root"])
        if not root.is_absolute() and self.path is not None:
            root = self.path.parent / root
        return root

    @property
    def kinds(self) -> list[str]:
        k = self.strategy["kind"]
        return [k] if isinstance(k, str) else list(k)

    @property
    def residual_flags(self) -> list[bool]:
        r = self.strategy["with_task_residuals"]
        return [r] if isinstance(r, bool) else list(r)

    @property
    def seeds(self) -> list[int]:
        s = self.optim["seed"]
        return [s] if isinstance(s, int) else list(s)

    def strategy_grid(self) -> list[tuple[str, bool]]:
        """(kind, with_task_residuals) pairs; residuals are skipped for ft."""
        return [(k, r) for k in self.kinds for r in self.residual_flags if not (r and k == "ft")]

    def snapshot(self) -> dict:
        return copy.deepcopy(self.raw)


def _check_type(value, types) -> bool:
    if bool in types and isinstance(value, bool):
        return True
    if isinstance(value, bool):
        return False
    return isinstance(value, types)


def validate(raw: dict) -> dict:
    """Check keys and types, collecting every problem before raising."""
    problems = []
    for section in raw:
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
    for section in REQUIRED_SECTIONS:
        if section not in raw:
            problems.append(f"missing section [{section}]")
    out = {}
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            problems.append(f"[{section}] must be a table")
            continue
        for key in given:
            if key not in keys:
                problems.append(f"unknown key {section}.{key}")
        filled = dict(DEFAULTS.get(section, {}))
        for key, (required, types) in keys.items():
            if key not in given:
                if required and section in raw:
                    problems.append(f"missing key {section}.{key}")
                continue
            if not _check_type(given[key], types):
                problems.append(f"{section}.{key} has wrong type {type(given[key]).__name__}")
                continue
            filled[key] = given[key]
        out[section] = filled

    s, o = out.get("strategy", {}), out.get("optim", {})
    kinds = s.get("kind")
    for k in [kinds] if isinstance(kinds, str) else (kinds or []):
        if k not in STRATEGIES:
            problems.append(f"strategy.kind: unknown strategy {k!r}")
    flags = s.get("with_task_residuals")
    if isinstance(flags, list) and not all(isinstance(f, bool) for f in flags):
        problems.append("strategy.with_task_residuals must be a bool or a list of bools")
    if out.get("data", {}).get("modality") not in (None, *MODALITIES):
        problems.append(f"data.modality must be one of {MODALITIES}")
    seeds = o.get("seed")
    if isinstance(seeds, list) and not all(isinstance(x, int) and not isinstance(x, bool) for x in seeds):
        problems.append("optim.seed must be an int or a list of ints")
    lr = o.get("lr")
    if isinstance(lr, dict):
        for k, v in lr.items():
            if k not in DEFAULT_LR:
                problems.append(f"unknown key optim.lr.{k}")
            elif not _check_type(v, _NUM):
                problems.append(f"optim.lr.{k} must be a number")
    for sec, key in (("eval", "score_threshold"), ("eval", "nms_iou")):
        v = out.get(sec, {}).get(key)
        if v is not None and not 0 <= v <= 1:
            problems.append(f"{sec}.{key} must lie in [0, 1]")
    if problems:
        raise ConfigError(problems)
    return out


def load_config(path, env=None) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as f:
        try:
            raw = tomli.load(f)
        except tomli.TOMLDecodeError as e:
            raise ConfigError([f"{path}: {e}"]) from e
    return from_dict(raw, path, env)


def from_dict(raw: dict, path=None, env=None) -> ExperimentConfig:
    cfg = validate(raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seeds = [int(s) for s in env[SEED_ENV].split(",")]
        except ValueError as e:
            raise ConfigError([f"{SEED_ENV}={env[SEED_ENV]!r} is not an int or comma list of ints"]) from e
        cfg["optim"]["seed"] = seeds[0] if len(seeds) == 1 else seeds
    return ExperimentConfig(cfg, Path(path) if path is not None else None)
