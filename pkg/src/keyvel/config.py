"""Run configuration: JSON schema, defaults, and typed access."""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import jsonschema

from .models import ModelConfig, enumerate_grid
from .training import STRATEGY_ORDER, StrategyKind, TrainPlan

_CONFIG_ITEM_SCHEMA = {
    "type": "object",
    "properties": {
        "k0_encoder": {"enum": [3, 5]},
        "k0_performer": {"enum": [3, 5]},
        "k2_encoder": {"enum": [1, 2, 3]},
        "k2_performer": {"enum": [1, 2, 4]},
        "k1": {"const": 4},
    },
    "required": ["k0_encoder", "k0_performer", "k2_encoder", "k2_performer"],
    "additionalProperties": False,
}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "keyvel run configuration",
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "dataset": {
            "type": "object",
            "properties": {
                "n_performances": {"type": "integer", "minimum": 6},
                "notes_per_performance": {"type": "integer", "minimum": 1},
                "smf_paths": {"type": "array", "items": {"type": "string"}},
            },
            "additionalProperties": False,
        },
        "synthesis": {
            "type": "object",
            "properties": {
                "sample_rate": {"type": "integer", "minimum": 8000},
            },
            "additionalProperties": False,
        },
        "nmf": {
            "type": "object",
            "properties": {
                "iterations": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "grid": {
            "oneOf": [
                {"const": "full"},
                {"type": "array", "items": _CONFIG_ITEM_SCHEMA, "minItems": 1},
            ],
        },
        "strategies": {
            "type": "array",
            "items": {"enum": [s.value for s in STRATEGY_ORDER]},
            "minItems": 1,
            "uniqueItems": True,
        },
        "plan": {
            "type": "object",
            "properties": {
                "subsample_fraction": {"type": "number", "exclusiveMinimum": 0,
                                       "maximum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "ema_window": {"type": "integer", "minimum": 1},
                "rotation_lr": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string", "minLength": 1},
    },
    "additionalProperties": False,
}


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully-defaulted description of one experiment run."""

    seed: int = 0
    n_performances: int = 120
    notes_per_performance: int = 26
    smf_paths: Tuple[str, ...] = ()
    sample_rate: int = 22050
    nmf_iterations: int = 100
    grid: Union[str, Tuple[ModelConfig, ...]] = "full"
    strategies: Tuple[StrategyKind, ...] = STRATEGY_ORDER
    plan: TrainPlan = field(default_factory=TrainPlan)
    workers: int = 1
    output_dir: str = "runs"

    def grid_configs(self) -> List[ModelConfig]:
        if self.grid == "full":
            return enumerate_grid()
        return list(self.grid)


def run_config_from_dict(raw: dict) -> RunConfig:
    """Validate a raw mapping against the schema and apply defaults."""
    jsonschema.validate(raw, RUN_CONFIG_SCHEMA)
    seed = raw.get("seed", 0)
    dataset = raw.get("dataset", {})
    synthesis = raw.get("synthesis", {})
    nmf = raw.get("nmf", {})
    plan_raw = raw.get("plan", {})
    plan = TrainPlan(seed=seed, **plan_raw)
    grid = raw.get("grid", "full")
    if grid != "full":
        grid = tuple(ModelConfig(**item) for item in grid)
    strategies = tuple(StrategyKind(s) for s in
                       raw.get("strategies", [s.value for s in STRATEGY_ORDER]))
    return RunConfig(
        seed=seed,
        n_performances=dataset.get("n_performances", 120),
        notes_per_performance=dataset.get("notes_per_performance", 26),
        smf_paths=tuple(dataset.get("smf_paths", ())),
        sample_rate=synthesis.get("sample_rate", 22050),
        nmf_iterations=nmf.get("iterations", 100),
        grid=grid,
        strategies=strategies,
        plan=plan,
        workers=raw.get("workers", 1),
        output_dir=raw.get("output_dir", "runs"),
    )


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a JSON run configuration file."""
    with open(path) as fh:
        raw = json.load(fh)
    return run_config_from_dict(raw)


def run_config_to_dict(cfg: RunConfig) -> dict:
    """Canonical plain mapping of a RunConfig (inverse of from_dict)."""
    grid = cfg.grid
    if grid != "full":
        grid = [
            {"k0_encoder": c.k0_encoder, "k0_performer": c.k0_performer,
             "k2_encoder": c.k2_encoder, "k2_performer": c.k2_performer,
             "k1": c.k1}
            for c in grid]
    return {
        "seed": cfg.seed,
        "dataset": {
            "n_performances": cfg.n_performances,
            "notes_per_performance": cfg.notes_per_performance,
            "smf_paths": list(cfg.smf_paths),
        },
        "synthesis": {"sample_rate": cfg.sample_rate},
        "nmf": {"iterations": cfg.nmf_iterations},
        "grid": grid,
        "strategies": [s.value for s in cfg.strategies],
        "plan": {
            "subsample_fraction": cfg.plan.subsample_fraction,
            "batch_size": cfg.plan.batch_size,
            "max_epochs": cfg.plan.max_epochs,
            "patience": cfg.plan.patience,
            "ema_window": cfg.plan.ema_window,
            "rotation_lr": cfg.plan.rotation_lr,
        },
        "workers": cfg.workers,
        "output_dir": cfg.output_dir,
    }


def config_digest(payload: dict) -> str:
    """Short stable hash of a JSON-serializable mapping."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
