"""Run configuration: dataclasses, per-task defaults and a JSON schema.

A config file is JSON with a ``version`` field.  Unknown keys anywhere are
rejected.  Defaults for ``linear`` and ``sir`` follow the published
training table; ``gauss-oracle`` and ``two-moons`` reuse the ``sir``
column (annealed learning rate, clipping, 2 x 64 conditioners).
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

import jsonschema

SCHEMA_VERSION = 1
TASKS = ("two-moons", "linear", "sir", "gauss-oracle")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 10000
    batch_size: int = 256
    n_contrastive: int = 255
    lam: float = 0.0
    lr: float = 1e-3
    design_lr: float = 1e-3
    lr_anneal: float | None = 0.8
    final_lr: float | None = 1e-4
    clip: float | None = 5.0
    patience: int = 200
    smoothing: int = 50
    xi_beta2: float = 0.95
    sigma_start: float = 0.0
    sigma_end: float = 0.0
    rho: float = 5.0
    mu_init: list[float] | None = None
    per_row_contrastive: bool = False
    train_flow: bool = True
    train_design: bool = True
    eval_batch: int = 0
    eval_contrastive: int = 0


@dataclass
class FlowSettings:
    hidden: int = 64
    depth: int = 2
    n_bijectors: int = 5
    bins: int = 4
    tail_bound: float = 5.0
    affine: bool = True


@dataclass
class McmcConfig:
    chains: int = 4
    warmup: int = 5000
    draws: int = 20000
    target_accept: float = 0.3
    thin: int = 1


@dataclass
class SweepConfig:
    L: list[int] = field(default_factory=lambda: [7, 127])
    lam: list[float] = field(default_factory=lambda: [0.0])
    validation_size: int = 1024
    eval_every: int = 50


@dataclass
class SbcConfig:
    trials: int = 0
    levels: list[float] = field(default_factory=lambda: [round(0.1 * k, 1) for k in range(1, 10)])
    posterior_draws: int = 200


@dataclass
class RunConfig:
    task: str = "linear"
    version: int = SCHEMA_VERSION
    seed: int = 0
    seeds: list[int] = field(default_factory=list)
    rounds: int = 1
    pool_size: int = 512
    truth: list[float] | None = None
    simulator: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    flow: FlowSettings = field(default_factory=FlowSettings)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    sbc: SbcConfig = field(default_factory=SbcConfig)
    out_dir: str = "runs"
    name: str = ""

    def run_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds else [self.seed]


def task_defaults(task: str) -> dict:
    """Per-task overrides on top of the dataclass defaults."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if task == "linear":
        return {
            "train": dict(batch_size=10, n_contrastive=50, steps=10000, lr=1e-3, design_lr=1e-3,
                          lr_anneal=None, final_lr=None, clip=None),
            "flow": dict(hidden=128, depth=4, n_bijectors=5, bins=4),
            "truth": [2.0, -1.0],
        }
    if task == "sir":
        return {
            "train": dict(batch_size=256, n_contrastive=255, steps=10000, lr=1e-3, design_lr=1e-3,
                          lr_anneal=0.8, final_lr=1e-4, clip=5.0),
            "flow": dict(hidden=64, depth=2, n_bijectors=5, bins=4),
            "truth": [0.7399, 0.0924],
        }
    if task == "gauss-oracle":
        return {"train": {}, "flow": {}, "truth": [0.5]}
    return {"train": {}, "flow": {}, "truth": None}


# ---------------------------------------------------------------------------
# schema


def _json_type(tp) -> dict:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        inner = [a for a in args if a is not type(None)]
        sch = _json_type(inner[0])
        if type(None) in args:
            t = sch.get("type")
            sch = dict(sch, type=[t, "null"] if isinstance(t, str) else t)
        return sch
    if origin is list:
        return {"type": "array", "items": _json_type(args[0]) if args else {}}
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    if tp is dict:
        return {"type": "object"}
    if dataclasses.is_dataclass(tp):
        return _object_schema(tp)
    raise TypeError(f"no schema for {tp!r}")


def _object_schema(cls) -> dict:
    hints = typing.get_type_hints(cls)
    props = {f.name: _json_type(hints[f.name]) for f in dataclasses.fields(cls)}
    return {"type": "object", "properties": props, "additionalProperties": False}


def schema() -> dict:
    s = _object_schema(RunConfig)
    s["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    s["title"] = "infodesign run config"
    s["required"] = ["task"]
    s["properties"]["task"] = {"enum": list(TASKS)}
    s["properties"]["version"] = {"const": SCHEMA_VERSION}
    return s


# ---------------------------------------------------------------------------
# parse / serialize


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "simulator":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config(raw: dict) -> RunConfig:
    """Validate ``raw`` against the schema and fill task defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    task = raw["task"]
    base = dataclasses.asdict(RunConfig(task=task))
    d = task_defaults(task)
    base = _merge(base, {"train": d["train"], "flow": d["flow"], "truth": d["truth"]})
    merged = _merge(base, raw)
    cfg = RunConfig(
        **{k: v for k, v in merged.items() if k not in ("train", "flow", "mcmc", "sweep", "sbc")},
        train=TrainConfig(**merged["train"]),
        flow=FlowSettings(**merged["flow"]),
        mcmc=McmcConfig(**merged["mcmc"]),
        sweep=SweepConfig(**merged["sweep"]),
        sbc=SbcConfig(**merged["sbc"]),
    )
    _check_values(cfg)
    return cfg


def _check_values(cfg: RunConfig):
    t = cfg.train
    if t.steps < 0 or t.batch_size < 1 or t.n_contrastive < 0:
        raise ConfigError("train: steps >= 0, batch_size >= 1 and n_contrastive >= 0 required")
    if t.lam < -1:
        raise ConfigError("train.lam must be >= -1")
    if t.sigma_start < 0 or t.sigma_end < 0 or t.rho <= 0:
        raise ConfigError("train: sigma values must be >= 0 and rho > 0")
    if cfg.rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if cfg.pool_size < 1:
        raise ConfigError("pool_size must be >= 1")
    if any(L < 0 for L in cfg.sweep.L) or not cfg.sweep.L or not cfg.sweep.lam:
        raise ConfigError("sweep grid must be non-empty with L >= 0")
    if any(not 0 < a < 1 for a in cfg.sbc.levels):
        raise ConfigError("sbc.levels must lie in (0, 1)")
    if cfg.mcmc.chains < 1 or cfg.mcmc.draws < 1 or cfg.mcmc.warmup < 0:
        raise ConfigError("mcmc: chains >= 1, draws >= 1, warmup >= 0 required")


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def normalize(raw: dict) -> dict:
    return to_dict(parse_config(raw))


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(raw)
