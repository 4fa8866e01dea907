"""Experiment configuration: one JSON document layered over defaults.

Unknown keys and wrongly typed values are rejected before any stage runs.
The resolved document, not the file on disk, is what gets hashed.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .diffusion import SCHEDULE_KINDS, NoiseSchedule, make_schedule
from .distill import MODES, DistillConfig
from .pipeline import AnnotationSpec, RewardSpec
from .reward import RewardTrainConfig
from .world import ItemSpec, WorldSpec


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit status 2."""


def _distill_defaults() -> dict:
    d = asdict(DistillConfig())
    d.pop("seed")
    return d


def default_config() -> dict:
    world = WorldSpec().to_json()
    return {
        "seed": 0,
        "world": world,
        "schedule": {"kind": "linear", "T": 1000},
        "items": asdict(ItemSpec()),
        "heldout_sets_per_prompt": 10,
        "annotation": asdict(AnnotationSpec()),
        "reward": {
            "train_pairs": 2000,
            "heldout_pairs": 500,
            "spearman_items": 50,
            "spearman_prompt": None,  # None: seed modulo the prompt count
            "lr": 1e-3,
            "batch_size": 8,
            "epochs": 30,
            "freeze_fraction": 0.8,
            "weight_decay": 0.0,
            "prompt_dim": 4,
            "cam_dim": 4,
            "encoder_hidden": [256, 32],
            "head_hidden": [16],
            "feature_gain": 1.0,
            "activation": "relu",
            "freeze_head": False,
        },
        "distill": {"sds": _distill_defaults(), "dreamfl": _distill_defaults()},
        "optimize": {"prompt": 0, "init_scale": 0.05},
        "eval": {"prompts": list(range(world["num_prompts"])), "seeds": [0, 1, 2],
                 "k_factor": 32.0, "initial": 1000.0},
        "out": "runs/default",
    }


# keys whose default is None but which take a number when set
_NULLABLE_NUMBERS = {"finetune_lr", "t_threshold", "lambda_fixed", "spearman_prompt"}


def _check_type(path, default, value):
    key = path.rsplit(".", 1)[-1]
    if default is None:
        if value is None or (key in _NULLABLE_NUMBERS and _is_number(value)):
            return
        raise ConfigError(f"{path}: expected a number or null, got {value!r}")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = _is_number(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _merge(default: dict, override: dict, prefix="") -> dict:
    out = copy.deepcopy(default)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in default:
            raise ConfigError(f"unknown config key: {path}")
        _check_type(path, default[key], value)
        if isinstance(default[key], dict):
            out[key] = _merge(default[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    raw: dict  # fully resolved document
    seed: int
    world: WorldSpec
    schedule_kind: str
    T: int
    items: ItemSpec
    heldout_sets_per_prompt: int
    annotation: AnnotationSpec
    reward: RewardSpec
    train_pairs: int
    heldout_pairs: int
    spearman_items: int
    spearman_prompt: int
    distill: dict  # mode -> DistillConfig (seed filled per run)
    prompt: int
    init_scale: float
    eval_prompts: list
    eval_seeds: list
    k_factor: float
    elo_initial: float
    out: str

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule_kind, self.T)

    def distill_config(self, mode: str, seed: int) -> DistillConfig:
        return DistillConfig(**{**asdict(self.distill[mode]), "seed": int(seed)})

    def config_hash(self) -> str:
        return config_hash(self.raw)


def config_hash(doc: dict) -> str:
    """SHA-256 of the canonical JSON form; key order and ``out`` do not matter."""
    body = {k: v for k, v in doc.items() if k != "out"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _build(cls, doc, path, **extra):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: (tuple(v) if isinstance(v, list) else v)
                      for k, v in doc.items() if k in names}, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def resolve(override: dict | None = None, seed: int | None = None,
            out: str | None = None) -> ExperimentConfig:
    """Merge ``override`` into the defaults and validate every section."""
    if override is not None and not isinstance(override, dict):
        raise ConfigError("config must be a JSON object")
    doc = _merge(default_config(), override or {})
    if seed is not None:
        doc["seed"] = int(seed)
    if out is not None:
        doc["out"] = str(out)
    if doc["seed"] < 0:
        raise ConfigError("seed must be >= 0")

    world = _build(WorldSpec, doc["world"], "world")
    if len(world.criterion_weights) != 3:
        raise ConfigError("world.criterion_weights needs three entries")
    if world.D < 2 or world.K < 1 or world.num_prompts < 1:
        raise ConfigError("world: need D >= 2, K >= 1, num_prompts >= 1")
    sched = doc["schedule"]
    if sched["kind"] not in SCHEDULE_KINDS:
        raise ConfigError(f"schedule.kind must be one of {SCHEDULE_KINDS}")
    if sched["T"] < 1:
        raise ConfigError("schedule.T must be >= 1")

    items = _build(ItemSpec, doc["items"], "items")
    if items.sets_per_prompt < 1 or items.items_per_set < 2:
        raise ConfigError("items: need sets_per_prompt >= 1 and items_per_set >= 2")
    if doc["heldout_sets_per_prompt"] < 1:
        raise ConfigError("heldout_sets_per_prompt must be >= 1")
    annot = _build(AnnotationSpec, doc["annotation"], "annotation")
    if annot.n_annotators < 1 or annot.noise < 0:
        raise ConfigError("annotation: need n_annotators >= 1 and noise >= 0")

    r = doc["reward"]
    train = _build(RewardTrainConfig, r, "reward", seed=doc["seed"])
    spec = _build(RewardSpec, r, "reward", train=train)
    if r["activation"] not in ("tanh", "relu"):
        raise ConfigError("reward.activation must be 'tanh' or 'relu'")
    for key in ("train_pairs", "heldout_pairs", "spearman_items"):
        if r[key] < 1:
            raise ConfigError(f"reward.{key} must be >= 1")
    sp = r["spearman_prompt"]
    sp = doc["seed"] % world.num_prompts if sp is None else int(sp)

    distill = {}
    for mode in MODES:
        cfg = _build(DistillConfig, doc["distill"][mode], f"distill.{mode}", seed=0)
        try:
            cfg.threshold(make_schedule(sched["kind"], sched["T"]))
        except ValueError as exc:
            raise ConfigError(f"distill.{mode}: {exc}") from exc
        distill[mode] = cfg

    ev = doc["eval"]
    prompts = [doc["optimize"]["prompt"], sp, *ev["prompts"]]
    bad = [p for p in prompts if not isinstance(p, int) or not 0 <= p < world.num_prompts]
    if bad:
        raise ConfigError(f"prompt ids {bad} do not resolve (have {world.num_prompts} prompts)")
    if not ev["prompts"] or not ev["seeds"]:
        raise ConfigError("eval.prompts and eval.seeds must be non-empty")
    if any(not isinstance(s, int) or s < 0 for s in ev["seeds"]):
        raise ConfigError("eval.seeds must be non-negative integers")
    if doc["optimize"]["init_scale"] < 0:
        raise ConfigError("optimize.init_scale must be >= 0")

    return ExperimentConfig(
        raw=doc, seed=doc["seed"], world=world, schedule_kind=sched["kind"], T=sched["T"],
        items=items, heldout_sets_per_prompt=doc["heldout_sets_per_prompt"],
        annotation=annot, reward=spec, train_pairs=r["train_pairs"],
        heldout_pairs=r["heldout_pairs"], spearman_items=r["spearman_items"],
        spearman_prompt=sp, distill=distill, prompt=doc["optimize"]["prompt"],
        init_scale=float(doc["optimize"]["init_scale"]), eval_prompts=list(ev["prompts"]),
        eval_seeds=list(ev["seeds"]), k_factor=float(ev["k_factor"]),
        elo_initial=float(ev["initial"]), out=doc["out"])


def load(path=None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    if path is None:
        return resolve(None, seed, out)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return resolve(doc, seed, out)
