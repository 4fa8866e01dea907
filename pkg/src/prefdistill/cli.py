"""Command line: gen-data, train-reward, optimize, eval and all.

Every command reads and writes one output directory and refreshes its
``manifest.json``. Exit status is 0 on success, 2 for invalid
configuration or missing inputs, 1 for failures while running.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from . import preference as pref
from .config import ConfigError, ExperimentConfig, config_hash, load
from .diffusion import PromptPrior
from .distill import MODES, optimize
from .evaluation import (RunOutcome, bar_chart_svg, compare_methods, line_chart_svg,
                         summarize)
from .numcore import make_rng
from .pipeline import (build_and_train_reward, generate_dataset, heldout_accuracy, subsample,
                       utility_spearman)
from .reward import RewardNet, pair_arrays, reward_score
from .scene import Asset, CameraRig, render_all
from .world import World, WorldSpec, build_world

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    """A precondition on inputs failed (missing file, empty dataset...)."""


# --------------------------------------------------------------------------- io

def write_json(path: Path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path: Path, what: str):
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    with open(path) as fh:
        return json.load(fh)


def write_jsonl(path: Path, docs):
    with open(path, "w") as fh:
        for d in docs:
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def save_world(world: World, out: Path):
    write_json(out / "priors.json", [p.to_json() for p in world.priors])
    write_json(out / "rig.json", world.rig.to_json())
    write_json(out / "world.json", {"spec": world.spec.to_json(),
                                    "modes": [m.tolist() for m in world.modes],
                                    "targets": [t.tolist() for t in world.targets]})


def load_world(out: Path) -> World:
    doc = read_json(out / "world.json", "world description (run gen-data first)")
    spec_doc = dict(doc["spec"])
    spec_doc["mode_weights"] = tuple(spec_doc["mode_weights"])
    spec_doc["criterion_weights"] = tuple(spec_doc["criterion_weights"])
    spec = WorldSpec(**spec_doc)
    rig = CameraRig.from_json(read_json(out / "rig.json", "camera rig"))
    priors = [PromptPrior.from_json(p) for p in read_json(out / "priors.json", "priors")]
    targets = [np.array(t, dtype=float) for t in doc["targets"]]
    gts = [pref.GroundTruthUtility(render_all(Asset(t), rig), rig, spec.criterion_weights)
           for t in targets]
    return World(spec, rig, [np.array(m, dtype=float) for m in doc["modes"]], priors,
                 targets, gts)


def load_items(out: Path):
    doc = read_json(out / "items.json", "item file (run gen-data first)")
    images = {it["id"]: np.array(it["image"], dtype=float) for it in doc}
    meta = {it["id"]: (it["prompt"], it["split"]) for it in doc}
    return images, meta


def read_pairs(path: Path, what: str) -> list:
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return pref.read_pairs_jsonl(path)


def load_checkpoint(out: Path) -> RewardNet:
    path = out / "checkpoint.json"
    if not path.exists():
        raise UsageError(f"reward checkpoint not found: {path} (run train-reward first)")
    with open(path) as fh:
        return RewardNet.from_json(json.load(fh))


# --------------------------------------------------------------------------- manifest

def versions() -> dict:
    try:
        import numba
        numba_version = numba.__version__
    except ImportError:
        numba_version = None
    return {"package": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "numba": numba_version,
            "kernel_backend": _kernels.BACKEND}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def update_manifest(cfg: ExperimentConfig, out: Path, stage: str, status: str,
                    seconds: float):
    """Record a stage and re-list every file in ``out`` with its hash."""
    path = out / MANIFEST
    doc = {}
    if path.exists():
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("config_hash") != cfg.config_hash():
            doc = {}  # a different experiment wrote here before: start over
    stages = doc.get("stages", {})
    stages[stage] = {"status": status, "wall_clock_s": round(seconds, 3)}
    files = {p.relative_to(out).as_posix(): {"bytes": p.stat().st_size, "sha256": _sha256(p)}
             for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST}
    body = {k: v for k, v in cfg.raw.items() if k != "out"}
    write_json(path, {"config_hash": cfg.config_hash(), "config": body,
                      "versions": versions(), "stages": stages, "files": files})


def strip_wall_clock(manifest: dict) -> dict:
    """Manifest without timing fields, for byte-level run comparisons."""
    doc = json.loads(json.dumps(manifest))
    for st in doc.get("stages", {}).values():
        st.pop("wall_clock_s", None)
    return doc


# --------------------------------------------------------------------------- stages

def gen_data(cfg: ExperimentConfig, out: Path, log=print) -> dict:
    world = build_world(cfg.world, make_rng(cfg.seed, "data", "world"))
    train = generate_dataset(world, cfg.items, cfg.annotation, make_rng(cfg.seed, "data", "train"))
    held_start = cfg.world.num_prompts * cfg.items.sets_per_prompt * cfg.items.items_per_set
    held = generate_dataset(world, replace(cfg.items, sets_per_prompt=cfg.heldout_sets_per_prompt),
                            cfg.annotation, make_rng(cfg.seed, "data", "heldout"),
                            start_id=held_start)
    save_world(world, out)
    items = [{"id": iid, "prompt": ds.item_prompt[iid], "split": split,
              "image": ds.images[iid].tolist()}
             for split, ds in (("train", train), ("heldout", held))
             for iid in sorted(ds.images)]
    write_json(out / "items.json", items)
    write_jsonl(out / "ratings.jsonl", [r.to_json() for r in train.records])
    write_json(out / "rankings.json", [r.to_json() for r in train.rankings])
    pref.write_pairs_jsonl(train.pairs, out / "pairs.jsonl")
    pref.write_pairs_jsonl(held.pairs, out / "heldout_pairs.jsonl")
    counts = {"sets_total": train.sets_total, "sets_kept": train.sets_kept,
              "items": len(train.images), "ratings": len(train.records),
              "pairs": len(train.pairs), "flagged_pairs": train.n_flagged,
              "heldout_items": len(held.images), "heldout_pairs": len(held.pairs)}
    write_json(out / "data_summary.json", counts)
    log(" ".join(f"{k}={v}" for k, v in counts.items()))
    return counts


def train_reward_stage(cfg: ExperimentConfig, out: Path, log=print) -> dict:
    world = load_world(out)
    images, meta = load_items(out)
    pairs = read_pairs(out / "pairs.jsonl", "pair file (run gen-data first)")
    if not pairs:
        raise UsageError(f"pair file {out / 'pairs.jsonl'} contains no pairs")
    held = read_pairs(out / "heldout_pairs.jsonl", "held-out pair file")
    if not held:
        raise UsageError(f"held-out pair file {out / 'heldout_pairs.jsonl'} contains no pairs")
    chosen = subsample(pairs, cfg.train_pairs, make_rng(cfg.seed, "reward", "subsample"))
    res = build_and_train_reward(world, pair_arrays(chosen, images), cfg.reward, cfg.seed)
    acc = heldout_accuracy(res.net, world, held, images, cfg.heldout_pairs,
                           make_rng(cfg.seed, "eval", "heldout-pairs"))
    p = cfg.spearman_prompt
    pool = {i: x for i, x in images.items() if meta[i] == (p, "heldout")}
    rho = utility_spearman(res.net, world, p, pool, cfg.spearman_items,
                           make_rng(cfg.seed, "eval", "spearman-items"))
    metrics = {"train_pairs": len(chosen), "heldout_accuracy": acc,
               "spearman_prompt": p, "spearman_utility": rho,
               "final_train_loss": res.curve[-1] if res.curve else None}
    write_json(out / "checkpoint.json", res.net.to_json(cfg.raw["reward"], metrics))
    with open(out / "reward_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(res.curve):
            w.writerow([i + 1, repr(float(v))])
    (out / "reward_curve.svg").write_text(
        line_chart_svg({"train loss": res.curve}, "reward model training loss"))
    write_json(out / "reward_metrics.json", metrics)
    log(f"train_pairs={len(chosen)} heldout_accuracy={acc:.4f} spearman={rho:.4f}")
    return metrics


def _init_asset(cfg: ExperimentConfig, *names) -> Asset:
    rng = make_rng(cfg.seed, *names)
    return Asset(cfg.init_scale * rng.standard_normal(cfg.world.D))


def judge(world: World, net: RewardNet | None, prompt: int, asset: Asset):
    x = render_all(asset, world.rig)
    u = pref.utility(world.gts[prompt], x)
    r = reward_score(net, prompt, x) if net is not None else float("nan")
    return u, r


def optimize_stage(cfg: ExperimentConfig, out: Path, mode: str, prompt: int | None = None,
                   log=print) -> dict:
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    prompt = cfg.prompt if prompt is None else prompt
    if not 0 <= prompt < cfg.world.num_prompts:
        raise UsageError(f"prompt {prompt} does not exist")
    ckpt = out / "checkpoint.json"
    if mode == "dreamfl" and not ckpt.exists():
        raise UsageError(f"dreamfl mode needs a reward checkpoint; {ckpt} not found")
    world = load_world(out)
    net = load_checkpoint(out) if ckpt.exists() else None
    res = optimize(_init_asset(cfg, "distill", "init", f"prompt-{prompt}"), world.rig,
                   world.priors[prompt], cfg.schedule(), cfg.distill_config(mode, cfg.seed),
                   mode, net=net if mode == "dreamfl" else None)
    u, r = judge(world, net, prompt, res.asset)
    doc = {"mode": mode, "prompt": prompt, "seed": cfg.seed, "theta": res.asset.theta.tolist(),
           "render": render_all(res.asset, world.rig).tolist(), "utility": u,
           "reward": None if net is None else r, "steps": len(res.trace)}
    write_json(out / f"asset_{mode}.json", doc)
    res.trace.write_csv(out / f"trace_{mode}.csv")
    (out / f"loss_{mode}.svg").write_text(line_chart_svg(
        {"L_sds": res.trace.column("L_sds"), "loss": res.trace.column("loss")},
        f"{mode} per-step loss"))
    log(f"mode={mode} prompt={prompt} steps={len(res.trace)} utility={u:.4f}")
    return doc


def _outcomes_from_runs(world, net, runs) -> list:
    missing = [str(d) for d in runs if not Path(d).is_dir()]
    if missing:
        raise UsageError("run directories not found: " + ", ".join(missing))
    incomplete = [f"{d}/asset_{m}.json" for d in runs for m in MODES
                  if not (Path(d) / f"asset_{m}.json").exists()]
    if incomplete:
        raise UsageError("incomplete runs, missing: " + ", ".join(incomplete))
    outcomes = []
    for idx, d in enumerate(runs):
        for mode in MODES:
            with open(Path(d) / f"asset_{mode}.json") as fh:
                doc = json.load(fh)
            u, r = judge(world, net, doc["prompt"], Asset(np.array(doc["theta"])))
            outcomes.append(RunOutcome(mode, doc["prompt"], idx, u, r))
    return outcomes


def eval_stage(cfg: ExperimentConfig, out: Path, runs=None, log=print) -> dict:
    world = load_world(out)
    net = load_checkpoint(out)
    if runs:
        outcomes = _outcomes_from_runs(world, net, runs)
        report = summarize(outcomes, list(MODES), len({o.prompt for o in outcomes}),
                           len(runs), cfg.k_factor, cfg.elo_initial)
    else:
        sched = cfg.schedule()

        def run(mode, prompt, seed):
            tag = (f"prompt-{prompt}", f"seed-{seed}")
            dseed = int(make_rng(cfg.seed, "eval", "distill", *tag).integers(2 ** 31))
            return optimize(_init_asset(cfg, "eval", "init", *tag), world.rig,
                            world.priors[prompt], sched, cfg.distill_config(mode, dseed),
                            mode, net=net if mode == "dreamfl" else None).asset

        report = compare_methods(cfg.eval_prompts, cfg.eval_seeds, {m: m for m in MODES},
                                 run, lambda p, a: judge(world, net, p, a))
        if cfg.k_factor != 32.0 or cfg.elo_initial != 1000.0:
            report = summarize([RunOutcome(**r) for r in report.runs], report.methods,
                               report.n_prompts, report.n_seeds, cfg.k_factor,
                               cfg.elo_initial)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    (out / "elo.svg").write_text(bar_chart_svg(report.elo, "Elo rating", cfg.elo_initial))
    (out / "utility.svg").write_text(bar_chart_svg(report.mean_utility,
                                                   "mean ground-truth utility"))
    log(" ".join(f"{m}: utility={report.mean_utility[m]:.4f} elo={report.elo[m]:.1f}"
                 for m in report.methods) + f" failures={len(report.failures)}")
    return report.to_json()


# --------------------------------------------------------------------------- driver

def _stage(cfg, out, name, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        result = fn(cfg, out, *args, **kw)
    except BaseException:
        update_manifest(cfg, out, name, "failed", time.perf_counter() - t0)
        raise
    update_manifest(cfg, out, name, "ok", time.perf_counter() - t0)
    return result


def run_all(cfg: ExperimentConfig, out: Path, log=print):
    _stage(cfg, out, "gen-data", gen_data, log=log)
    _stage(cfg, out, "train-reward", train_reward_stage, log=log)
    for mode in MODES:
        _stage(cfg, out, f"optimize-{mode}", optimize_stage, mode, log=log)
    _stage(cfg, out, "eval", eval_stage, log=log)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config layered over the defaults")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    parser = argparse.ArgumentParser(prog="prefdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate items, ratings and pairs")
    sub.add_parser("train-reward", parents=[common], help="fit the reward model")
    p = sub.add_parser("optimize", parents=[common], help="distill one asset")
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--prompt", type=int, help="prompt id (default: config optimize.prompt)")
    p = sub.add_parser("eval", parents=[common], help="compare sds and dreamfl")
    p.add_argument("--runs", nargs="+", help="judge assets from these run directories "
                                             "instead of running a fresh sweep")
    sub.add_parser("all", parents=[common], help="every stage in order")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config, args.seed, args.out)
        if args.command == "show-config":
            print(json.dumps(cfg.raw, indent=1, sort_keys=True))
            return EXIT_OK
        out = Path(cfg.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {out}: {exc}") from exc
        if args.command == "gen-data":
            _stage(cfg, out, "gen-data", gen_data)
        elif args.command == "train-reward":
            _stage(cfg, out, "train-reward", train_reward_stage)
        elif args.command == "optimize":
            _stage(cfg, out, f"optimize-{args.mode}", optimize_stage, args.mode, args.prompt)
        elif args.command == "eval":
            _stage(cfg, out, "eval", eval_stage, args.runs)
        elif args.command == "all":
            run_all(cfg, out)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported, mapped to exit 1
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


__all__ = ["main", "config_hash", "strip_wall_clock", "run_all"]

if __name__ == "__main__":
    sys.exit(main())
