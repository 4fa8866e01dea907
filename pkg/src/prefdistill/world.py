"""Synthetic prompts: two-mode priors, hidden preferences and candidate items.

Each prompt owns a smooth asset per prior mode. The hidden target sits
near mode B but not on it, so the prior alone never matches preference.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffusion import PromptPrior
from .preference import GroundTruthUtility
from .scene import Asset, CameraRig, make_rig, render_all


@dataclass
class WorldSpec:
    D: int = 8
    K: int = 4
    num_prompts: int = 4
    mode_scale: float = 0.7
    mode_var: float = 0.05
    mode_weights: tuple = (0.5, 0.5)
    target_shift: float = 0.3
    criterion_weights: tuple = (0.5, 0.25, 0.25)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mode_weights"] = list(self.mode_weights)
        d["criterion_weights"] = list(self.criterion_weights)
        return d


@dataclass
class World:
    spec: WorldSpec
    rig: CameraRig
    modes: list  # per prompt: (K_modes, D) asset parameters
    priors: list  # PromptPrior per prompt
    targets: list  # asset parameters of each hidden target
    gts: list  # GroundTruthUtility per prompt


def smooth_vector(rng, D, scale, harmonics=3):
    """Low-frequency random signal over D pixels."""
    f = np.arange(D) / D
    out = np.zeros(D)
    for k in range(harmonics):
        out += rng.standard_normal() * np.cos(2 * np.pi * k * f)
        out += rng.standard_normal() * np.sin(2 * np.pi * k * f)
    return scale * out / np.sqrt(harmonics)


def build_world(spec: WorldSpec, rng) -> World:
    rig = make_rig(spec.D, spec.K)
    modes, priors, targets, gts = [], [], [], []
    n_modes = len(spec.mode_weights)
    for p in range(spec.num_prompts):
        thetas = np.array([smooth_vector(rng, spec.D, spec.mode_scale) for _ in range(n_modes)])
        means = np.array([render_all(Asset(th), rig).reshape(-1) for th in thetas])
        priors.append(PromptPrior(p, np.array(spec.mode_weights, dtype=float), means,
                                  np.full_like(means, spec.mode_var)))
        target = thetas[-1] + smooth_vector(rng, spec.D, spec.target_shift)
        modes.append(thetas)
        targets.append(target)
        gts.append(GroundTruthUtility(render_all(Asset(target), rig), rig,
                                      tuple(spec.criterion_weights)))
    return World(spec, rig, modes, priors, targets, gts)


@dataclass
class ItemSpec:
    sets_per_prompt: int = 20
    items_per_set: int = 9
    asset_noise: float = 0.4
    view_noise: float = 0.05
    collapse_prob: float = 0.1

    def to_json(self) -> dict:
        return asdict(self)


def sample_item(world: World, prompt: int, rng, asset_noise, view_noise):
    mode = world.modes[prompt][rng.integers(len(world.modes[prompt]))]
    theta = mode + asset_noise * rng.standard_normal(world.spec.D)
    return render_all(Asset(theta), world.rig) + view_noise * rng.standard_normal(
        (world.spec.K, world.spec.D))


def sample_item_sets(world: World, spec: ItemSpec, rng, start_id=0):
    """{(prompt, set_index): [(item_id, stack), ...]} with globally unique ids.

    A collapsed set repeats one candidate with tiny jitter, the
    mode-collapse case the spread filter is there to drop.
    """
    sets, next_id = {}, start_id
    for p in range(world.spec.num_prompts):
        for s in range(spec.sets_per_prompt):
            collapsed = rng.random() < spec.collapse_prob
            base = sample_item(world, p, rng, spec.asset_noise, spec.view_noise)
            items = []
            for _ in range(spec.items_per_set):
                if collapsed:
                    x = base + 1e-4 * rng.standard_normal(base.shape)
                else:
                    x = sample_item(world, p, rng, spec.asset_noise, spec.view_noise)
                items.append((next_id, x))
                next_id += 1
            sets[(p, s)] = items
    return sets
