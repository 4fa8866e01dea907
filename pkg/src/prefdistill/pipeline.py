"""Library-level stages behind the CLI: data, reward, distillation runs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import preference as pref
from .evaluation import RankVector, spearman
from .numcore import make_rng
from .preference import ComparisonPair
from .reward import (PairArrays, RewardTrainConfig, init_reward_net, pair_arrays,
                     pairwise_accuracy, reward_scores, train_reward)
from .world import ItemSpec, World, sample_item_sets


@dataclass
class AnnotationSpec:
    n_annotators: int = 3
    noise: float = 0.3
    min_quality: float = -3.0
    min_spread: float = 0.02


@dataclass
class Dataset:
    images: dict  # item_id -> (K, D)
    item_prompt: dict  # item_id -> prompt id
    records: list = field(default_factory=list)
    rankings: list = field(default_factory=list)
    pairs: list = field(default_factory=list)
    sets_total: int = 0
    sets_kept: int = 0

    @property
    def n_flagged(self) -> int:
        return sum(p.flagged for p in self.pairs)


def annotate_set(world: World, prompt: int, items, annot: AnnotationSpec, rng):
    """Rate, rank, detect and resolve conflicts, then cut comparison pairs."""
    gt = world.gts[prompt]
    ids = [iid for iid, _ in items]
    images = dict(items)
    records = pref.simulate_ratings(gt, [x for _, x in items],
                                    pref.make_annotators(annot.n_annotators, annot.noise),
                                    rng, prompt_id=prompt, item_ids=ids)
    verdicts = pref.annotator_verdicts(records)
    flagged = pref.detect_conflicts(verdicts)
    resolved = pref.resolve_conflicts(verdicts, flagged,
                                      lambda i: pref.utility(gt, images[i]))
    if flagged:
        ranking = pref.resolved_ranking(prompt, ids, resolved)
    else:
        ranking = pref.rank_items(records)
    pairs = pref.extract_pairs(ranking, world.rig, flagged)
    return records, ranking, pairs


def generate_dataset(world: World, items: ItemSpec, annot: AnnotationSpec, rng,
                     start_id=0) -> Dataset:
    sets = sample_item_sets(world, items, rng, start_id)
    kept = pref.filter_items(sets, lambda key: world.gts[key[0]],
                             annot.min_quality, annot.min_spread)
    ds = Dataset({}, {}, sets_total=len(sets), sets_kept=len(kept))
    for (prompt, _), members in sorted(kept.items()):
        records, ranking, pairs = annotate_set(world, prompt, members, annot, rng)
        for iid, x in members:
            ds.images[iid] = x
            ds.item_prompt[iid] = prompt
        ds.records.extend(records)
        ds.rankings.append(ranking)
        ds.pairs.extend(pairs)
    return ds


def truth_oriented(world: World, pairs, images: dict, limit=None, rng=None) -> list:
    """Pairs re-oriented by the hidden utility, exact utility ties dropped."""
    out = []
    for p in pairs:
        gt = world.gts[p.prompt_id]
        uw = pref.utility(gt, images[p.winner])
        ul = pref.utility(gt, images[p.loser])
        if uw == ul:
            continue
        w, l = (p.winner, p.loser) if uw > ul else (p.loser, p.winner)
        out.append(ComparisonPair(p.prompt_id, w, l, p.cams_w, p.cams_l, p.flagged))
    return subsample(out, limit, rng)


def subsample(seq, limit, rng=None) -> list:
    """Order-preserving draw of ``limit`` entries without replacement."""
    seq = list(seq)
    if limit is None or len(seq) <= limit:
        return seq
    rng = rng or make_rng(0, "subsample")
    idx = np.sort(rng.choice(len(seq), size=limit, replace=False))
    return [seq[i] for i in idx]


@dataclass
class RewardSpec:
    train: RewardTrainConfig
    prompt_dim: int = 4
    cam_dim: int = 4
    encoder_hidden: tuple = (256, 32)
    head_hidden: tuple = (16,)
    feature_gain: float = 1.0
    freeze_head: bool = False
    activation: str = "relu"


def build_and_train_reward(world: World, train: PairArrays, spec: RewardSpec, seed: int):
    net = init_reward_net(world.spec.num_prompts, world.spec.K, world.spec.D,
                          make_rng(seed, "reward", "init"), spec.prompt_dim, spec.cam_dim,
                          tuple(spec.encoder_hidden), tuple(spec.head_hidden),
                          spec.train.freeze_fraction, spec.freeze_head,
                          feature_gain=spec.feature_gain, activation=spec.activation)
    return train_reward(net, train, spec.train)


def heldout_accuracy(net, world: World, pairs, images: dict, n_pairs: int, rng) -> float:
    """Accuracy against the hidden utility on ``n_pairs`` held-out pairs."""
    chosen = truth_oriented(world, pairs, images, n_pairs, rng)
    return pairwise_accuracy(net, pair_arrays(chosen, images))


def utility_spearman(net, world: World, prompt: int, items: dict, n_items: int, rng) -> float:
    """Rank agreement of reward score and hidden utility over ``n_items`` items."""
    ids = subsample(sorted(items), n_items, rng)
    if len(ids) < 2:
        raise ValueError(f"need at least two items for prompt {prompt}, got {len(ids)}")
    x = np.array([items[i] for i in ids])
    scores = reward_scores(net, [prompt] * len(ids), x)
    utils = [pref.utility(world.gts[prompt], xi) for xi in x]
    return spearman(RankVector.from_scores(ids, scores), RankVector.from_scores(ids, utils))
