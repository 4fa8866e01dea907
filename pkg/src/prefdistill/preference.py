"""Simulated annotation pipeline over a hidden ground-truth utility.

Annotators rate each item 1..6 on alignment, quality and multi-view
consistency; items are ranked by average score; pairwise verdicts are
checked for disagreement and intransitivity, and flagged pairs are
re-labelled by the noiseless utility before comparison pairs are cut.
"""
from __future__ import annotations

import itertools
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .numcore import ShapeError
from .scene import CameraRig

CRITERIA = ("alignment", "quality", "consistency")
DEFAULT_WEIGHTS = (0.5, 0.25, 0.25)
EXHAUSTIVE_CYCLE_LIMIT = 12
SHORT_CYCLE_LEN = 4


@dataclass(frozen=True)
class GroundTruthUtility:
    target: np.ndarray  # (K, D)
    rig: CameraRig
    weights: tuple = DEFAULT_WEIGHTS

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (3,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("criterion weights must be 3 positive reals summing to 1")
        tgt = np.asarray(self.target, dtype=np.float64)
        if tgt.shape != (self.rig.K, self.rig.D):
            raise ShapeError(f"target shape {tgt.shape} != {(self.rig.K, self.rig.D)}")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))
        object.__setattr__(self, "target", tgt)

    def to_json(self) -> dict:
        return {"target": self.target.tolist(), "weights": list(self.weights)}


def criterion_terms(gt: GroundTruthUtility, x) -> np.ndarray:
    """Non-negative penalty per criterion: (misalignment, roughness, view spread)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != gt.target.shape:
        raise ShapeError(f"image stack shape {x.shape} != {gt.target.shape}")
    align = np.mean((x - gt.target) ** 2)
    rough = np.mean(np.diff(x, axis=1) ** 2) if x.shape[1] > 1 else 0.0
    canon = np.einsum("kji,kj->ki", gt.rig.transforms, x)  # P_k^T x_k
    spread = np.mean((canon - canon.mean(axis=0)) ** 2)
    return np.array([align, rough, spread])


def utility(gt: GroundTruthUtility, x) -> float:
    return -float(np.dot(gt.weights, criterion_terms(gt, x)))


# --------------------------------------------------------------------------- ratings

@dataclass(frozen=True)
class Annotator:
    annotator_id: int
    noise: float = 0.0


@dataclass(frozen=True)
class RatingRecord:
    prompt_id: int
    item_id: int
    annotator_id: int
    scores: tuple

    def __post_init__(self):
        if len(self.scores) != 3 or any(s not in range(1, 7) for s in self.scores):
            raise ValueError(f"scores must be three integers in 1..6, got {self.scores}")

    @property
    def average(self) -> float:
        return sum(self.scores) / 3.0

    def to_json(self) -> dict:
        return {"prompt_id": self.prompt_id, "item_id": self.item_id,
                "annotator_id": self.annotator_id, "scores": list(self.scores),
                "average": self.average}


def make_annotators(n: int, noise: float) -> list[Annotator]:
    return [Annotator(i, noise) for i in range(n)]


def rating_targets(gt, items) -> np.ndarray:
    """Noise-free (n, 3) criterion scores on the continuous 1..6 scale.

    Criterion c contributes 3*w_c*(-term_c); all criteria share one affine
    map per item set (the widest criterion spans 1..6), so the mean of
    the three scores is an increasing affine function of the utility.
    A set with no spread at all sits at 3.5.
    """
    contrib = -3.0 * np.asarray(gt.weights) * np.array([criterion_terms(gt, x) for x in items])
    lo = contrib.min(axis=0)
    span = float((contrib.max(axis=0) - lo).max())
    if span <= 0.0:
        return np.full(contrib.shape, 3.5)
    return 1.0 + 5.0 * (contrib - lo) / span


def simulate_ratings(gt, items, annotators, rng, prompt_id=0, item_ids=None):
    """Integer 1..6 scores per annotator, item and criterion.

    Scores are :func:`rating_targets` plus Gaussian annotator noise,
    rounded half-up and clamped to 1..6.
    """
    if len(items) == 0:
        raise ValueError("cannot rate an empty item set")
    if not annotators:
        raise ValueError("need at least one annotator")
    item_ids = list(range(len(items))) if item_ids is None else list(item_ids)
    scaled = rating_targets(gt, items)
    records = []
    for ann in annotators:
        if ann.noise < 0:
            raise ValueError("annotator noise must be >= 0")
        noisy = scaled + (ann.noise * rng.standard_normal(scaled.shape) if ann.noise > 0 else 0.0)
        scores = np.clip(np.floor(noisy + 0.5), 1, 6).astype(int)
        for i, iid in enumerate(item_ids):
            records.append(RatingRecord(prompt_id, iid, ann.annotator_id,
                                        tuple(int(s) for s in scores[i])))
    return records


# --------------------------------------------------------------------------- ranking

@dataclass(frozen=True)
class RankingSet:
    prompt_id: int
    order: tuple  # best -> worst
    tie_groups: tuple  # tuple of tuples, best group first

    def group_of(self) -> dict:
        return {item: g for g, grp in enumerate(self.tie_groups) for item in grp}

    def to_json(self) -> dict:
        return {"prompt_id": self.prompt_id, "order": list(self.order),
                "tie_groups": [list(g) for g in self.tie_groups]}


def _ranking_from_scores(prompt_id, scores: dict) -> RankingSet:
    items = sorted(scores, key=lambda i: (-scores[i], i))
    groups = []
    for item in items:
        if groups and scores[groups[-1][0]] == scores[item]:
            groups[-1].append(item)
        else:
            groups.append([item])
    return RankingSet(prompt_id, tuple(items), tuple(tuple(g) for g in groups))


def item_means(records) -> dict:
    per = defaultdict(list)
    for r in records:
        per[r.item_id].append(r.average)
    return {i: float(np.mean(v)) for i, v in per.items()}


def rank_items(records) -> RankingSet:
    """Order items by the mean of their annotators' averages; exact ties grouped."""
    records = list(records)
    prompts = {r.prompt_id for r in records}
    if len(prompts) > 1:
        raise ValueError(f"records span several prompts: {sorted(prompts)}")
    return _ranking_from_scores(prompts.pop() if prompts else 0, item_means(records))


def annotator_verdicts(records) -> dict:
    """Per annotator, the (winner, loser) pairs implied by their averages."""
    per = defaultdict(dict)
    for r in records:
        per[r.annotator_id][r.item_id] = r.average
    out = {}
    for ann, avgs in sorted(per.items()):
        vs = []
        for i, j in itertools.combinations(sorted(avgs), 2):
            if avgs[i] > avgs[j]:
                vs.append((i, j))
            elif avgs[j] > avgs[i]:
                vs.append((j, i))
        out[ann] = vs
    return out


# --------------------------------------------------------------------------- conflicts

def majority_edges(verdicts: dict) -> dict:
    """Unordered pair -> (winner, loser) for pairs with a strict majority."""
    votes = defaultdict(int)
    for vs in verdicts.values():
        for w, l in vs:
            votes[(w, l)] += 1
    edges = {}
    for (w, l), n in votes.items():
        if n > votes.get((l, w), 0):
            edges[frozenset((w, l))] = (w, l)
    return edges


def _reachable(adj, src, dst, max_len=None) -> bool:
    frontier, seen, depth = [src], {src}, 0
    while frontier and (max_len is None or depth < max_len):
        depth += 1
        nxt = []
        for u in frontier:
            for v in adj.get(u, ()):
                if v == dst:
                    return True
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return False


def cyclic_pairs(edges: dict) -> set:
    """Pairs whose majority edge lies on a directed cycle.

    Exhaustive for up to 12 items; above that only cycles of length <= 4.
    """
    adj = defaultdict(set)
    nodes = set()
    for w, l in edges.values():
        adj[w].add(l)
        nodes.update((w, l))
    max_len = None if len(nodes) <= EXHAUSTIVE_CYCLE_LIMIT else SHORT_CYCLE_LEN - 1
    return {key for key, (w, l) in edges.items() if _reachable(adj, l, w, max_len)}


def detect_conflicts(verdicts: dict) -> list:
    """Flag pairs annotators disagree on or whose majority edge closes a cycle.

    ``verdicts`` maps annotator id -> iterable of (winner, loser).
    Returns sorted (a, b) tuples with a < b.
    """
    seen_dir = defaultdict(set)
    for vs in verdicts.values():
        for w, l in vs:
            if w == l:
                raise ValueError(f"item {w} compared with itself")
            seen_dir[frozenset((w, l))].add((w, l))
    flagged = {k for k, dirs in seen_dir.items() if len(dirs) > 1}
    flagged |= cyclic_pairs(majority_edges(verdicts))
    return sorted(tuple(sorted(k)) for k in flagged)


@dataclass
class ResolvedVerdicts:
    """Majority graph after expert re-checks; ``corrected`` pairs were flagged."""
    edges: dict
    corrected: set = field(default_factory=set)

    def as_verdicts(self) -> dict:
        return {0: sorted(self.edges.values())}


def resolve_conflicts(verdicts: dict, flagged, oracle) -> ResolvedVerdicts:
    """Re-label flagged pairs with ``oracle(item) -> utility`` until acyclic.

    A re-label can close a new cycle through unflagged edges, so the
    re-check repeats on any edge still on a cycle. Utility ties drop the edge.
    """
    edges = majority_edges(verdicts)
    corrected = set()
    todo = {frozenset(p) for p in flagged}
    while todo:
        for key in todo:
            a, b = sorted(key)
            ua, ub = oracle(a), oracle(b)
            if ua > ub:
                edges[key] = (a, b)
            elif ub > ua:
                edges[key] = (b, a)
            else:
                edges.pop(key, None)
            corrected.add(key)
        todo = cyclic_pairs(edges) - corrected
        if not todo and cyclic_pairs(edges):
            raise RuntimeError("cycle made only of oracle-labelled edges")
    return ResolvedVerdicts(edges, corrected)


def resolved_ranking(prompt_id, items, resolved: ResolvedVerdicts) -> RankingSet:
    """Copeland order (wins - losses) of the resolved graph; equal scores tie."""
    score = {i: 0 for i in items}
    for w, l in resolved.edges.values():
        score[w] += 1
        score[l] -= 1
    return _ranking_from_scores(prompt_id, score)


# --------------------------------------------------------------------------- pairs

@dataclass(frozen=True)
class ComparisonPair:
    prompt_id: int
    winner: int
    loser: int
    cams_w: tuple
    cams_l: tuple
    flagged: bool = False

    def __post_init__(self):
        if self.winner == self.loser:
            raise ValueError("winner and loser must differ")

    def to_json(self) -> dict:
        return {"prompt_id": self.prompt_id, "winner": self.winner, "loser": self.loser,
                "cams_w": list(self.cams_w), "cams_l": list(self.cams_l),
                "flagged": self.flagged}

    @classmethod
    def from_json(cls, doc) -> "ComparisonPair":
        return cls(int(doc["prompt_id"]), int(doc["winner"]), int(doc["loser"]),
                   tuple(doc["cams_w"]), tuple(doc["cams_l"]), bool(doc["flagged"]))


def extract_pairs(ranking: RankingSet, rig: CameraRig, flagged=()) -> list:
    """One pair per unordered item pair in different tie groups."""
    group = ranking.group_of()
    cams = tuple(range(rig.K))
    flagged = {frozenset(p) for p in flagged}
    out = []
    for i, a in enumerate(ranking.order):
        for b in ranking.order[i + 1:]:
            if group[a] == group[b]:
                continue
            w, l = (a, b) if group[a] < group[b] else (b, a)
            out.append(ComparisonPair(ranking.prompt_id, w, l, cams, cams,
                                      frozenset((a, b)) in flagged))
    return out


def write_pairs_jsonl(pairs, path):
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def read_pairs_jsonl(path) -> list:
    with open(path) as fh:
        return [ComparisonPair.from_json(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------- filtering

MIN_SET_SIZE, MAX_SET_SIZE = 4, 10


def filter_items(item_sets, gt_for, min_quality, min_spread):
    """Drop weak items, then whole sets that collapsed or fell outside 4..10 items.

    ``item_sets`` maps a set key to a list of (item_id, image stack);
    ``gt_for(key)`` gives that set's utility. Returns the surviving mapping.
    """
    kept = {}
    for key, items in item_sets.items():
        gt = gt_for(key)
        scored = [(iid, x, utility(gt, x)) for iid, x in items]
        good = [(iid, x, u) for iid, x, u in scored if u >= min_quality]
        if not MIN_SET_SIZE <= len(good) <= MAX_SET_SIZE:
            continue
        us = [u for _, _, u in good]
        if max(us) - min(us) < min_spread:
            continue
        kept[key] = [(iid, x) for iid, x, _ in good]
    return kept
