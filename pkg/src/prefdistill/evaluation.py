"""Rank correlation, Elo tournaments and method-vs-method reports."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from xml.sax.saxutils import escape

import numpy as np


# --------------------------------------------------------------------------- ranks

@dataclass(frozen=True)
class RankVector:
    labels: tuple
    ranks: tuple

    def __post_init__(self):
        if len(self.labels) != len(self.ranks):
            raise ValueError("labels and ranks differ in length")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels")
        if any(not math.isfinite(r) or r <= 0 for r in self.ranks):
            raise ValueError("ranks must be positive finite reals")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "ranks", tuple(float(r) for r in self.ranks))

    @classmethod
    def from_scores(cls, labels, scores, higher_is_better=True) -> "RankVector":
        """Rank 1 is the best score; ties share their average rank."""
        s = np.asarray(scores, dtype=np.float64)
        return cls(tuple(labels), tuple(rank_data(-s if higher_is_better else s)))

    def as_dict(self) -> dict:
        return dict(zip(self.labels, self.ranks))


def rank_data(values) -> np.ndarray:
    """Ascending 1-based ranks with ties averaged."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Spearman rho between two rankings of the same labels.

    Inputs are RankVectors (or label->rank mappings); rank values are
    re-ranked first so any strictly ordered scale works. Without ties the
    classic 1 - 6 sum d^2 / (n (n^2 - 1)) is used, otherwise the Pearson
    correlation of average ranks. Two all-tied rankings agree perfectly (1.0).
    """
    da = a.as_dict() if isinstance(a, RankVector) else dict(a)
    db = b.as_dict() if isinstance(b, RankVector) else dict(b)
    if set(da) != set(db):
        raise ValueError(f"label sets differ: {sorted(set(da) ^ set(db), key=str)}")
    labels = sorted(da, key=str)
    n = len(labels)
    if n < 2:
        raise ValueError("spearman needs at least two items")
    ra = rank_data([da[k] for k in labels])
    rb = rank_data([db[k] for k in labels])
    tied_a = len(set(ra)) < n
    tied_b = len(set(rb)) < n
    if not (tied_a or tied_b):
        d2 = float(np.sum((ra - rb) ** 2))
        return 1.0 - 6.0 * d2 / (n * (n * n - 1))
    ca, cb = ra - ra.mean(), rb - rb.mean()
    den = math.sqrt(float(ca @ ca) * float(cb @ cb))
    if den == 0.0:
        return 1.0 if np.array_equal(ra, rb) else 0.0
    return float(ca @ cb) / den


# --------------------------------------------------------------------------- elo

OUTCOMES = ("a", "b", "draw")


@dataclass(frozen=True)
class MatchRecord:
    player_a: str
    player_b: str
    outcome: str

    def __post_init__(self):
        if self.player_a == self.player_b:
            raise ValueError("a player cannot play itself")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"outcome must be one of {OUTCOMES}")


@dataclass
class EloTable:
    ratings: dict
    k_factor: float = 32.0
    initial: float = 1000.0

    def ordered(self) -> list:
        return sorted(self.ratings.items(), key=lambda kv: (-kv[1], kv[0]))


def elo_run(matches, k_factor=32.0, initial=1000.0, players=()) -> EloTable:
    """Sequential logistic Elo over ``matches`` in the given order."""
    ratings = {p: float(initial) for p in players}
    for m in matches:
        ra = ratings.setdefault(m.player_a, float(initial))
        rb = ratings.setdefault(m.player_b, float(initial))
        expect_a = 1.0 / (1.0 + 10.0 ** ((rb - ra) / 400.0))
        score_a = {"a": 1.0, "b": 0.0, "draw": 0.5}[m.outcome]
        delta = k_factor * (score_a - expect_a)
        ratings[m.player_a] = ra + delta
        ratings[m.player_b] = rb - delta
    return EloTable(ratings, k_factor, initial)


def win_rate(matches, player) -> float:
    """wins / (wins + losses); draws are ignored."""
    wins = losses = 0
    seen = False
    for m in matches:
        if player == m.player_a:
            seen = True
            wins += m.outcome == "a"
            losses += m.outcome == "b"
        elif player == m.player_b:
            seen = True
            wins += m.outcome == "b"
            losses += m.outcome == "a"
    if not seen:
        raise KeyError(f"player {player!r} has no matches")
    if wins + losses == 0:
        return 0.5
    return wins / (wins + losses)


# --------------------------------------------------------------------------- reports

@dataclass
class RunOutcome:
    method: str
    prompt: int
    seed: int
    utility: float = float("nan")
    reward: float = float("nan")
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class MetricReport:
    methods: list
    n_prompts: int
    n_seeds: int
    mean_utility: dict
    mean_reward: dict
    win_matrix: dict  # method -> method -> fraction of head-to-head wins
    elo: dict
    spearman_judges: float
    failures: list = field(default_factory=list)
    runs: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "mean_utility", "mean_reward", "elo"])
            for m in self.methods:
                w.writerow([m, repr(self.mean_utility[m]), repr(self.mean_reward[m]),
                            repr(self.elo[m])])


def summarize(outcomes, methods, n_prompts, n_seeds, k_factor=32.0, initial=1000.0,
              tie_tol=0.0) -> MetricReport:
    """Aggregate per-run judgements; matches are ordered by (prompt, seed, pair)."""
    ok = [o for o in outcomes if o.ok]
    failures = [asdict(o) for o in outcomes if not o.ok]
    by_key = {(o.method, o.prompt, o.seed): o for o in ok}
    mean_u = {m: _mean([o.utility for o in ok if o.method == m]) for m in methods}
    mean_r = {m: _mean([o.reward for o in ok if o.method == m]) for m in methods}
    matches = []
    wins = {a: {b: 0 for b in methods if b != a} for a in methods}
    games = {a: {b: 0 for b in methods if b != a} for a in methods}
    cells = sorted({(o.prompt, o.seed) for o in ok})
    for prompt, seed in cells:
        for a, b in itertools.combinations(methods, 2):
            oa, ob = by_key.get((a, prompt, seed)), by_key.get((b, prompt, seed))
            if oa is None or ob is None:
                continue
            diff = oa.utility - ob.utility
            outcome = "a" if diff > tie_tol else "b" if diff < -tie_tol else "draw"
            matches.append(MatchRecord(a, b, outcome))
            games[a][b] += 1
            games[b][a] += 1
            wins[a][b] += {"a": 1.0, "b": 0.0, "draw": 0.5}[outcome]
            wins[b][a] += {"a": 0.0, "b": 1.0, "draw": 0.5}[outcome]
    win_matrix = {a: {b: (wins[a][b] / games[a][b] if games[a][b] else float("nan"))
                      for b in wins[a]} for a in methods}
    elo = elo_run(matches, k_factor, initial, players=methods).ratings
    rho = float("nan")
    if len(methods) >= 2 and all(math.isfinite(mean_u[m]) and math.isfinite(mean_r[m])
                                 for m in methods):
        rho = spearman(RankVector.from_scores(methods, [mean_u[m] for m in methods]),
                       RankVector.from_scores(methods, [mean_r[m] for m in methods]))
    return MetricReport(list(methods), n_prompts, n_seeds, mean_u, mean_r, win_matrix,
                        elo, rho, failures, [asdict(o) for o in outcomes])


def _mean(values):
    return float(np.mean(values)) if values else float("nan")


def compare_methods(prompts, seeds, methods: dict, run, judge) -> MetricReport:
    """Run every method on every (prompt, seed) and judge the results.

    ``methods`` maps a name to an opaque config handed to
    ``run(config, prompt, seed) -> asset``; ``judge(prompt, asset)``
    returns (ground-truth utility, reward score). A failing run is kept
    in the report's ``failures`` rather than aborting the sweep.
    """
    if len(methods) < 2:
        raise ValueError("compare_methods needs at least two methods")
    outcomes = []
    for prompt in prompts:
        for seed in seeds:
            for name in sorted(methods):
                try:
                    asset = run(methods[name], prompt, seed)
                    u, r = judge(prompt, asset)
                    outcomes.append(RunOutcome(name, prompt, seed, float(u), float(r)))
                except Exception as exc:  # recorded, the sweep goes on
                    outcomes.append(RunOutcome(name, prompt, seed,
                                               error=f"{type(exc).__name__}: {exc}"))
    return summarize(outcomes, sorted(methods), len(prompts), len(seeds))


# --------------------------------------------------------------------------- svg

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _svg_open(w, h, title):
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}">',
            f'<rect width="{w}" height="{h}" fill="white"/>',
            f'<text x="{w / 2:.1f}" y="18" text-anchor="middle" font-size="14" '
            f'font-family="sans-serif">{escape(title)}</text>']


def line_chart_svg(series: dict, title="", width=640, height=360) -> str:
    """Polyline per named series over its index."""
    left, right, top, bottom = 55, 120, 30, 35
    vals = [v for ys in series.values() for v in ys if math.isfinite(v)]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n = max((len(ys) for ys in series.values()), default=1)
    pw, ph = width - left - right, height - top - bottom
    out = _svg_open(width, height, title)
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>')
    for frac in (0.0, 0.5, 1.0):
        y = top + ph * (1 - frac)
        out.append(f'<text x="{left - 5}" y="{y + 4:.1f}" text-anchor="end" font-size="10" '
                   f'font-family="sans-serif">{lo + frac * (hi - lo):.3g}</text>')
    for i, (name, ys) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{left + pw * j / max(1, n - 1):.2f},{top + ph * (1 - (y - lo) / (hi - lo)):.2f}"
                       for j, y in enumerate(ys) if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - right + 8}" y="{top + 14 * (i + 1)}" font-size="11" '
                   f'fill="{color}" font-family="sans-serif">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart_svg(values: dict, title="", baseline=0.0, width=480, height=320) -> str:
    """Vertical bars measured from ``baseline`` (e.g. the initial Elo)."""
    left, top, bottom = 55, 30, 45
    names = list(values)
    vals = [values[k] for k in names]
    lo = min([baseline] + vals)
    hi = max([baseline] + vals)
    if hi == lo:
        hi = lo + 1.0
    pw, ph = width - left - 20, height - top - bottom
    bw = pw / max(1, len(names))
    out = _svg_open(width, height, title)

    def ypos(v):
        return top + ph * (1 - (v - lo) / (hi - lo))
    for i, (name, v) in enumerate(zip(names, vals)):
        x = left + i * bw + 0.15 * bw
        y0, y1 = sorted((ypos(baseline), ypos(v)))
        out.append(f'<rect x="{x:.2f}" y="{y0:.2f}" width="{0.7 * bw:.2f}" '
                   f'height="{max(y1 - y0, 0.5):.2f}" fill="{_PALETTE[i % len(_PALETTE)]}"/>')
        out.append(f'<text x="{x + 0.35 * bw:.2f}" y="{height - 25}" text-anchor="middle" '
                   f'font-size="11" font-family="sans-serif">{escape(str(name))}</text>')
        out.append(f'<text x="{x + 0.35 * bw:.2f}" y="{y0 - 4:.2f}" text-anchor="middle" '
                   f'font-size="10" font-family="sans-serif">{v:.1f}</text>')
    yb = ypos(baseline)
    out.append(f'<line x1="{left}" x2="{width - 20}" y1="{yb:.2f}" y2="{yb:.2f}" stroke="#444"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
