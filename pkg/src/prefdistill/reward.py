"""Preference scorer r(y, x, c) and its pairwise ranking-loss training.

Each view is encoded together with the prompt and camera embeddings,
the per-view features are mean-pooled, and a small head maps the pooled
feature to a scalar. The first fraction of encoder layers can be frozen.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import (Layer, MlpNetwork, ShapeError, backward_cache, forward_cache,
                      init_mlp, init_optim, make_rng, optimizer_step)


@dataclass
class RewardNet:
    prompt_emb: np.ndarray  # (P, E)
    cam_emb: np.ndarray  # (K, Ec)
    encoder: MlpNetwork
    head: MlpNetwork
    freeze_fraction: float = 0.8
    freeze_head: bool = False

    def __post_init__(self):
        E, Ec = self.prompt_emb.shape[1], self.cam_emb.shape[1]
        if self.encoder.in_dim <= E + Ec:
            raise ShapeError("encoder input must hold prompt, view and camera features", 0)
        if self.head.in_dim != self.encoder.out_dim or self.head.out_dim != 1:
            raise ShapeError("head must map encoder features to a scalar",
                             len(self.head.layers) - 1)
        if not 0.0 <= self.freeze_fraction <= 1.0:
            raise ValueError("freeze_fraction must lie in [0, 1]")
        n_frozen = math.floor(self.freeze_fraction * len(self.encoder.layers) + 1e-12)
        self.encoder.frozen = [i < n_frozen for i in range(len(self.encoder.layers))]
        self.head.frozen = [self.freeze_head] * len(self.head.layers)

    @property
    def num_prompts(self) -> int:
        return self.prompt_emb.shape[0]

    @property
    def K(self) -> int:
        return self.cam_emb.shape[0]

    @property
    def view_dim(self) -> int:
        return self.encoder.in_dim - self.prompt_emb.shape[1] - self.cam_emb.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.prompt_emb, self.cam_emb] + self.encoder.params() + self.head.params()

    def param_frozen(self) -> list[bool]:
        return [False, False] + self.encoder.param_frozen() + self.head.param_frozen()

    def with_params(self, params) -> "RewardNet":
        ne = 2 * len(self.encoder.layers)
        return RewardNet(params[0], params[1], self.encoder.with_params(params[2:2 + ne]),
                         self.head.with_params(params[2 + ne:]),
                         self.freeze_fraction, self.freeze_head)

    # -- checkpoint -----------------------------------------------------------
    def to_json(self, config=None, metadata=None) -> dict:
        def mlp(net):
            return [{"weights": l.weights.tolist(), "biases": l.biases.tolist(),
                     "activation": l.activation} for l in net.layers]
        return {"config": config or {}, "prompt_emb": self.prompt_emb.tolist(),
                "cam_emb": self.cam_emb.tolist(), "encoder": mlp(self.encoder),
                "head": mlp(self.head), "freeze_fraction": self.freeze_fraction,
                "freeze_head": self.freeze_head,
                "freeze_mask": {"encoder": self.encoder.frozen, "head": self.head.frozen},
                "metadata": metadata or {}}

    @classmethod
    def from_json(cls, doc) -> "RewardNet":
        if isinstance(doc, str):
            doc = json.loads(doc)

        def mlp(layers):
            return MlpNetwork([Layer(np.array(l["weights"], dtype=float),
                                     np.array(l["biases"], dtype=float), l["activation"])
                               for l in layers])
        return cls(np.array(doc["prompt_emb"], dtype=float), np.array(doc["cam_emb"], dtype=float),
                   mlp(doc["encoder"]), mlp(doc["head"]), float(doc["freeze_fraction"]),
                   bool(doc.get("freeze_head", False)))


def init_reward_net(num_prompts, K, view_dim, rng, prompt_dim=4, cam_dim=4,
                    encoder_hidden=(256, 32), head_hidden=(16,), freeze_fraction=0.8,
                    freeze_head=False, zero_head=True, feature_gain=1.0,
                    activation="relu") -> RewardNet:
    """Random net; the head's last layer starts at zero so initial scores are 0.

    Hidden encoder layers are scaled by ``feature_gain`` and get spread-out
    random biases. Frozen layers then act as a fixed random-feature basis,
    which has to be rich enough to express a curved preference.
    """
    pe = rng.standard_normal((num_prompts, prompt_dim)) * 0.5
    ce = rng.standard_normal((K, cam_dim)) * 0.5
    enc = init_mlp([prompt_dim + view_dim + cam_dim, *encoder_hidden], rng, activation)
    for layer in enc.layers[:-1]:
        layer.weights *= feature_gain
        layer.biases[:] = rng.uniform(-0.5, 0.5, layer.fan_out) * feature_gain
    head = init_mlp([encoder_hidden[-1], *head_hidden, 1], rng, zero_last=zero_head)
    return RewardNet(pe, ce, enc, head, freeze_fraction, freeze_head)


# --------------------------------------------------------------------------- scoring

def _prep(net, prompts, images, cams):
    prompts = np.atleast_1d(np.asarray(prompts, dtype=np.int64))
    X = np.asarray(images, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    n, K, D = X.shape
    if D != net.view_dim or prompts.shape != (n,):
        raise ShapeError(f"images {X.shape} / prompts {prompts.shape} do not fit the net "
                         f"(view dim {net.view_dim})")
    bad = (prompts < 0) | (prompts >= net.num_prompts)
    if bad.any():
        raise KeyError(f"unknown prompt id {int(prompts[bad][0])}")
    if cams is None:
        cams = np.broadcast_to(np.arange(K), (n, K))
    cams = np.asarray(cams, dtype=np.int64).reshape(n, K)
    if cams.min() < 0 or cams.max() >= net.K:
        raise IndexError(f"camera index out of range for {net.K} camera embeddings")
    rows = np.concatenate([np.repeat(net.prompt_emb[prompts], K, axis=0),
                           X.reshape(n * K, D), net.cam_emb[cams.reshape(-1)]], axis=1)
    return prompts, X, cams, rows


def _score_forward(net, prompts, images, cams):
    prompts, X, cams, rows = _prep(net, prompts, images, cams)
    n, K, _ = X.shape
    enc_acts = forward_cache(net.encoder, rows)
    pooled = enc_acts[-1].reshape(n, K, -1).mean(axis=1)
    head_acts = forward_cache(net.head, pooled)
    return head_acts[-1][:, 0], (prompts, X, cams, enc_acts, head_acts)


def _score_backward(net, cache, upstream):
    """Gradients of sum(upstream * scores): (param grads, image grads)."""
    prompts, X, cams, enc_acts, head_acts = cache
    n, K, D = X.shape
    hgrads, dpooled = backward_cache(net.head, head_acts, upstream[:, None])
    dfeat = np.repeat(dpooled / K, K, axis=0)
    egrads, drows = backward_cache(net.encoder, enc_acts, dfeat)
    E = net.prompt_emb.shape[1]
    dpe = np.zeros_like(net.prompt_emb)
    np.add.at(dpe, prompts, drows[:, :E].reshape(n, K, E).sum(axis=1))
    dce = np.zeros_like(net.cam_emb)
    np.add.at(dce, cams.reshape(-1), drows[:, E + D:])
    dX = drows[:, E:E + D].reshape(n, K, D)
    grads = [dpe, dce]
    for dw, db in egrads + hgrads:
        grads.extend((dw, db))
    return grads, dX


def reward_scores(net: RewardNet, prompts, images, cams=None) -> np.ndarray:
    """Scores for a batch of (prompt, K-view stack) items."""
    return _score_forward(net, prompts, images, cams)[0]


def reward_score(net: RewardNet, y: int, x, cams=None) -> float:
    return float(reward_scores(net, [y], np.asarray(x)[None], None if cams is None else [cams])[0])


def reward_image_grad(net: RewardNet, y: int, x, cams=None) -> np.ndarray:
    """d reward_score / d x for a single (K, D) stack."""
    s, cache = _score_forward(net, [y], np.asarray(x)[None], None if cams is None else [cams])
    return _score_backward(net, cache, np.ones(1))[1][0]


def reward_value_and_image_grad(net, y, x, cams=None):
    s, cache = _score_forward(net, [y], np.asarray(x)[None], None if cams is None else [cams])
    return float(s[0]), _score_backward(net, cache, np.ones(1))[1][0]


# --------------------------------------------------------------------------- loss

def softplus(z):
    return np.logaddexp(0.0, z)


@dataclass
class PairArrays:
    """Pairs with their images resolved: winner ``xw``, loser ``xl``."""
    prompts: np.ndarray
    xw: np.ndarray  # (n, K, D)
    xl: np.ndarray
    cw: np.ndarray  # (n, K) camera indices
    cl: np.ndarray

    def __len__(self):
        return len(self.prompts)

    def take(self, idx) -> "PairArrays":
        return PairArrays(self.prompts[idx], self.xw[idx], self.xl[idx], self.cw[idx], self.cl[idx])


def pair_arrays(pairs, images: dict) -> PairArrays:
    """Resolve ComparisonPairs against ``images[item_id] -> (K, D)``."""
    if not pairs:
        raise ValueError("no comparison pairs")
    return PairArrays(np.array([p.prompt_id for p in pairs], dtype=np.int64),
                      np.stack([images[p.winner] for p in pairs]),
                      np.stack([images[p.loser] for p in pairs]),
                      np.array([p.cams_w for p in pairs], dtype=np.int64),
                      np.array([p.cams_l for p in pairs], dtype=np.int64))


def bt_loss_from_scores(sw, sl) -> float:
    """mean -log sigmoid(sw - sl) in the overflow-free softplus form."""
    return float(np.mean(softplus(-(np.asarray(sw) - np.asarray(sl)))))


def bt_loss(net: RewardNet, batch: PairArrays) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    sw = reward_scores(net, batch.prompts, batch.xw, batch.cw)
    sl = reward_scores(net, batch.prompts, batch.xl, batch.cl)
    return bt_loss_from_scores(sw, sl)


def bt_loss_and_grads(net: RewardNet, batch: PairArrays):
    n = len(batch)
    sw, cw = _score_forward(net, batch.prompts, batch.xw, batch.cw)
    sl, cl = _score_forward(net, batch.prompts, batch.xl, batch.cl)
    gap = sw - sl
    # d softplus(-gap)/d gap = -sigmoid(-gap)
    dgap = -0.5 * (1.0 - np.tanh(0.5 * gap)) / n
    gw, _ = _score_backward(net, cw, dgap)
    gl, _ = _score_backward(net, cl, -dgap)
    return float(np.mean(softplus(-gap))), [a + b for a, b in zip(gw, gl)]


def pairwise_accuracy(net: RewardNet, batch: PairArrays) -> float:
    """Fraction of pairs scored in the labelled order; exact ties count half."""
    sw = reward_scores(net, batch.prompts, batch.xw, batch.cw)
    sl = reward_scores(net, batch.prompts, batch.xl, batch.cl)
    return float(np.mean((sw > sl) + 0.5 * (sw == sl)))


# --------------------------------------------------------------------------- training

@dataclass
class RewardTrainConfig:
    lr: float = 1e-5
    batch_size: int = 8
    epochs: int = 20
    freeze_fraction: float = 0.8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    net: RewardNet
    curve: list = field(default_factory=list)  # mean training loss per epoch


def train_reward(net: RewardNet, data: PairArrays, cfg: RewardTrainConfig) -> TrainResult:
    """Minibatch AdamW on the pairwise ranking loss.

    Pairs are shuffled without replacement every epoch from the
    ``(seed, "reward", "shuffle")`` stream; frozen blocks never move.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = make_rng(cfg.seed, "reward", "shuffle")
    frozen = net.param_frozen()
    params = net.params()
    state = init_optim(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = bt_loss_and_grads(net, data.take(idx))
            params, state = optimizer_step(state, params, grads, frozen)
            net = net.with_params(params)
            total += loss * len(idx)
        curve.append(total / len(data))
    return TrainResult(net, curve)
