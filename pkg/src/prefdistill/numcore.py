"""Small deterministic numeric kernel shared by every other module.

Arrays are plain float64 numpy arrays. The feed-forward network carries
exact hand-written gradients; the optimizer is AdamW with bias-corrected
moments; random streams are Philox (counter based) keyed by a seed plus
stream names.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from ._kernels import ACTIVATIONS


class ShapeError(ValueError):
    """Raised when array shapes do not chain; names the offending layer."""

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class NonFiniteError(FloatingPointError):
    """A NaN/Inf showed up where only finite values are allowed."""

    def __init__(self, message, block=None):
        super().__init__(message if block is None else f"{block}: {message}")
        self.block = block


# --------------------------------------------------------------------------- rng

def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def make_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Philox generator for (seed, names...).

    Same seed and names give the same stream on any platform; distinct
    names give independent streams (e.g. ``make_rng(7, "data")``).
    """
    keys = tuple(_name_key(n) if isinstance(n, str) else int(n) for n in names)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=keys)
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------- mlp

@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "tanh"

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]


@dataclass
class MlpNetwork:
    layers: list[Layer]
    frozen: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.frozen:
            self.frozen = [False] * len(self.layers)
        if len(self.frozen) != len(self.layers):
            raise ShapeError("frozen mask length differs from layer count")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.biases.shape != (layer.fan_out,):
                raise ShapeError("bias length differs from weight rows", i)
            if i and layer.fan_in != self.layers[i - 1].fan_out:
                raise ShapeError(
                    f"expects {layer.fan_in} inputs but previous layer emits "
                    f"{self.layers[i - 1].fan_out}", i)
        if self.layers and self.layers[-1].activation != "identity":
            raise ValueError("last layer must use the identity activation")

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fan_out

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.biases))
        return out

    def param_frozen(self) -> list[bool]:
        return [f for f in self.frozen for _ in range(2)]

    def with_params(self, params) -> "MlpNetwork":
        layers = [Layer(params[2 * i], params[2 * i + 1], layer.activation)
                  for i, layer in enumerate(self.layers)]
        return MlpNetwork(layers, list(self.frozen))

    def copy(self) -> "MlpNetwork":
        return self.with_params([p.copy() for p in self.params()])


def init_mlp(sizes, rng, activation="tanh", zero_last=False) -> MlpNetwork:
    """Glorot-uniform MLP with ``activation`` on hidden layers."""
    layers = []
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        lim = np.sqrt(6.0 / (fi + fo))
        w = np.zeros((fo, fi)) if (last and zero_last) else rng.uniform(-lim, lim, (fo, fi))
        layers.append(Layer(w, np.zeros(fo), "identity" if last else activation))
    return MlpNetwork(layers)


def _as_batch(x, net):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.ascontiguousarray(x[None, :] if single else x)
    if x2.ndim != 2 or x2.shape[1] != net.in_dim:
        raise ShapeError(f"input has shape {x.shape}, expected last dim {net.in_dim}", 0)
    return x2, single


def forward_cache(net: MlpNetwork, x2: np.ndarray) -> list[np.ndarray]:
    """Activations of every layer for a 2-D batch; ``[-1]`` is the output."""
    acts = [x2]
    for layer in net.layers:
        acts.append(_kernels.dense_forward(acts[-1], layer.weights, layer.biases,
                                           ACTIVATIONS[layer.activation]))
    return acts


def backward_cache(net: MlpNetwork, acts, up2: np.ndarray):
    """Backprop through activations from :func:`forward_cache`."""
    grads = [None] * len(net.layers)
    g = up2
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dw, db, g = _kernels.dense_backward(acts[i], layer.weights, acts[i + 1],
                                            ACTIVATIONS[layer.activation], g)
        grads[i] = (dw, db)
    return grads, g


def mlp_forward(net: MlpNetwork, x) -> np.ndarray:
    """Evaluate the net on one input vector or on a batch of rows."""
    x2, single = _as_batch(x, net)
    out = forward_cache(net, x2)[-1]
    return out[0] if single else out


def mlp_grad(net: MlpNetwork, x, upstream):
    """Vector-Jacobian product of the net at ``x``.

    Returns ``(param_grads, input_grad)``: ``param_grads`` is a list of
    ``(dW, db)`` per layer (frozen layers included; callers mask them),
    summed over batch rows. ``input_grad`` has the shape of ``x``.
    """
    x2, single = _as_batch(x, net)
    up = np.asarray(upstream, dtype=np.float64)
    up2 = up[None, :] if single else up
    if up2.shape != (x2.shape[0], net.out_dim):
        raise ShapeError(f"upstream has shape {up.shape}, output is "
                         f"{(x2.shape[0], net.out_dim)}", len(net.layers) - 1)
    grads, g = backward_cache(net, forward_cache(net, x2), up2)
    return grads, (g[0] if single else g)


# --------------------------------------------------------------------------- adamw

@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optim(params, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    return OptimState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                      0, lr, weight_decay, beta1, beta2, eps)


def optimizer_step(state: OptimState, params, grads, frozen=None):
    """One AdamW update. Returns ``(new_params, new_state)``.

    Weight decay is decoupled (applied to the parameter, not the gradient).
    Entries flagged in ``frozen`` are passed through untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    frozen = frozen or [False] * len(params)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_p, new_m, new_v = [], [], []
    for i, (p, g, m, v, fz) in enumerate(zip(params, grads, state.m, state.v, frozen)):
        if fz:
            new_p.append(p)
            new_m.append(m)
            new_v.append(v)
            continue
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}", i)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient", f"param block {i}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p.append(p - state.lr * (upd + state.weight_decay * p))
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, m=new_m, v=new_v, step=step)


# --------------------------------------------------------------------------- checks

def finite_diff(f, x, h=1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite around entry {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(a, b, floor=1e-8) -> float:
    """Largest elementwise |a-b| / max(|a|,|b|); entries below ``floor`` in
    both arrays are compared absolutely."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    err = np.abs(a - b)
    rel = np.where(scale > floor, err / np.where(scale > floor, scale, 1.0), err)
    return float(rel.max()) if rel.size else 0.0
