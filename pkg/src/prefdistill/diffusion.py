"""Variance-preserving diffusion over Gaussian-mixture image priors.

The pretrained noise predictor is replaced by the exact one: under
x_t = a_t x0 + s_t eps every diagonal component N(mu, v) of the prior
becomes N(a_t mu, a_t^2 v + s_t^2), and the noise prediction is
-s_t times the score of that noised mixture.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .numcore import ShapeError

SCHEDULE_KINDS = ("linear", "cosine")

# linear schedule: alpha_bar falls linearly from 1 to this value at t = T
LINEAR_ALPHA_BAR_END = 1e-3
COSINE_OFFSET = 8e-3
COSINE_BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray  # (T+1,), index 0 is the clean signal
    sigma: np.ndarray
    kind: str

    def coeffs(self, t: int) -> tuple[float, float]:
        if not 0 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha[t]), float(self.sigma[t])


def make_schedule(kind: str = "linear", T: int = 1000) -> NoiseSchedule:
    """Build a VP schedule; ``alpha[t]`` is the sqrt of the cumulative alpha-bar."""
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    frac = np.arange(T + 1) / T
    if kind == "linear":
        alpha_bar = 1.0 - (1.0 - LINEAR_ALPHA_BAR_END) * frac
    elif kind == "cosine":
        f = np.cos((frac + COSINE_OFFSET) / (1 + COSINE_OFFSET) * np.pi / 2) ** 2
        # per-step betas clipped below one keep alpha_bar positive and
        # strictly decreasing right up to t = T
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-12, COSINE_BETA_MAX)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(T, alpha, sigma, kind)


@dataclass(frozen=True)
class PromptPrior:
    prompt_id: int
    weights: np.ndarray  # (m,)
    means: np.ndarray  # (m, d)
    variances: np.ndarray  # (m, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if mu.shape != var.shape or w.shape != (mu.shape[0],):
            raise ShapeError(f"component shapes disagree: weights {w.shape}, "
                             f"means {mu.shape}, variances {var.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(var <= 0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def single(cls, mean, var=1.0, prompt_id=0):
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        return cls(prompt_id, np.ones(1), mean[None, :], np.broadcast_to(var, mean.shape)[None, :])

    def to_json(self) -> dict:
        return {"prompt_id": int(self.prompt_id),
                "components": [{"weight": float(w), "mean": m.tolist(), "var": v.tolist()}
                               for w, m, v in zip(self.weights, self.means, self.variances)]}

    @classmethod
    def from_json(cls, doc) -> "PromptPrior":
        if isinstance(doc, str):
            doc = json.loads(doc)
        comps = doc["components"]
        return cls(int(doc["prompt_id"]), np.array([c["weight"] for c in comps], dtype=float),
                   np.array([c["mean"] for c in comps], dtype=float),
                   np.array([c["var"] for c in comps], dtype=float))


@dataclass(frozen=True)
class NoisedSample:
    x_t: np.ndarray
    t: int
    eps: np.ndarray


def forward_noise(x0, t: int, eps, sched: NoiseSchedule) -> NoisedSample:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    a, s = sched.coeffs(t)
    return NoisedSample(a * x0 + s * eps, t, eps)


def _flat_batch(prior, x_t):
    """Rows of flattened images plus the leading (batch) shape.

    Accepts flat vectors (..., d) or view stacks (..., K, D) with K*D == d.
    """
    x = np.asarray(x_t, dtype=np.float64)
    if x.shape[-1] == prior.dim:
        lead = x.shape[:-1]
    elif x.ndim >= 2 and x.shape[-2] * x.shape[-1] == prior.dim:
        lead = x.shape[:-2]
    else:
        raise ShapeError(f"x_t with shape {x.shape} does not match prior dim {prior.dim}")
    return np.ascontiguousarray(x.reshape(-1, prior.dim)), x.shape, lead


def _mixture(prior, x_t, t, sched):
    x2, shape, lead = _flat_batch(prior, x_t)
    a, s = sched.coeffs(t)
    eps, logp = _kernels.mixture_eps(x2, prior.means, prior.variances,
                                     np.log(prior.weights), a, s)
    return eps.reshape(shape), logp.reshape(lead)


def analytic_epsilon(prior: PromptPrior, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Exact noise prediction for the noised mixture; keeps the shape of ``x_t``.

    Accepts a flat vector, a (K, D) view stack or a batch of either.
    """
    return _mixture(prior, x_t, t, sched)[0]


def log_density_t(prior: PromptPrior, x_t, t: int, sched: NoiseSchedule):
    """log p_t(x_t | y); a float for one input, an array for a batch."""
    logp = _mixture(prior, x_t, t, sched)[1]
    return float(logp) if logp.ndim == 0 else logp


def predict_x0(x_t, t: int, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    """One-step denoised estimate (x_t - s_t eps_hat) / a_t."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"x_t {x_t.shape} and eps_hat {eps_hat.shape} differ")
    a, s = sched.coeffs(t)
    if a <= 0:
        raise ValueError(f"alpha_t is zero at t={t}")
    return (x_t - s * eps_hat) / a
