"""Score distillation with and without the reward correction.

Plain SDS pushes the rendered stack along w(t) (eps_hat - eps). The
reward-corrected variant subtracts lam * dr/dx_hat from eps_hat whenever
the sampled timestep is below ``t_threshold``; lam is a magnitude-matched
multiple of a ramped scalar mu. After the main loop a short reward-only
phase drops the SDS residual entirely.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffusion import NoiseSchedule, PromptPrior, analytic_epsilon, forward_noise, predict_x0
from .numcore import NonFiniteError, make_rng
from .reward import RewardNet, reward_value_and_image_grad
from .scene import Asset, CameraRig, render_all, render_vjp

OMEGA_KINDS = ("constant", "sigma2")
MODES = ("sds", "dreamfl")
LAMBDA_EPS = 1e-8


@dataclass
class DistillConfig:
    steps: int = 2000
    lr: float = 1e-2
    lr_schedule: str = "cosine"  # or "constant"
    lr_final_frac: float = 0.05
    omega: str = "constant"
    mu_max: float = 0.25
    ramp_fraction: float = 0.6
    finetune_mu: float = 2.0
    finetune_steps: int = 200
    finetune_lr: float | None = None  # None: reuse ``lr``
    t_threshold: int | None = None  # None: 60% of T
    ema_decay: float = 0.99
    lambda_fixed: float | None = None  # pin lam instead of the adaptive rule
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.finetune_steps < 0:
            raise ValueError("finetune_steps must be >= 0")
        if self.omega not in OMEGA_KINDS:
            raise ValueError(f"omega must be one of {OMEGA_KINDS}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ValueError("ramp_fraction must lie in (0, 1]")
        if self.lambda_fixed is not None and self.lambda_fixed < 0:
            raise ValueError("lambda_fixed must be >= 0")

    def threshold(self, sched: NoiseSchedule) -> int:
        thr = round(0.6 * sched.T) if self.t_threshold is None else self.t_threshold
        if not 0 <= thr <= sched.T:
            raise ValueError(f"t_threshold {thr} outside [0, {sched.T}]")
        return thr

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        frac = step / max(1, self.steps - 1)
        lo = self.lr * self.lr_final_frac
        return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * frac))

    def to_json(self) -> dict:
        return asdict(self)


def omega_weight(omega, sched: NoiseSchedule, t: int) -> float:
    if isinstance(omega, (int, float)):
        return float(omega)
    if omega == "constant":
        return 1.0
    if omega == "sigma2":
        return sched.coeffs(t)[1] ** 2
    raise ValueError(f"unknown omega {omega!r}")


# --------------------------------------------------------------------------- gradients

@dataclass
class StepParts:
    x0: np.ndarray
    x_t: np.ndarray
    eps_hat: np.ndarray
    w: float


def _parts(asset, rig, prior, sched, t, eps, omega) -> StepParts:
    x0 = render_all(asset, rig)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != view stack {x0.shape}")
    x_t = forward_noise(x0, t, eps, sched).x_t
    return StepParts(x0, x_t, analytic_epsilon(prior, x_t, t, sched), omega_weight(omega, sched, t))


def _residual_grad(rig, asset, w, residual):
    return w * render_vjp(rig, residual, asset)


def sds_grad(asset: Asset, rig: CameraRig, prior: PromptPrior, sched: NoiseSchedule,
             t: int, eps, omega="constant") -> np.ndarray:
    """w(t) * J^T (eps_hat(x_t) - eps) for the stack rendered from ``asset``."""
    p = _parts(asset, rig, prior, sched, t, eps, omega)
    return _residual_grad(rig, asset, p.w, p.eps_hat - eps)


def sds_loss_value(parts: StepParts, eps) -> float:
    """Reported SDS loss: half the w(t)-weighted mean squared noise residual."""
    return 0.5 * parts.w * float(np.mean((parts.eps_hat - eps) ** 2))


def kl_objective_gaussian(asset: Asset, rig: CameraRig, prior: PromptPrior,
                          sched: NoiseSchedule, t: int) -> float:
    """KL(N(a g, s^2 I) || N(a mu, a^2 v + s^2)) for a single-component prior."""
    if len(prior.weights) != 1:
        raise ValueError("closed-form KL needs a single-component prior")
    a, s = sched.coeffs(t)
    g = render_all(asset, rig).reshape(-1)
    mu, v = prior.means[0], prior.variances[0]
    sp = a * a * v + s * s
    q = s * s
    return 0.5 * float(np.sum(np.log(sp / q) + q / sp + (a * (g - mu)) ** 2 / sp - 1.0))


def delta_epsilon(net: RewardNet, y: int, x_t, t: int, sched: NoiseSchedule,
                  prior: PromptPrior, lambda_r: float, cams=None):
    """lam * dr/dx_hat at x_hat = predict_x0(x_t, eps_hat).

    The chain through x_hat's dependence on x_t is absorbed into lam, so
    this is exactly lam times the reward's image gradient at x_hat.
    Returns ``(delta_eps, r_value, x_hat)``.
    """
    if lambda_r < 0:
        raise ValueError("lambda_r must be >= 0")
    x_hat = predict_x0(x_t, t, analytic_epsilon(prior, x_t, t, sched), sched)
    r, g = reward_value_and_image_grad(net, y, x_hat, cams)
    return lambda_r * g, r, x_hat


def dreamfl_grad(asset: Asset, rig: CameraRig, prior: PromptPrior, net: RewardNet,
                 sched: NoiseSchedule, t: int, eps, lambda_r: float, t_threshold: int,
                 omega="constant", y=None) -> np.ndarray:
    """w(t) J^T (eps_hat - d_eps - eps); identical to :func:`sds_grad` when t >= t_threshold."""
    if t >= t_threshold:
        return sds_grad(asset, rig, prior, sched, t, eps, omega)
    p = _parts(asset, rig, prior, sched, t, eps, omega)
    y = prior.prompt_id if y is None else y
    d_eps = delta_epsilon(net, y, p.x_t, t, sched, prior, lambda_r)[0]
    return _residual_grad(rig, asset, p.w, p.eps_hat - d_eps - eps)


def reward_loss_value(L_sds: float, r_value: float, lambda_r: float) -> float:
    return L_sds - lambda_r * r_value


# --------------------------------------------------------------------------- lambda

@dataclass(frozen=True)
class LambdaState:
    ema_sds: float = 0.0
    ema_r: float = 0.0
    decay: float = 0.99
    mu: float = 0.0
    lambda_r: float = 0.0


def mu_at(step: int, cfg: DistillConfig, finetune=False) -> float:
    if finetune:
        return cfg.finetune_mu
    span = cfg.ramp_fraction * cfg.steps
    return cfg.mu_max * min(1.0, step / span)


def update_lambda(state: LambdaState, L_sds, r_value, step: int, cfg: DistillConfig,
                  finetune=False) -> LambdaState:
    """Fold |L_sds| and |r| into their EMAs (``None`` skips one) and refresh lam."""
    d = state.decay
    ema_sds = state.ema_sds if L_sds is None else d * state.ema_sds + (1 - d) * abs(L_sds)
    ema_r = state.ema_r if r_value is None else d * state.ema_r + (1 - d) * abs(r_value)
    mu = mu_at(step, cfg, finetune)
    if cfg.lambda_fixed is not None:
        lam = cfg.lambda_fixed
    else:
        lam = mu * ema_sds / (ema_r + LAMBDA_EPS)
    return LambdaState(ema_sds, ema_r, d, mu, lam)


# --------------------------------------------------------------------------- loop

TRACE_FIELDS = ("step", "t", "branch", "L_sds", "r", "lambda_r", "grad_norm", "loss")


@dataclass
class TraceRecord:
    step: int
    t: int
    branch: str  # "sds", "reward", "finetune", "finetune-gated"
    L_sds: float
    r: float
    lambda_r: float
    grad_norm: float
    loss: float


@dataclass
class DistillTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_FIELDS)
            for r in self.records:
                w.writerow([r.step, r.t, r.branch, repr(r.L_sds), repr(r.r),
                            repr(r.lambda_r), repr(r.grad_norm), repr(r.loss)])


class DistillAborted(NonFiniteError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class OptimizeResult:
    asset: Asset
    trace: DistillTrace


def optimize(asset: Asset, rig: CameraRig, prior: PromptPrior, sched: NoiseSchedule,
             cfg: DistillConfig, mode: str = "sds", net: RewardNet | None = None,
             y: int | None = None, callback=None) -> OptimizeResult:
    """Run the distillation loop; ``dreamfl`` adds the reward phase.

    Every step draws t ~ U{1..T} and eps ~ N(0, I) from the
    ``(seed, "distill")`` stream, identically in both modes, so runs with
    the gate closed or ``lambda_fixed=0`` reproduce plain SDS bit for bit. ``callback(step,
    asset, record)`` sees the asset after each update.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "dreamfl" and net is None:
        raise ValueError("dreamfl mode needs a trained reward net")
    y = prior.prompt_id if y is None else y
    thr = cfg.threshold(sched)
    rng = make_rng(cfg.seed, "distill")
    theta = asset.theta.copy()
    lam_state = LambdaState(decay=cfg.ema_decay)
    trace = DistillTrace()
    shape = (rig.K, rig.D)
    total = cfg.steps + (cfg.finetune_steps if mode == "dreamfl" else 0)
    for step in range(total):
        finetune = step >= cfg.steps
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(shape)
        cur = Asset(theta)
        p = _parts(cur, rig, prior, sched, t, eps, cfg.omega)
        L = sds_loss_value(p, eps)
        # a weight pinned at zero makes the reward irrelevant, so skip it
        reward_on = mode == "dreamfl" and t < thr and cfg.lambda_fixed != 0.0
        r_val = 0.0
        if reward_on:
            x_hat = predict_x0(p.x_t, t, p.eps_hat, sched)
            r_val, r_grad = reward_value_and_image_grad(net, y, x_hat)
        if mode == "dreamfl":
            lam_state = update_lambda(lam_state, None if finetune else L,
                                      r_val if reward_on else None, step, cfg, finetune)
        lam = lam_state.lambda_r if reward_on else 0.0
        if finetune:
            L = 0.0
            resid = -(lam * r_grad) if reward_on else np.zeros(shape)
            branch = "finetune" if reward_on else "finetune-gated"
            lr = cfg.finetune_lr if cfg.finetune_lr is not None else cfg.lr
        else:
            resid = (p.eps_hat - lam * r_grad - eps) if reward_on else (p.eps_hat - eps)
            branch = "reward" if reward_on else "sds"
            lr = cfg.lr_at(step)
        grad = _residual_grad(rig, cur, p.w, resid)
        gnorm = float(np.linalg.norm(grad))
        rec = TraceRecord(step, t, branch, L, r_val, lam, gnorm,
                          reward_loss_value(L, r_val, lam))
        trace.records.append(rec)
        if not np.isfinite(gnorm):
            raise DistillAborted(f"non-finite gradient at step {step}", trace)
        theta = theta - lr * grad
        if callback is not None:
            callback(step, Asset(theta), rec)
    return OptimizeResult(Asset(theta), trace)
