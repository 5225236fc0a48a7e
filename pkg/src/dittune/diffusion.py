"""Discrete-time DDPM machinery.

Timesteps are 1-indexed, ``t in [1, T]``, with ``alpha_bar_0 := 1``. Schedule
tables are float64 numpy arrays of length ``T``; entry ``t - 1`` holds the value
for timestep ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

DEFAULT_LAMBDA_VLB = 0.001
EVAL_CFG_SCALE = 1.5
VIS_CFG_SCALE = 4.0


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bars_prev: np.ndarray
    posterior_variances: np.ndarray
    # log(beta_tilde) with the t=1 entry (which is log 0) replaced by the t=2 entry
    posterior_log_variances_clipped: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a non-empty vector")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("every beta must lie in the open interval (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.empty_like(alphas)
        acc = 1.0
        for i, a in enumerate(alphas):
            acc = acc * a
            alpha_bars[i] = acc
        alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
        post_var = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
        if len(betas) > 1:
            clipped = np.log(np.concatenate([post_var[1:2], post_var[1:]]))
        else:
            clipped = np.log(betas.copy())
        return cls(betas, alphas, alpha_bars, alpha_bars_prev, post_var, clipped)


@dataclass(frozen=True)
class LossWeights:
    lambda_vlb: float = DEFAULT_LAMBDA_VLB

    def __post_init__(self):
        if not (self.lambda_vlb >= 0 and math.isfinite(self.lambda_vlb)):
            raise ValueError("lambda_vlb must be a finite nonnegative number")


@dataclass
class NoisedBatch:
    x0: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    xt: torch.Tensor


def build_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 2e-2) -> NoiseSchedule:
    """Build a beta schedule.

    ``linear`` spaces betas evenly from ``beta_start`` to ``beta_end`` inclusive.
    ``cosine`` uses the squared-cosine alpha_bar curve (offset 0.008) with betas
    capped at 0.999; the beta bounds are still validated but otherwise unused.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008

        def abar(u):
            return math.cos((u + s) / (1 + s) * math.pi / 2) ** 2

        betas = np.array([min(1 - abar((i + 1) / T) / abar(i / T), 0.999) for i in range(T)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule.from_betas(betas)


def _check_t(t: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t[None]
    if t.numel() and (int(t.min()) < 1 or int(t.max()) > schedule.T):
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    return t


def extract(arr: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather ``arr[t - 1]`` per sample and broadcast against ``like``."""
    vals = torch.from_numpy(np.ascontiguousarray(arr))[t.cpu() - 1].to(like.dtype)
    return vals.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    t = _check_t(t, schedule)
    ab = schedule.alpha_bars
    return extract(np.sqrt(ab), t, x0) * x0 + extract(np.sqrt(1.0 - ab), t, x0) * eps


def posterior_coefficients(schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients on x0 and xt of the mean of q(x_{t-1} | x_t, x_0)."""
    ab, abp = schedule.alpha_bars, schedule.alpha_bars_prev
    c0 = np.sqrt(abp) * schedule.betas / (1.0 - ab)
    ct = np.sqrt(schedule.alphas) * (1.0 - abp) / (1.0 - ab)
    return c0, ct


def posterior_mean_var(x0: torch.Tensor, xt: torch.Tensor, t, schedule: NoiseSchedule):
    t = _check_t(t, schedule)
    c0, ct = posterior_coefficients(schedule)
    mean = extract(c0, t, x0) * x0 + extract(ct, t, xt) * xt
    var = extract(schedule.posterior_variances, t, x0)
    return mean, var


def predict_x0_from_eps(xt: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    t = _check_t(t, schedule)
    ab = schedule.alpha_bars
    return extract(np.sqrt(1.0 / ab), t, xt) * xt - extract(np.sqrt(1.0 / ab - 1.0), t, xt) * eps


def learned_logvar(v_raw: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Interpolate between log beta_t and log beta_tilde_t; ``v_raw`` in [-1, 1] maps to [0, 1]."""
    t = _check_t(t, schedule)
    frac = (v_raw + 1) / 2
    max_log = extract(np.log(schedule.betas), t, v_raw)
    min_log = extract(schedule.posterior_log_variances_clipped, t, v_raw)
    return frac * max_log + (1 - frac) * min_log


def _mean_flat(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).mean(dim=1)


def normal_kl(mean1, logvar1, mean2, logvar2):
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)) in nats."""
    return 0.5 * (logvar2 - logvar1 + torch.exp(logvar1 - logvar2)
                  + (mean1 - mean2) ** 2 * torch.exp(-logvar2) - 1.0)


def gaussian_nll(x, mean, logvar):
    return 0.5 * (math.log(2 * math.pi) + logvar + (x - mean) ** 2 * torch.exp(-logvar))


def loss_simple(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_pred.shape)}")
    return ((eps - eps_pred) ** 2).mean()


def vlb_terms(x0, xt, t, pred_mean, pred_logvar, schedule: NoiseSchedule) -> torch.Tensor:
    """Per-sample variational bound term: KL for t > 1, Gaussian NLL of x0 for t = 1."""
    t = _check_t(t, schedule)
    for name, v in (("x0", x0), ("xt", xt), ("pred_mean", pred_mean), ("pred_logvar", pred_logvar)):
        if not torch.isfinite(v).all():
            raise ValueError(f"non-finite values in {name}")
    true_mean, _ = posterior_mean_var(x0, xt, t, schedule)
    true_logvar = extract(schedule.posterior_log_variances_clipped, t, x0)
    first = (t == 1).to(x0.device)
    # true_logvar is only meaningful where t > 1; the t = 1 rows take the NLL branch
    kl = _mean_flat(normal_kl(true_mean, true_logvar, pred_mean, pred_logvar))
    nll = _mean_flat(gaussian_nll(x0, pred_mean, pred_logvar))
    return torch.where(first, nll, kl)


def loss_vlb(x0, xt, t, pred_mean, pred_logvar, schedule: NoiseSchedule) -> torch.Tensor:
    return vlb_terms(x0, xt, t, pred_mean, pred_logvar, schedule).mean()


def loss_hybrid(x0, xt, t, eps, model_output, schedule: NoiseSchedule,
                weights: LossWeights = LossWeights()) -> torch.Tensor:
    """``L_simple + lambda * L_vlb`` with the mean path of L_vlb detached.

    ``model_output`` is ``(eps_pred, v_raw)``; ``v_raw`` may be ``None`` when the
    model has no variance head, in which case only L_simple is returned.
    """
    eps_pred, v_raw = model_output
    simple = loss_simple(eps, eps_pred)
    if v_raw is None or weights.lambda_vlb == 0:
        return simple
    x0_pred = predict_x0_from_eps(xt, t, eps_pred.detach(), schedule)
    pred_mean, _ = posterior_mean_var(x0_pred, xt, t, schedule)
    logvar = learned_logvar(v_raw, t, schedule)
    return simple + weights.lambda_vlb * loss_vlb(x0, xt, t, pred_mean, logvar, schedule)


def guided_eps(eps_cond: torch.Tensor, eps_uncond: torch.Tensor | None, scale: float) -> torch.Tensor:
    # scale == 1 short-circuits so the result is exactly eps_cond, not a rounded recombination
    if scale == 1 or eps_uncond is None:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


ModelFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], tuple]


@torch.no_grad()
def p_sample_loop(model: ModelFn, schedule: NoiseSchedule, shape, class_label, cfg_scale: float,
                  rng_seed: int, *, null_label: int, variance: str = "learned",
                  dtype=torch.float32, clip: float | None = None, step_hook=None) -> torch.Tensor:
    """Ancestral sampling from t = T down to 1 with classifier-free guidance.

    ``model(xt, t, y)`` returns ``(eps, v_raw)``. ``class_label`` is an int or a
    per-sample tensor of labels in ``[0, null_label]``. ``variance`` is
    ``"learned"`` (use the model's variance head) or ``"fixed"`` (beta_tilde).
    ``step_hook(t, eps_cond, eps_uncond, eps_guided)`` is called at every step.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise ValueError(f"invalid sample shape {shape}")
    if cfg_scale < 0:
        raise ValueError("cfg_scale must be >= 0")
    if variance not in ("learned", "fixed"):
        raise ValueError(f"unknown variance mode {variance!r}")
    n = shape[0]
    y = torch.as_tensor(class_label, dtype=torch.long)
    y = y.expand(n).clone() if y.ndim == 0 else y
    if y.shape != (n,):
        raise ValueError("class_label must be a scalar or have one entry per sample")
    if int(y.min()) < 0 or int(y.max()) > null_label:
        raise ValueError(f"unknown class label; valid range is [0, {null_label}]")

    gen = torch.Generator().manual_seed(int(rng_seed))
    x = torch.randn(shape, generator=gen, dtype=dtype)
    use_uncond = cfg_scale != 1
    y_null = torch.full_like(y, null_label)
    for step in range(schedule.T, 0, -1):
        t = torch.full((n,), step, dtype=torch.long)
        if use_uncond:
            eps_all, v_all = model(torch.cat([x, x]), torch.cat([t, t]), torch.cat([y, y_null]))
            eps_c, eps_u = eps_all[:n], eps_all[n:]
            v = v_all[:n] if v_all is not None else None
        else:
            eps_c, v = model(x, t, y)
            eps_u = None
        eps = guided_eps(eps_c, eps_u, cfg_scale)
        if step_hook is not None:
            step_hook(step, eps_c, eps_u, eps)
        x0_pred = predict_x0_from_eps(x, t, eps, schedule)
        if clip is not None:
            x0_pred = x0_pred.clamp(-clip, clip)
        mean, _ = posterior_mean_var(x0_pred, x, t, schedule)
        if step == 1:
            x = mean
            break
        if variance == "learned" and v is not None:
            logvar = learned_logvar(v, t, schedule)
        else:
            logvar = extract(schedule.posterior_log_variances_clipped, t, x).expand_as(x)
        noise = torch.randn(shape, generator=gen, dtype=dtype)
        x = mean + torch.exp(0.5 * logvar) * noise
    return x
