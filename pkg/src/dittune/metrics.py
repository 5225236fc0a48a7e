"""Gaussian-Fréchet distance on raw (optionally projected) pixels."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

log = logging.getLogger(__name__)

EIG_WARN = 1e-6


@dataclass
class FrechetReport:
    score: float
    n_a: int
    n_b: int
    features: str


def _features(x, project_dim: int | None, projection_seed: int) -> tuple[np.ndarray, bool]:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    if project_dim is not None and project_dim < x.shape[1]:
        rng = np.random.default_rng(projection_seed)
        P = rng.standard_normal((x.shape[1], project_dim)) / np.sqrt(project_dim)
        return x @ P, True
    return x, False


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((S + S.T) / 2)
    if w.min() < -EIG_WARN:
        log.warning("clamping negative covariance eigenvalue %.3g", w.min())
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def trace_sqrt_product(S1: np.ndarray, S2: np.ndarray) -> float:
    """``tr (S1 S2)^{1/2}`` as ``tr (S1^{1/2} S2 S1^{1/2})^{1/2}``, which stays symmetric."""
    r = _psd_sqrt(S1)
    M = r @ S2 @ r
    w = np.linalg.eigvalsh((M + M.T) / 2)
    if w.min() < -EIG_WARN:
        log.warning("clamping negative eigenvalue %.3g in the Frechet cross term", w.min())
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_from_moments(mu1, S1, mu2, S2) -> float:
    d = float(((mu1 - mu2) ** 2).sum())
    val = d + float(np.trace(S1) + np.trace(S2)) - 2 * trace_sqrt_product(S1, S2)
    return max(val, 0.0)


def frechet_gaussian(samples_a, samples_b, *, project_dim: int | None = None,
                     projection_seed: int = 0) -> FrechetReport:
    """``||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`` on flattened samples.

    With ``project_dim`` the flattened pixels first go through a fixed Gaussian
    random projection drawn from ``projection_seed`` (same matrix for both sides).
    """
    a, projected = _features(samples_a, project_dim, projection_seed)
    b, _ = _features(samples_b, project_dim, projection_seed)
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    dim = a.shape[1]
    if min(len(a), len(b)) < 2 * dim:
        raise ValueError(f"need at least {2 * dim} samples per side for {dim}-dim features, "
                         f"got {len(a)} and {len(b)}")
    # the cross term is symmetric only up to round-off; average both orders
    mu_a, mu_b = a.mean(0), b.mean(0)
    S_a, S_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    score = 0.5 * (frechet_from_moments(mu_a, S_a, mu_b, S_b) + frechet_from_moments(mu_b, S_b, mu_a, S_a))
    desc = f"proj{dim}(seed={projection_seed})" if projected else f"pixels[{dim}]"
    return FrechetReport(score, len(a), len(b), desc)
