"""End-to-end transfer check: recover a diagonal pushforward scale with a trained sampler.

The base sampler ``G`` models ``Q0`` (unit-Gaussian images). The target is
``P0 = gamma_star * Q0`` channel-wise. Only a per-channel output scale
``gamma`` on top of ``G`` is fitted, by gradient descent on the second-moment
mismatch ``sum_c (gamma_c^2 m_G[c] - m_P[c])^2``, whose minimiser has the
closed form ``gamma_c = sqrt(m_P[c] / m_G[c])``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import DatasetSpec, ToyDataset
from .diffusion import NoiseSchedule
from .metrics import frechet_gaussian
from .model import DiT, ModelSpec, build_model
from .peft import OptimizerConfig, SelectionPolicy, iter_batches, train_steps


class UntrainedModel(ValueError):
    pass


@dataclass
class PushforwardReport:
    gamma_star: list[float]
    gamma_hat: list[float]
    gamma_closed_form: list[float]
    distance_before: float
    distance_after: float
    max_rel_gamma_err: float


def train_gaussian_base(spec: ModelSpec, schedule: NoiseSchedule, steps: int = 600, seed: int = 0,
                        lr: float = 1e-3, batch_size: int = 64, n_train: int = 4096) -> DiT:
    """A small DiT trained on unit-Gaussian images of a single class."""
    data = ToyDataset(DatasetSpec("unit_gaussian", spec.image_size, spec.num_classes))
    x, y = data.sample(n_train, seed)
    model = build_model(spec, seed=seed)
    train_steps(model, SelectionPolicy(("*",)), iter_batches(x, y, batch_size), OptimizerConfig(lr=lr),
                steps, seed, schedule)
    return model


def _channel_m2(x: torch.Tensor) -> torch.Tensor:
    return (x.double() ** 2).mean(dim=(0, 2, 3))


def fit_output_scale(gen: torch.Tensor, target: torch.Tensor, steps: int = 2000, lr: float = 0.05,
                     tol: float = 1e-12) -> torch.Tensor:
    m_g, m_p = _channel_m2(gen), _channel_m2(target)
    gamma = torch.ones_like(m_g, requires_grad=True)
    opt = torch.optim.Adam([gamma], lr=lr)
    for _ in range(steps):
        loss = ((gamma ** 2 * m_g - m_p) ** 2).sum()
        if loss.item() < tol:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    return gamma.detach().abs()


def pushforward_transfer_check(base_model: DiT, gamma_star, seed: int, schedule: NoiseSchedule, *,
                               n: int = 512, project_dim: int | None = 32) -> PushforwardReport:
    from .harness import sample_images

    if torch.count_nonzero(base_model.final.linear.weight) == 0:
        raise UntrainedModel("base model output layer is still at its zero initialisation")
    spec = base_model.spec
    g_star = torch.as_tensor(gamma_star, dtype=torch.float64).reshape(-1).expand(spec.channels)
    ss = np.random.SeedSequence(seed).spawn(4)
    seeds = [int(s.generate_state(1)[0]) for s in ss]
    data = ToyDataset(DatasetSpec("unit_gaussian", spec.image_size, spec.num_classes))
    p_fit = g_star[None, :, None, None] * data.sample(n, seeds[0])[0].double()
    p_eval = g_star[None, :, None, None] * data.sample(n, seeds[1])[0].double()
    g_fit = sample_images(base_model, schedule, n, None, 1.0, seeds[2]).double()
    g_eval = sample_images(base_model, schedule, n, None, 1.0, seeds[3]).double()
    gamma = fit_output_scale(g_fit, p_fit)
    closed = torch.sqrt(_channel_m2(p_fit) / _channel_m2(g_fit))
    before = frechet_gaussian(g_eval, p_eval, project_dim=project_dim, projection_seed=seed).score
    after = frechet_gaussian(gamma[None, :, None, None] * g_eval, p_eval, project_dim=project_dim,
                             projection_seed=seed).score
    rel = float(((gamma - g_star).abs() / g_star.abs()).max())
    return PushforwardReport(g_star.tolist(), gamma.tolist(), closed.tolist(), before, after, rel)
