from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dittune.diffusion import (DEFAULT_LAMBDA_VLB, EVAL_CFG_SCALE, VIS_CFG_SCALE, LossWeights,
                               NoiseSchedule, build_schedule, guided_eps, learned_logvar, loss_hybrid,
                               loss_simple, loss_vlb, normal_kl, p_sample_loop, posterior_coefficients,
                               posterior_mean_var, predict_x0_from_eps, q_sample, vlb_terms)

# alpha_bar_1000 for linear 1e-4..2e-2, from a 50-digit sequential product
ABAR_1000_ORACLE = 0.00004035829765375683314817635


def test_two_step_alpha_bars():
    s = NoiseSchedule.from_betas([0.5, 0.5])
    np.testing.assert_array_equal(s.alpha_bars, [0.5, 0.25])


def test_zero_betas_rejected():
    with pytest.raises(ValueError):
        build_schedule("linear", 3, 0.0, 0.0)


@pytest.mark.parametrize("args", [(0, 1e-4, 2e-2), (10, 2e-2, 1e-4), (10, 1e-4, 1.0), (10, -1e-3, 1e-2)])
def test_schedule_preconditions(args):
    with pytest.raises(ValueError):
        build_schedule("linear", *args)


def test_linear_endpoints_inclusive():
    s = build_schedule("linear", 10, 0.1, 0.3)
    assert s.betas[0] == 0.1 and s.betas[-1] == 0.3


def test_alpha_bar_long_product_oracle():
    s = build_schedule("linear", 1000, 1e-4, 2e-2)
    assert abs(s.alpha_bars[-1] - ABAR_1000_ORACLE) / ABAR_1000_ORACLE < 1e-12
    acc = 1.0
    for t in range(1000):
        acc *= 1.0 - s.betas[t]
        assert s.alpha_bars[t] == acc


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_invariants(kind):
    s = build_schedule(kind, 200, 1e-4, 2e-2)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(s.alpha_bars > 0) and np.all(s.alpha_bars <= 1)
    assert np.all(np.diff(s.alpha_bars) <= 0)
    np.testing.assert_array_equal(s.alpha_bars[1:], s.alpha_bars[:-1] * s.alphas[1:])


def test_loss_weights_default():
    assert LossWeights().lambda_vlb == 0.001 == DEFAULT_LAMBDA_VLB
    with pytest.raises(ValueError):
        LossWeights(-1.0)


def test_q_sample_zero_noise():
    s = build_schedule("linear", 10, 0.01, 0.2)
    x0 = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    t = torch.tensor([1, 5, 10])
    xt = q_sample(x0, t, torch.zeros_like(x0), s)
    scale = torch.from_numpy(np.sqrt(s.alpha_bars[t.numpy() - 1]))[:, None, None, None]
    torch.testing.assert_close(xt, scale * x0, rtol=0, atol=0)


def test_q_sample_identity_limit():
    # direct injection of alpha_bar = 1
    s = build_schedule("linear", 2, 0.1, 0.1)
    s = NoiseSchedule(s.betas, s.alphas, np.array([1.0, 0.9]), s.alpha_bars_prev, s.posterior_variances,
                      s.posterior_log_variances_clipped)
    x0 = torch.randn(2, 1, 2, 2, dtype=torch.float64)
    assert torch.equal(q_sample(x0, 1, torch.randn_like(x0), s), x0)


def test_q_sample_hand_value():
    s = NoiseSchedule.from_betas([0.5, 0.5])
    xt = q_sample(torch.tensor([[1.0]], dtype=torch.float64), 2, torch.tensor([[2.0]], dtype=torch.float64), s)
    assert abs(xt.item() - 2.2320508075688772935) < 1e-12


def test_q_sample_errors():
    s = build_schedule("linear", 10, 0.01, 0.2)
    x0 = torch.zeros(2, 1, 2, 2)
    with pytest.raises(ValueError):
        q_sample(x0, 1, torch.zeros(2, 1, 2, 3), s)
    with pytest.raises(ValueError):
        q_sample(x0, 0, torch.zeros_like(x0), s)
    with pytest.raises(ValueError):
        q_sample(x0, 11, torch.zeros_like(x0), s)


def test_q_sample_moments():
    s = build_schedule("linear", 1000, 1e-4, 2e-2)
    g = torch.Generator().manual_seed(0)
    x0 = torch.full((10_000, 1, 1, 1), 0.7, dtype=torch.float64)
    for t in (1, 300, 1000):
        xt = q_sample(x0, t, torch.randn(x0.shape, generator=g, dtype=torch.float64), s)
        ab = s.alpha_bars[t - 1]
        se = math.sqrt(1 - ab) / math.sqrt(len(xt))
        assert abs(xt.mean().item() - math.sqrt(ab) * 0.7) < 4 * se
        assert abs(xt.var().item() / (1 - ab) - 1) < 0.05


def test_posterior_first_step_collapses():
    s = build_schedule("linear", 10, 0.01, 0.2)
    x0, xt = torch.randn(2, 3, dtype=torch.float64), torch.randn(2, 3, dtype=torch.float64)
    mean, var = posterior_mean_var(x0, xt, 1, s)
    torch.testing.assert_close(mean, x0, rtol=0, atol=1e-14)
    assert torch.all(var == 0)


def test_posterior_coefficient_identity():
    # the coefficients do not sum to 1 in general; the identity that holds is
    # c0 + sqrt(alpha_bar_t) * ct = sqrt(alpha_bar_{t-1}) (the mean of x_{t-1} under q)
    s = build_schedule("linear", 1000, 1e-4, 2e-2)
    c0, ct = posterior_coefficients(s)
    np.testing.assert_allclose(c0 + np.sqrt(s.alpha_bars) * ct, np.sqrt(s.alpha_bars_prev), rtol=0, atol=1e-12)
    two = NoiseSchedule.from_betas([0.5, 0.5])
    a, b = posterior_coefficients(two)
    assert abs(a[1] + b[1] - 1) > 0.05


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-4, 0.5), min_size=2, max_size=12), st.data())
def test_posterior_gaussian_product_oracle(betas, data):
    # Bayes rule: q(x_{t-1}|x0) = N(sqrt(ab_{t-1}) x0, 1 - ab_{t-1}), q(x_t|x_{t-1}) = N(sqrt(a_t) x_{t-1}, b_t)
    s = NoiseSchedule.from_betas(betas)
    t = data.draw(st.integers(2, len(betas)))
    x0 = data.draw(st.floats(-3, 3))
    xt = data.draw(st.floats(-3, 3))
    ab_prev, a, b = s.alpha_bars_prev[t - 1], s.alphas[t - 1], s.betas[t - 1]
    prec = 1 / (1 - ab_prev) + a / b
    mean = (math.sqrt(ab_prev) * x0 / (1 - ab_prev) + math.sqrt(a) * xt / b) / prec
    m, v = posterior_mean_var(torch.tensor([x0], dtype=torch.float64), torch.tensor([xt], dtype=torch.float64), t, s)
    assert abs(m.item() - mean) < 1e-10
    assert abs(v.item() - 1 / prec) < 1e-10


def test_loss_simple_values():
    e = torch.randn(4, 3, 2, 2, dtype=torch.float64)
    assert loss_simple(e, e).item() == 0
    assert loss_simple(torch.zeros(1, 1, 2, 2), torch.ones(1, 1, 2, 2)).item() == 1.0
    p = torch.randn_like(e)
    acc = 0.0
    for a, b in zip(e.flatten().tolist(), p.flatten().tolist()):
        acc += (a - b) ** 2
    assert abs(loss_simple(e, p).item() - acc / e.numel()) < 1e-12
    with pytest.raises(ValueError):
        loss_simple(e, p[:2])


def test_scalar_kl_oracle_and_asymmetry():
    z, one = torch.tensor(0.0, dtype=torch.float64), torch.tensor(1.0, dtype=torch.float64)
    kl = normal_kl(z, z, z, one).item()
    assert abs(kl - 0.5 * (1 / math.e + 0 - 1 + 1)) < 1e-15
    assert abs(normal_kl(z, one, z, z).item() - kl) > 1e-3


def _setup(T=10, n=4):
    s = build_schedule("linear", T, 0.01, 0.2)
    g = torch.Generator().manual_seed(1)
    x0 = torch.randn(n, 2, 3, 3, generator=g, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    return s, g, x0, eps


def test_vlb_zero_at_posterior():
    s, _, x0, eps = _setup()
    t = torch.tensor([2, 4, 7, 10])
    xt = q_sample(x0, t, eps, s)
    mean, var = posterior_mean_var(x0, xt, t, s)
    assert abs(loss_vlb(x0, xt, t, mean, torch.log(var).expand_as(x0), s).item()) < 1e-12


def test_vlb_nonnegative_for_kl_terms():
    s, g, x0, eps = _setup(n=64)
    t = torch.randint(2, 11, (64,), generator=g)
    xt = q_sample(x0, t, eps, s)
    pm = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    pl = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    assert torch.all(vlb_terms(x0, xt, t, pm, pl, s) >= 0)


def test_vlb_first_step_is_nll():
    s, _, x0, eps = _setup(n=1)
    xt = q_sample(x0, 1, eps, s)
    pm, pl = torch.zeros_like(x0), torch.full_like(x0, -0.5)
    expected = (0.5 * (math.log(2 * math.pi) - 0.5 + x0 ** 2 * math.exp(0.5))).mean()
    assert abs(loss_vlb(x0, xt, torch.tensor([1]), pm, pl, s).item() - expected.item()) < 1e-12


def test_vlb_rejects_bad_input():
    s, _, x0, eps = _setup(n=1)
    with pytest.raises(ValueError):
        loss_vlb(x0, x0, torch.tensor([2]), x0, torch.full_like(x0, float("nan")), s)
    with pytest.raises(ValueError):
        loss_vlb(x0, x0, torch.tensor([0]), x0, torch.zeros_like(x0), s)


def test_hybrid_lambda_zero_is_simple():
    s, g, x0, eps = _setup()
    t = torch.tensor([1, 3, 5, 9])
    xt = q_sample(x0, t, eps, s)
    out = (torch.randn(x0.shape, generator=g, dtype=torch.float64), torch.rand(x0.shape, generator=g, dtype=torch.float64))
    assert loss_hybrid(x0, xt, t, eps, out, s, LossWeights(0.0)).item() == loss_simple(eps, out[0]).item()


def test_hybrid_variance_gradient_is_lambda_times_vlb_gradient():
    s, g, x0, eps = _setup()
    t = torch.tensor([1, 3, 5, 9])
    xt = q_sample(x0, t, eps, s)
    eps_pred = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    v = (torch.rand(x0.shape, generator=g, dtype=torch.float64) * 2 - 1).requires_grad_()
    loss_hybrid(x0, xt, t, eps, (eps_pred, v), s).backward()
    analytic = v.grad.clone()

    def vlb_of(vv):
        mean, _ = posterior_mean_var(predict_x0_from_eps(xt, t, eps_pred, s), xt, t, s)
        return loss_vlb(x0, xt, t, mean, learned_logvar(vv, t, s), s).item()

    h = 1e-6
    fd = torch.zeros_like(v)
    flat = v.detach().clone().view(-1)
    for i in range(flat.numel()):
        up, dn = flat.clone(), flat.clone()
        up[i] += h
        dn[i] -= h
        fd.view(-1)[i] = (vlb_of(up.view_as(v)) - vlb_of(dn.view_as(v))) / (2 * h)
    rel = (analytic - DEFAULT_LAMBDA_VLB * fd).abs().max() / (DEFAULT_LAMBDA_VLB * fd).abs().max()
    assert rel < 1e-4


def test_hybrid_mean_path_detached():
    s, g, x0, eps = _setup()
    t = torch.tensor([2, 3, 5, 9])
    xt = q_sample(x0, t, eps, s)
    eps_pred = torch.randn(x0.shape, generator=g, dtype=torch.float64).requires_grad_()
    v = torch.zeros_like(x0)
    loss_hybrid(x0, xt, t, eps, (eps_pred, v), s).backward()
    torch.testing.assert_close(eps_pred.grad, 2 * (eps_pred - eps).detach() / eps.numel())


def test_cfg_defaults():
    assert EVAL_CFG_SCALE == 1.5 and VIS_CFG_SCALE == 4.0


def test_guided_eps_identity_at_one():
    c, u = torch.randn(5), torch.randn(5)
    assert guided_eps(c, u, 1.0) is c
    torch.testing.assert_close(guided_eps(c, u, 2.0), u + 2 * (c - u))


class _LinearModel:
    """A fixed class-dependent linear denoiser for sampler tests."""

    def __init__(self, num_classes=3):
        self.w = torch.linspace(0.1, 0.5, num_classes + 1)

    def __call__(self, x, t, y):
        return self.w[y][:, None, None, None] * x + 0.01 * t[:, None, None, None], torch.zeros_like(x)


def test_sampler_cfg_one_matches_conditional_each_step():
    s = build_schedule("linear", 20, 0.01, 0.2)
    seen = []

    def hook(step, ec, eu, eg):
        seen.append(eu is None and eg is ec)

    p_sample_loop(_LinearModel(), s, (4, 1, 2, 2), 1, 1.0, 0, null_label=3, step_hook=hook)
    assert len(seen) == 20 and all(seen)


def test_sampler_determinism_and_shape():
    s = build_schedule("linear", 20, 0.01, 0.2)
    a = p_sample_loop(_LinearModel(), s, (4, 1, 2, 2), 1, 1.5, 7, null_label=3)
    b = p_sample_loop(_LinearModel(), s, (4, 1, 2, 2), 1, 1.5, 7, null_label=3)
    c = p_sample_loop(_LinearModel(), s, (4, 1, 2, 2), 1, 1.5, 8, null_label=3)
    assert a.shape == (4, 1, 2, 2) and torch.equal(a, b) and not torch.equal(a, c)


def test_sampler_errors():
    s = build_schedule("linear", 5, 0.01, 0.2)
    with pytest.raises(ValueError):
        p_sample_loop(_LinearModel(), s, (4, 1, 2, 2), 4, 1.5, 0, null_label=3)
    with pytest.raises(ValueError):
        p_sample_loop(_LinearModel(), s, (4, 2, 2), 1, 1.5, 0, null_label=3)
    with pytest.raises(ValueError):
        p_sample_loop(_LinearModel(), s, (4, 1, 2, 2), 1, -1.0, 0, null_label=3)
