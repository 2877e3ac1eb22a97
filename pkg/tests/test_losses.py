"""Loss terms: closed-form values, convexity/monotonicity properties, and the
pairwise coupling hand-oracle."""

import math

import numpy as np
import torch

import pytest

from vidyn.autodiff import grad_check
from vidyn.errors import ShapeError
from vidyn.losses import (
    LossBreakdown,
    LossWeights,
    attention_consistency_loss,
    attention_coupling_loss,
    basic_loss,
    kl_divergence,
    loss_grad_check_cases,
    normalized_observation_speed,
    steady_state_loss,
)

DT = 1.0 / 60.0


def seeded(seed):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


# ----------------------------------------------------------------- weights/kl


def test_loss_weights_reject_bad_values():
    with pytest.raises(ValueError):
        LossWeights(kl=-1.0)
    with pytest.raises(ValueError):
        LossWeights(steady_state=float("inf"))
    with pytest.raises(ValueError):
        LossWeights(dynamic_recon=float("nan"))


def test_kl_standard_normal_is_zero():
    mu = torch.zeros(3, 4)
    logvar = torch.zeros(3, 4)
    assert float(kl_divergence(mu, logvar)) == 0.0


def test_kl_unit_mean_single_dim():
    value = kl_divergence(torch.ones(1, 1), torch.zeros(1, 1))
    assert float(value) == pytest.approx(0.5, abs=1e-7)


def test_kl_batch_mean():
    mu = torch.tensor([[0.0], [1.0]])
    logvar = torch.zeros(2, 1)
    assert float(kl_divergence(mu, logvar)) == pytest.approx(0.25, abs=1e-7)


def test_kl_nonnegative():
    g = seeded(0)
    for _ in range(50):
        mu = torch.randn(4, 6, generator=g, dtype=torch.float64) * 2.0
        logvar = torch.randn(4, 6, generator=g, dtype=torch.float64) * 2.0
        assert float(kl_divergence(mu, logvar)) >= -1e-12


# ----------------------------------------------------------------- basic loss


def _random_basic_inputs(g, weights, dt=DT):
    frames = torch.rand(2, 3, 8, 8, generator=g)
    frames_next = torch.rand(2, 3, 8, 8, generator=g)
    recon_s = torch.rand(2, 3, 8, 8, generator=g)
    recon_d = torch.rand(2, 3, 8, 8, generator=g)
    mu = torch.randn(2, 4, generator=g)
    logvar = torch.randn(2, 4, generator=g)
    z_pred = torch.randn(2, 4, generator=g)
    z_next = torch.randn(2, 4, generator=g)
    v_pred = torch.randn(2, 4, generator=g)
    v_next = torch.randn(2, 4, generator=g)
    return basic_loss(
        recon_s, frames, recon_d, frames_next, mu, logvar,
        z_pred, z_next, v_pred, v_next, dt, weights,
    )


def test_basic_loss_zero_for_perfect_model():
    g = seeded(1)
    frames = torch.rand(2, 3, 8, 8, generator=g)
    frames_next = torch.rand(2, 3, 8, 8, generator=g)
    z = torch.randn(2, 4, generator=g)
    v = torch.randn(2, 4, generator=g)
    out = basic_loss(
        frames, frames, frames_next, frames_next,
        torch.zeros(2, 4), torch.zeros(2, 4), z, z, v, v, DT, LossWeights(),
    )
    for name, term in out.terms.items():
        assert float(term) == 0.0, name
    assert float(out.total) == 0.0


def test_basic_loss_total_is_weighted_sum():
    weights = LossWeights(dynamic_recon=0.7, kl=0.3, latent_consistency=2.0)
    out = _random_basic_inputs(seeded(2), weights)
    manual = sum(out.weights[n] * float(v) for n, v in out.terms.items())
    assert float(out.total) == pytest.approx(manual, rel=1e-6)
    assert set(out.terms) == {"static_recon", "dynamic_recon", "kl", "latent_consistency"}


def test_basic_loss_reduces_to_autoencoder_mse():
    weights = LossWeights(dynamic_recon=0.0, kl=0.0, latent_consistency=0.0)
    g = seeded(3)
    frames = torch.rand(2, 3, 8, 8, generator=g)
    recon = torch.rand(2, 3, 8, 8, generator=g)
    out = basic_loss(
        recon, frames, torch.rand(2, 3, 8, 8, generator=g), torch.rand(2, 3, 8, 8, generator=g),
        torch.randn(2, 4, generator=g), torch.randn(2, 4, generator=g),
        torch.randn(2, 4, generator=g), torch.randn(2, 4, generator=g),
        torch.randn(2, 4, generator=g), torch.randn(2, 4, generator=g),
        DT, weights,
    )
    assert float(out.total) == pytest.approx(
        float(torch.nn.functional.mse_loss(recon, frames)), rel=1e-7
    )


def test_consistency_velocity_error_scales_with_dt_squared():
    g = seeded(4)
    z = torch.randn(2, 4, generator=g)
    v_pred = torch.randn(2, 4, generator=g)
    v_next = torch.randn(2, 4, generator=g)
    frames = torch.rand(2, 3, 8, 8, generator=g)

    def consistency(dt):
        out = basic_loss(
            frames, frames, frames, frames, torch.zeros(2, 4), torch.zeros(2, 4),
            z, z, v_pred, v_next, dt, LossWeights(),
        )
        return float(out.terms["latent_consistency"])

    assert consistency(2 * DT) == pytest.approx(4.0 * consistency(DT), rel=1e-5)


def test_breakdown_detached_reports_total():
    out = LossBreakdown()
    out.add("a", torch.tensor(2.0), 0.5)
    out.add("b", torch.tensor(3.0), 1.0)
    report = out.detached()
    assert report == {"a": 2.0, "b": 3.0, "total": 4.0}


# --------------------------------------------------------------- steady state


def test_steady_state_zero_at_rest():
    rest = torch.randn(4, generator=seeded(5))
    z = rest.unsqueeze(0).repeat(3, 1)
    value, n = steady_state_loss(z, torch.zeros(3, 4), rest, DT)
    assert n == 3
    assert float(value) == 0.0


def test_steady_state_unit_offset():
    rest = torch.zeros(1)
    value, n = steady_state_loss(torch.ones(2, 1), torch.zeros(2, 1), rest, DT)
    assert n == 2
    assert float(value) == pytest.approx(1.0, abs=1e-7)


def test_steady_state_decreases_toward_rest():
    rest = torch.randn(3, generator=seeded(6))
    direction = torch.randn(3, generator=seeded(7))
    values = []
    for s in (2.0, 1.0, 0.5, 0.0):
        z = (rest + s * direction).unsqueeze(0)
        value, _ = steady_state_loss(z, torch.zeros(1, 3), rest, DT)
        values.append(float(value))
    assert values == sorted(values, reverse=True)
    assert values[-1] == 0.0


def test_steady_state_velocity_term_scaled_by_dt():
    rest = torch.zeros(1)
    value, _ = steady_state_loss(
        torch.zeros(1, 1), torch.full((1, 1), 3.0), rest, 0.1
    )
    assert float(value) == pytest.approx((0.1 * 3.0) ** 2, rel=1e-6)


def test_steady_state_mask_and_empty_selection():
    rest = torch.zeros(2)
    z = torch.ones(4, 2)
    mask = torch.tensor([True, False, True, False])
    value, n = steady_state_loss(z, torch.zeros(4, 2), rest, DT, mask)
    assert n == 2 and float(value) == pytest.approx(1.0, abs=1e-7)
    value, n = steady_state_loss(z, torch.zeros(4, 2), rest, DT, torch.zeros(4, dtype=torch.bool))
    assert n == 0 and float(value) == 0.0


# -------------------------------------------------------- observation speed


def test_observation_speed_zero_for_static_frames():
    speed = normalized_observation_speed(torch.zeros(2, 3, 8, 8))
    assert torch.equal(speed, torch.zeros(2, 8, 8))


def test_observation_speed_normalized_to_peak():
    o_dot = torch.zeros(1, 3, 4, 4)
    o_dot[0, :, 1, 2] = 5.0
    speed = normalized_observation_speed(o_dot)
    assert speed.shape == (1, 4, 4)
    assert float(speed.max()) > 0.999
    assert float(speed.min()) == 0.0
    assert float(speed.max()) <= 1.0


def test_observation_speed_channel_mean():
    o_dot = torch.zeros(1, 3, 2, 2)
    o_dot[0, 0, 0, 0] = 3.0
    o_dot[0, 1, 0, 0] = -3.0
    o_dot[0, 2, 0, 0] = 3.0
    o_dot[0, :, 1, 1] = 6.0
    speed = normalized_observation_speed(o_dot)
    assert float(speed[0, 0, 0]) == pytest.approx(0.5, rel=1e-5)


# ------------------------------------------------------ attention consistency


def test_attention_consistency_zero_for_static_attention():
    loss = attention_consistency_loss(torch.zeros(2, 3, 8, 8), torch.rand(2, 8, 8))
    assert float(loss) == 0.0


def test_attention_consistency_zero_when_everything_moves():
    a_dot = torch.randn(2, 3, 8, 8, generator=seeded(8))
    loss = attention_consistency_loss(a_dot, torch.ones(2, 8, 8))
    assert float(loss) == 0.0


def test_attention_consistency_single_pixel_value():
    a_dot = torch.zeros(1, 1, 2, 2)
    a_dot[0, 0, 0, 0] = 1.0
    loss = attention_consistency_loss(a_dot, torch.zeros(1, 2, 2))
    assert float(loss) == pytest.approx(0.25, abs=1e-7)


def test_attention_consistency_monotone_in_speed():
    g = seeded(9)
    for _ in range(10):
        a_dot = torch.randn(1, 2, 6, 6, generator=g)
        slow = torch.rand(1, 6, 6, generator=g) * 0.5
        fast = (slow + torch.rand(1, 6, 6, generator=g) * 0.5).clamp(max=1.0)
        assert float(attention_consistency_loss(a_dot, fast)) <= float(
            attention_consistency_loss(a_dot, slow)
        ) + 1e-9


def test_attention_consistency_grid_mismatch():
    with pytest.raises(ShapeError):
        attention_consistency_loss(torch.zeros(1, 2, 8, 8), torch.zeros(1, 4, 4))


# ---------------------------------------------------------- coupling loss


def coupling_oracle(q, qdot, p, pdot, eps=1e-6):
    """Direct loop transcription of the pairwise formula, kept independent of
    the tensor implementation."""
    n = q.shape[0]

    def ratios(x, v):
        out = np.zeros((n, n))
        for l in range(n):
            for m in range(n):
                if l == m:
                    continue
                d = x[l] - x[m]
                dist = math.sqrt(float((d * d).sum()) + eps * eps)
                sep = float((d * (v[l] - v[m])).sum()) / dist
                sl = math.sqrt(float((v[l] * v[l]).sum()) + eps * eps)
                sm = math.sqrt(float((v[m] * v[m]).sum()) + eps * eps)
                out[l, m] = sep / (0.5 * (sl + sm) + eps)
        return out

    rl = ratios(q, qdot)
    ri = ratios(p, pdot)
    vals = [
        (rl[l, m] - ri[l, m]) ** 2 for l in range(n) for m in range(n) if l != m
    ]
    return float(np.mean(vals))


def test_coupling_zero_for_proportional_motion():
    g = seeded(10)
    q = torch.randn(2, 4, 2, generator=g, dtype=torch.float64)
    qdot = torch.randn(2, 4, 2, generator=g, dtype=torch.float64)
    loss = attention_coupling_loss(q, qdot, 2.5 * q, 2.5 * qdot)
    assert float(loss) < 1e-10


def test_coupling_zero_for_all_static():
    g = seeded(11)
    q = torch.randn(1, 3, 2, generator=g, dtype=torch.float64)
    p = torch.randn(1, 3, 2, generator=g, dtype=torch.float64)
    zeros = torch.zeros_like(q)
    assert float(attention_coupling_loss(q, zeros, p, zeros)) == 0.0


def test_coupling_unit_rate_mismatch_matches_hand_oracle():
    # latent pair separating at unit normalized rate, image completely static
    q = torch.tensor([[[0.0, 0.0], [1.0, 0.0]]], dtype=torch.float64)
    qdot = torch.tensor(
        [[[-0.5, math.sqrt(3.0) / 2.0], [0.5, math.sqrt(3.0) / 2.0]]],
        dtype=torch.float64,
    )
    p = torch.tensor([[[0.0, 0.0], [1.0, 0.0]]], dtype=torch.float64)
    pdot = torch.zeros_like(p)
    loss = float(attention_coupling_loss(q, qdot, p, pdot))
    oracle = coupling_oracle(q[0].numpy(), qdot[0].numpy(), p[0].numpy(), pdot[0].numpy())
    assert loss == pytest.approx(oracle, abs=1e-9)
    assert loss == pytest.approx(1.0, abs=1e-5)


def test_coupling_matches_oracle_on_random_inputs():
    g = seeded(12)
    for _ in range(5):
        q = torch.randn(1, 3, 2, generator=g, dtype=torch.float64)
        qdot = torch.randn(1, 3, 2, generator=g, dtype=torch.float64)
        p = torch.randn(1, 3, 2, generator=g, dtype=torch.float64)
        pdot = torch.randn(1, 3, 2, generator=g, dtype=torch.float64)
        loss = float(attention_coupling_loss(q, qdot, p, pdot))
        oracle = coupling_oracle(q[0].numpy(), qdot[0].numpy(), p[0].numpy(), pdot[0].numpy())
        assert loss == pytest.approx(oracle, rel=1e-9, abs=1e-12)


def test_coupling_invariant_to_uniform_rescaling():
    g = seeded(13)
    q = torch.randn(1, 4, 2, generator=g, dtype=torch.float64)
    qdot = torch.randn(1, 4, 2, generator=g, dtype=torch.float64)
    p = torch.randn(1, 4, 2, generator=g, dtype=torch.float64)
    pdot = torch.randn(1, 4, 2, generator=g, dtype=torch.float64)
    base = float(attention_coupling_loss(q, qdot, p, pdot))
    scaled = float(attention_coupling_loss(3.0 * q, 3.0 * qdot, p, pdot))
    assert scaled == pytest.approx(base, abs=1e-5)


def test_coupling_needs_two_oscillators():
    one = torch.zeros(1, 1, 2)
    with pytest.raises(ShapeError):
        attention_coupling_loss(one, one, one, one)


def test_all_losses_nonnegative():
    g = seeded(14)
    for _ in range(20):
        out = _random_basic_inputs(g, LossWeights())
        for name, term in out.terms.items():
            assert float(term) >= 0.0, name
        a_dot = torch.randn(1, 2, 5, 5, generator=g)
        speed = torch.rand(1, 5, 5, generator=g)
        assert float(attention_consistency_loss(a_dot, speed)) >= 0.0
        q = torch.randn(1, 3, 2, generator=g)
        qdot = torch.randn(1, 3, 2, generator=g)
        p = torch.randn(1, 3, 2, generator=g)
        pdot = torch.randn(1, 3, 2, generator=g)
        assert float(attention_coupling_loss(q, qdot, p, pdot)) >= 0.0


# --------------------------------------------------------------- grad checks


def test_loss_terms_pass_grad_check():
    cases = loss_grad_check_cases()
    assert [name for name, _, _ in cases] == [
        "reconstruction_mse", "kl_divergence", "latent_consistency",
        "steady_state", "attention_consistency", "attention_coupling",
    ]
    for name, f, shape in cases:
        for k in range(2):
            x = torch.randn(shape, generator=seeded(100 + k), dtype=torch.float64)
            report = grad_check(f, x, tol=1e-3)
            assert report.passed, f"{name}: {report}"
