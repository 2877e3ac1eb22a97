"""Koopman and oscillator dynamics: initialization, integrator behavior,
positive-definite structure, and rollouts."""

import numpy as np
import torch

import pytest

from vidyn.dynamics import (
    KoopmanDynamics,
    OscillatorDynamics,
    RolloutResult,
    group_oscillators,
    inverse_softplus,
    oscillator_step,
    rayleigh_damping,
    rollout,
    ungroup_oscillators,
)
from vidyn.errors import ShapeError


def zero_input_net(module):
    with torch.no_grad():
        module.input_net.net[-1].weight.zero_()
        module.input_net.net[-1].bias.zero_()


# -------------------------------------------------------------------- koopman


def test_inverse_softplus_roundtrip():
    for y in (0.1, 1.0, 5.0):
        assert torch.nn.functional.softplus(
            torch.tensor(inverse_softplus(y))
        ).item() == pytest.approx(y, rel=1e-6)
    with pytest.raises(ValueError):
        inverse_softplus(0.0)


def test_koopman_transition_initialized_as_integrator():
    dt = 1.0 / 60.0
    dyn = KoopmanDynamics(3, 2, dt=dt)
    eye = torch.eye(3)
    expected = torch.cat(
        [torch.cat([eye, dt * eye], dim=1), torch.cat([torch.zeros(3, 3), eye], dim=1)]
    )
    assert torch.equal(dyn.transition.detach(), expected)


def test_koopman_init_advances_position_by_velocity():
    torch.manual_seed(0)
    dyn = KoopmanDynamics(4, 2, dt=0.5)
    zero_input_net(dyn)
    z = torch.randn(3, 4)
    zdot = torch.randn(3, 4)
    z_next, zdot_next = dyn.step(z, zdot, torch.zeros(3, 2))
    assert torch.allclose(z_next, z + 0.5 * zdot, atol=1e-6)
    assert torch.allclose(zdot_next, zdot, atol=1e-6)


def test_koopman_step_linear_in_state():
    torch.manual_seed(1)
    dyn = KoopmanDynamics(3, 2).double()
    u = torch.randn(2, 2, dtype=torch.float64)
    xi1 = torch.randn(2, 6, dtype=torch.float64)
    xi2 = torch.randn(2, 6, dtype=torch.float64)
    base = dyn.koopman_step(torch.zeros(2, 6, dtype=torch.float64), u)
    lhs = dyn.koopman_step(xi1 + xi2, u) - base
    rhs = (dyn.koopman_step(xi1, u) - base) + (dyn.koopman_step(xi2, u) - base)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_koopman_geometric_decay():
    torch.manual_seed(2)
    dyn = KoopmanDynamics(2, 1)
    zero_input_net(dyn)
    with torch.no_grad():
        dyn.transition.copy_(0.5 * torch.eye(4))
    xi = torch.tensor([[1.0, -2.0, 4.0, 8.0]])
    u = torch.zeros(1, 1)
    with torch.no_grad():
        for _ in range(30):
            xi = dyn.koopman_step(xi, u)
    assert torch.equal(xi, 0.5**30 * torch.tensor([[1.0, -2.0, 4.0, 8.0]]))


def test_koopman_step_rejects_wrong_state_size():
    dyn = KoopmanDynamics(3, 2)
    with pytest.raises(ShapeError):
        dyn.koopman_step(torch.zeros(1, 5), torch.zeros(1, 2))


def test_koopman_input_term_offsets_state():
    torch.manual_seed(3)
    dyn = KoopmanDynamics(2, 2)
    u = torch.randn(1, 2)
    out = dyn.koopman_step(torch.zeros(1, 4), u)
    assert torch.allclose(out, dyn.input_net(u), atol=1e-7)


# ---------------------------------------------------------- oscillator (pure)


def test_rayleigh_damping_endpoints():
    m = torch.tensor([1.0, 2.0])
    k = torch.tensor([[3.0, 0.5], [0.5, 4.0]])
    assert torch.equal(rayleigh_damping(m, k, 2.0, 0.0), 2.0 * torch.diag(m))
    assert torch.equal(rayleigh_damping(m, k, 0.0, 3.0), 3.0 * k)


def test_oscillator_step_hand_computed():
    z = torch.tensor([[1.0]], dtype=torch.float64)
    zdot = torch.tensor([[0.0]], dtype=torch.float64)
    z1, v1 = oscillator_step(
        z, zdot,
        force=torch.zeros(1, 1, dtype=torch.float64),
        mass_diag=torch.tensor([1.0], dtype=torch.float64),
        damping=torch.zeros(1, 1, dtype=torch.float64),
        stiffness=torch.eye(1, dtype=torch.float64),
        rest=torch.zeros(1, dtype=torch.float64),
        dt=0.1,
    )
    assert float(v1) == pytest.approx(-0.1, abs=1e-12)
    assert float(z1) == pytest.approx(0.99, abs=1e-12)


def test_oscillator_equilibrium_is_exact_fixed_point():
    torch.manual_seed(4)
    rest = torch.randn(4)
    z = rest.clone().unsqueeze(0)
    zdot = torch.zeros(1, 4)
    k = torch.eye(4) * 5.0
    z1, v1 = oscillator_step(
        z, zdot, torch.zeros(1, 4), torch.ones(4), 0.3 * k, k, rest, dt=1 / 60
    )
    assert torch.equal(z1, z)
    assert torch.equal(v1, zdot)


def undamped_energy_drift(n_steps, dt):
    z = torch.tensor([[1.0]], dtype=torch.float64)
    v = torch.zeros(1, 1, dtype=torch.float64)
    mass = torch.ones(1, dtype=torch.float64)
    stiff = torch.eye(1, dtype=torch.float64)
    damp = torch.zeros(1, 1, dtype=torch.float64)
    rest = torch.zeros(1, dtype=torch.float64)
    force = torch.zeros(1, 1, dtype=torch.float64)
    e0 = 0.5 * float(v.pow(2).sum() + z.pow(2).sum())
    worst = 0.0
    for _ in range(n_steps):
        z, v = oscillator_step(z, v, force, mass, damp, stiff, rest, dt)
        e = 0.5 * float(v.pow(2).sum() + z.pow(2).sum())
        worst = max(worst, abs(e - e0) / e0)
    return worst


def test_undamped_energy_bounded():
    assert undamped_energy_drift(10_000, 0.01) <= 0.02


def test_damped_oscillator_loses_energy():
    z = torch.tensor([[1.0]], dtype=torch.float64)
    v = torch.zeros(1, 1, dtype=torch.float64)
    for _ in range(2000):
        z, v = oscillator_step(
            z, v, torch.zeros(1, 1, dtype=torch.float64),
            torch.ones(1, dtype=torch.float64),
            0.5 * torch.eye(1, dtype=torch.float64),
            torch.eye(1, dtype=torch.float64),
            torch.zeros(1, dtype=torch.float64), 0.01,
        )
    assert 0.5 * float(v.pow(2).sum() + z.pow(2).sum()) < 0.05


# --------------------------------------------------------- oscillator (model)


def test_mass_strictly_positive_for_any_raw_value():
    dyn = OscillatorDynamics(4, 2)
    with torch.no_grad():
        dyn.raw_mass.copy_(torch.tensor([-50.0, -1.0, 0.0, 30.0]))
    m = dyn.mass().detach()
    floor = torch.tensor(dyn.eps_mass, dtype=m.dtype)
    assert bool((m >= floor).all())
    assert m.shape == (4,)


def test_two_d_masses_tied_pairwise():
    torch.manual_seed(5)
    dyn = OscillatorDynamics(6, 2, two_d=True)
    with torch.no_grad():
        dyn.raw_mass.copy_(torch.randn(3))
    m = dyn.mass()
    assert m.shape == (6,)
    assert torch.equal(m[0::2], m[1::2])


def test_two_d_mass_tie_survives_gradient_step():
    torch.manual_seed(6)
    dyn = OscillatorDynamics(6, 2, two_d=True)
    z = torch.randn(5, 6)
    zdot = torch.randn(5, 6)
    u = torch.randn(5, 2)
    z1, v1 = dyn.step(z, zdot, u)
    (z1.pow(2).sum() + v1.pow(2).sum()).backward()
    with torch.no_grad():
        for p in dyn.parameters():
            if p.grad is not None:
                p.add_(p.grad, alpha=-0.1)
    m = dyn.mass()
    assert torch.equal(m[0::2], m[1::2])


def test_stiffness_symmetric_with_eigenvalue_floor():
    torch.manual_seed(7)
    for trial in range(10):
        dyn = OscillatorDynamics(6, 2).double()
        with torch.no_grad():
            dyn.stiffness_factor.copy_(torch.randn(6, 6, dtype=torch.float64) * 2.0)
        k = dyn.stiffness().detach()
        assert torch.allclose(k, k.T, atol=1e-9)
        eigs = np.linalg.eigvalsh(k.numpy())
        assert eigs.min() >= dyn.eps_stiffness - 1e-12


def test_damping_positive_semidefinite():
    torch.manual_seed(8)
    for trial in range(10):
        dyn = OscillatorDynamics(4, 2).double()
        with torch.no_grad():
            dyn.raw_mass.copy_(torch.randn(4, dtype=torch.float64) * 3.0)
            dyn.stiffness_factor.copy_(torch.randn(4, 4, dtype=torch.float64))
            dyn.raw_alpha.fill_(float(torch.randn(1) * 2.0))
            dyn.raw_beta.fill_(float(torch.randn(1) * 2.0))
        assert float(dyn.alpha.detach()) > 0.0 and float(dyn.beta.detach()) > 0.0
        d = dyn.damping().detach()
        assert np.linalg.eigvalsh(d.numpy()).min() >= -1e-8


def test_set_rest_point_copies_values():
    dyn = OscillatorDynamics(4, 2)
    target = torch.tensor([[1.0, -2.0, 0.5, 3.0]])
    dyn.set_rest_point(target)
    assert torch.equal(dyn.rest.detach(), target.squeeze(0))


def test_oscillator_model_step_shapes():
    torch.manual_seed(9)
    dyn = OscillatorDynamics(8, 2)
    z1, v1 = dyn.step(torch.randn(7, 8), torch.randn(7, 8), torch.randn(7, 2))
    assert z1.shape == (7, 8) and v1.shape == (7, 8)


def test_two_d_requires_even_latent_dim():
    with pytest.raises(ShapeError):
        OscillatorDynamics(5, 2, two_d=True)


# ------------------------------------------------------------------- grouping


def test_group_ungroup_roundtrip():
    z = torch.arange(12.0).reshape(2, 6)
    q = group_oscillators(z)
    assert q.shape == (2, 3, 2)
    assert torch.equal(q[0, 0], torch.tensor([0.0, 1.0]))
    assert torch.equal(ungroup_oscillators(q), z)


def test_group_with_velocity():
    z = torch.randn(3, 4)
    zdot = torch.randn(3, 4)
    q, qdot = group_oscillators(z, zdot)
    assert q.shape == qdot.shape == (3, 2, 2)
    with pytest.raises(ShapeError):
        group_oscillators(z, torch.randn(3, 6))


def test_group_rejects_odd_dim():
    with pytest.raises(ShapeError):
        group_oscillators(torch.zeros(2, 5))


# -------------------------------------------------------------------- rollout


class _FrozenStep:
    def step(self, z, zdot, u):
        return z, zdot


class _DoublingStep:
    def step(self, z, zdot, u):
        return 2.0 * z, zdot


class _NaNStep:
    def step(self, z, zdot, u):
        return torch.full_like(z, float("nan")), zdot


def test_rollout_single_step_matches_model_step():
    torch.manual_seed(10)
    dyn = OscillatorDynamics(4, 2)
    z0 = torch.randn(3, 4)
    v0 = torch.randn(3, 4)
    u = torch.randn(3, 1, 2)
    with torch.no_grad():
        result = rollout(dyn, z0, v0, u)
        z1, v1 = dyn.step(z0, v0, u[:, 0])
    assert isinstance(result, RolloutResult)
    assert torch.equal(result.z[:, 0], z1)
    assert torch.equal(result.zdot[:, 0], v1)
    assert not bool(result.diverged.any())


def test_rollout_frozen_dynamics_keep_state():
    z0 = torch.randn(2, 3, generator=torch.Generator().manual_seed(0))
    result = rollout(_FrozenStep(), z0, torch.zeros(2, 3), torch.zeros(2, 5, 1))
    assert torch.equal(result.z, z0.unsqueeze(1).expand(2, 5, 3))
    assert torch.equal(result.steps_completed, torch.full((2,), 5))


def test_rollout_divergence_freezes_and_flags():
    z0 = torch.tensor([[2e5], [1.0]])
    result = rollout(_DoublingStep(), z0, torch.zeros(2, 1), torch.zeros(2, 4, 1))
    assert result.diverged.tolist() == [True, False]
    assert result.steps_completed.tolist() == [2, 4]
    # first sample frozen at its last state under the limit
    assert float(result.z[0, 1]) == 8e5
    assert float(result.z[0, 2]) == 8e5
    assert float(result.z[0, 3]) == 8e5
    # second sample keeps doubling
    assert float(result.z[1, 3]) == 16.0


def test_rollout_nan_detected_immediately():
    z0 = torch.ones(1, 2)
    result = rollout(_NaNStep(), z0, torch.zeros(1, 2), torch.zeros(1, 3, 1))
    assert bool(result.diverged.all())
    assert result.steps_completed.tolist() == [0]
    assert torch.equal(result.z[0, 0], z0[0])


def test_rollout_input_validation():
    dyn = _FrozenStep()
    with pytest.raises(ShapeError):
        rollout(dyn, torch.zeros(1, 2), torch.zeros(1, 2), torch.zeros(1, 2))
    with pytest.raises(ShapeError):
        rollout(dyn, torch.zeros(1, 2), torch.zeros(1, 2), torch.zeros(1, 0, 2))
