"""Latent dynamics models: a linear update on the lifted state [z, z_dot] and
a damped oscillator network integrated with semi-implicit (symplectic) Euler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError

DIVERGENCE_LIMIT = 1e6


def inverse_softplus(y: float) -> float:
    """Raw value r with softplus(r) = y, for initializing constrained params."""
    if y <= 0:
        raise ValueError("softplus output is strictly positive")
    return math.log(math.expm1(y))


class InputNet(nn.Module):
    """Two-layer tanh feed-forward map from actuation inputs to latent forces."""

    def __init__(self, n_inputs: int, out_dim: int, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(n_inputs, hidden), nn.Tanh(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        return self.net(u)


class KoopmanDynamics(nn.Module):
    """Linear transition on the lifted state xi = [z, z_dot] plus an input term.

    The transition matrix starts as the exact-integrator prior
    [[I, dt*I], [0, I]], i.e. initially z advances by dt*z_dot and velocities
    persist; training is free to move it anywhere (the matrix is unconstrained).
    """

    def __init__(self, latent_dim: int, n_inputs: int, dt: float = 1.0 / 60.0):
        super().__init__()
        self.latent_dim = latent_dim
        self.n_inputs = n_inputs
        self.dt = dt
        eye = torch.eye(latent_dim)
        top = torch.cat([eye, dt * eye], dim=1)
        bottom = torch.cat([torch.zeros(latent_dim, latent_dim), eye], dim=1)
        self.transition = nn.Parameter(torch.cat([top, bottom], dim=0))
        self.input_net = InputNet(n_inputs, 2 * latent_dim)

    def koopman_step(self, xi: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        if xi.shape[-1] != 2 * self.latent_dim:
            raise ShapeError(
                f"lifted state must have size {2 * self.latent_dim}, got {xi.shape[-1]}"
            )
        return xi @ self.transition.T + self.input_net(u)

    def step(self, z: torch.Tensor, zdot: torch.Tensor, u: torch.Tensor):
        xi = torch.cat([z, zdot], dim=-1)
        nxt = self.koopman_step(xi, u)
        return nxt[..., : self.latent_dim], nxt[..., self.latent_dim:]


def rayleigh_damping(mass_diag: torch.Tensor, stiffness: torch.Tensor,
                     alpha: float | torch.Tensor, beta: float | torch.Tensor) -> torch.Tensor:
    """D = alpha*M + beta*K with diagonal M; symmetric PSD for alpha, beta >= 0."""
    return alpha * torch.diag(mass_diag) + beta * stiffness


def oscillator_step(
    z: torch.Tensor,
    zdot: torch.Tensor,
    force: torch.Tensor,
    mass_diag: torch.Tensor,
    damping: torch.Tensor,
    stiffness: torch.Tensor,
    rest: torch.Tensor,
    dt: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One semi-implicit Euler step of M z_ddot + D z_dot + K (z - z0) = force.

    Velocity first, then position with the *updated* velocity; this ordering is
    what gives the bounded-energy behavior on undamped oscillators.
    """
    accel = (force - zdot @ damping.T - (z - rest) @ stiffness.T) / mass_diag
    zdot_next = zdot + dt * accel
    z_next = z + dt * zdot_next
    return z_next, zdot_next


class OscillatorDynamics(nn.Module):
    """Damped oscillator network with learnable positive-definite structure.

    Mass is diagonal via softplus; stiffness is L L^T + eps*I with learnable
    lower-triangular L; Rayleigh coefficients go through softplus so damping
    stays PSD. With `two_d=True`, consecutive latent pairs form 2D oscillators
    sharing a single mass parameter, so both components always weigh the same.
    """

    def __init__(
        self,
        latent_dim: int,
        n_inputs: int,
        dt: float = 1.0 / 60.0,
        two_d: bool = False,
        eps_mass: float = 1e-4,
        eps_stiffness: float = 1e-4,
        init_alpha: float = 0.1,
        init_beta: float = 0.1,
    ):
        super().__init__()
        if two_d and latent_dim % 2 != 0:
            raise ShapeError(f"2D oscillator mode needs an even latent_dim, got {latent_dim}")
        self.latent_dim = latent_dim
        self.n_inputs = n_inputs
        self.dt = dt
        self.two_d = two_d
        self.eps_mass = eps_mass
        self.eps_stiffness = eps_stiffness

        n_mass = latent_dim // 2 if two_d else latent_dim
        raw_unit_mass = inverse_softplus(1.0 - eps_mass)
        self.raw_mass = nn.Parameter(torch.full((n_mass,), raw_unit_mass))
        self.stiffness_factor = nn.Parameter(torch.eye(latent_dim))
        self.raw_alpha = nn.Parameter(torch.tensor(inverse_softplus(init_alpha)))
        self.raw_beta = nn.Parameter(torch.tensor(inverse_softplus(init_beta)))
        self.rest = nn.Parameter(torch.zeros(latent_dim))
        self.input_net = InputNet(n_inputs, latent_dim)

    def mass(self) -> torch.Tensor:
        m = torch.nn.functional.softplus(self.raw_mass) + self.eps_mass
        if self.two_d:
            m = m.repeat_interleave(2)
        return m

    def stiffness(self) -> torch.Tensor:
        tril = torch.tril(self.stiffness_factor)
        eye = torch.eye(self.latent_dim, dtype=tril.dtype, device=tril.device)
        return tril @ tril.T + self.eps_stiffness * eye

    @property
    def alpha(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.raw_alpha)

    @property
    def beta(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.raw_beta)

    def damping(self) -> torch.Tensor:
        return rayleigh_damping(self.mass(), self.stiffness(), self.alpha, self.beta)

    def set_rest_point(self, z: torch.Tensor) -> None:
        """Anchor the learnable rest point, e.g. at the encoded rest frame."""
        with torch.no_grad():
            self.rest.copy_(z.reshape(self.latent_dim))

    def step(self, z: torch.Tensor, zdot: torch.Tensor, u: torch.Tensor):
        return oscillator_step(
            z, zdot, self.input_net(u), self.mass(), self.damping(),
            self.stiffness(), self.rest, self.dt,
        )


def group_oscillators(z: torch.Tensor, zdot: torch.Tensor | None = None):
    """Reshape latents (..., k) into 2D oscillator pairs (..., k/2, 2)."""
    k = z.shape[-1]
    if k % 2 != 0:
        raise ShapeError(f"cannot pair an odd latent dimension {k} into 2D oscillators")
    q = z.reshape(*z.shape[:-1], k // 2, 2)
    if zdot is None:
        return q
    if zdot.shape != z.shape:
        raise ShapeError("position and velocity shapes differ")
    return q, zdot.reshape(*z.shape[:-1], k // 2, 2)


def ungroup_oscillators(q: torch.Tensor) -> torch.Tensor:
    return q.reshape(*q.shape[:-2], q.shape[-2] * 2)


@dataclass
class RolloutResult:
    """States from repeated one-step prediction; diverged samples are frozen at
    their last finite state and flagged."""

    z: torch.Tensor          # (B, H, k)
    zdot: torch.Tensor       # (B, H, k)
    diverged: torch.Tensor   # (B,) bool
    steps_completed: torch.Tensor  # (B,) steps before divergence (== H if clean)


def rollout(model, z0: torch.Tensor, zdot0: torch.Tensor, u_seq: torch.Tensor) -> RolloutResult:
    """Apply `model.step` autoregressively for u_seq.shape[1] steps.

    u_seq has shape (B, H, n_u). Any state component exceeding 1e6 in
    magnitude (or going non-finite) marks that sample diverged; its trailing
    states repeat the last good one.
    """
    if u_seq.ndim != 3:
        raise ShapeError(f"u_seq must be (B, H, n_u), got {tuple(u_seq.shape)}")
    horizon = u_seq.shape[1]
    if horizon < 1:
        raise ShapeError("rollout horizon must be >= 1")
    z, zdot = z0, zdot0
    batch = z0.shape[0]
    diverged = torch.zeros(batch, dtype=torch.bool, device=z0.device)
    steps = torch.full((batch,), horizon, dtype=torch.long, device=z0.device)
    zs, zdots = [], []
    for h in range(horizon):
        z_new, zdot_new = model.step(z, zdot, u_seq[:, h])
        state = torch.cat([z_new, zdot_new], dim=-1)
        bad = (~torch.isfinite(state)).any(dim=-1) | (state.abs() > DIVERGENCE_LIMIT).any(dim=-1)
        newly = bad & ~diverged
        steps[newly] = h
        diverged = diverged | bad
        keep = diverged.unsqueeze(-1)
        z = torch.where(keep, z, z_new)
        zdot = torch.where(keep, zdot, zdot_new)
        zs.append(z)
        zdots.append(zdot)
    return RolloutResult(
        z=torch.stack(zs, dim=1),
        zdot=torch.stack(zdots, dim=1),
        diverged=diverged,
        steps_completed=steps,
    )
