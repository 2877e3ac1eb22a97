"""Training objectives: the four-term base loss, steady-state anchoring, and
the two attention regularizers.

Every term is non-negative and reported unweighted; the weighted sum is
assembled by :class:`LossBreakdown` so logs always show individual terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ShapeError

EPS_PAIR = 1e-6  # division guard for pairwise distances and mean speeds


@dataclass
class LossWeights:
    dynamic_recon: float = 1.0
    kl: float = 1e-5
    latent_consistency: float = 0.25
    steady_state: float = 0.1
    attention_consistency: float = 0.1
    attention_coupling: float = 0.1

    def __post_init__(self):
        for name, value in vars(self).items():
            if not (value >= 0.0 and value == value and value != float("inf")):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


@dataclass
class LossBreakdown:
    """Unweighted per-term values plus their weights; total is the weighted sum."""

    terms: dict[str, torch.Tensor] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, value: torch.Tensor, weight: float) -> None:
        self.terms[name] = value
        self.weights[name] = float(weight)

    @property
    def total(self) -> torch.Tensor:
        parts = [self.weights[n] * t for n, t in self.terms.items()]
        return torch.stack([p if p.ndim == 0 else p.squeeze() for p in parts]).sum()

    def detached(self) -> dict[str, float]:
        out = {name: float(t.detach()) for name, t in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL of a diagonal Gaussian posterior against N(0, I), batch mean."""
    per_sample = -0.5 * (1.0 + logvar - mu.pow(2) - logvar.exp()).sum(dim=-1)
    return per_sample.mean()


def basic_loss(
    recon_static: torch.Tensor,
    frames: torch.Tensor,
    recon_dynamic: torch.Tensor,
    frames_next: torch.Tensor,
    mu: torch.Tensor,
    logvar: torch.Tensor,
    z_pred_next: torch.Tensor,
    z_next: torch.Tensor,
    zdot_pred_next: torch.Tensor,
    zdot_next: torch.Tensor,
    dt: float,
    weights: LossWeights,
) -> LossBreakdown:
    """Static reconstruction + predicted-frame reconstruction + KL + latent
    consistency. Velocities enter the consistency term scaled by dt so their
    error lives on the same footing as positions."""
    out = LossBreakdown()
    out.add("static_recon", F.mse_loss(recon_static, frames), 1.0)
    out.add("dynamic_recon", F.mse_loss(recon_dynamic, frames_next), weights.dynamic_recon)
    out.add("kl", kl_divergence(mu, logvar), weights.kl)
    consistency = F.mse_loss(z_pred_next, z_next) + F.mse_loss(
        dt * zdot_pred_next, dt * zdot_next
    )
    out.add("latent_consistency", consistency, weights.latent_consistency)
    return out


def steady_state_loss(
    z: torch.Tensor,
    zdot: torch.Tensor,
    rest: torch.Tensor,
    dt: float,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, int]:
    """Pull equilibrium samples to the rest point with zero velocity.

    Returns (loss, n_selected); an empty selection yields a zero loss so the
    caller can flag it.
    """
    if mask is not None:
        z = z[mask]
        zdot = zdot[mask]
    n = z.shape[0]
    if n == 0:
        return z.new_zeros(()), 0
    value = F.mse_loss(z, rest.expand_as(z)) + (dt * zdot).pow(2).mean()
    return value, n


def normalized_observation_speed(o_dot: torch.Tensor) -> torch.Tensor:
    """Per-pixel motion magnitude in [0, 1]: channel-mean |o_dot| over frame max."""
    speed = o_dot.abs().mean(dim=1)
    peak = speed.amax(dim=(-2, -1), keepdim=True)
    return (speed / (peak + 1e-6)).clamp(0.0, 1.0)


def attention_consistency_loss(a_dot: torch.Tensor, obs_speed: torch.Tensor) -> torch.Tensor:
    """Penalize attention motion where the image itself is static.

    a_dot: (B, m, h, w) time derivatives of the latent attention maps (the
    background map is not included); obs_speed: (B, h, w) in [0, 1].
    """
    if a_dot.shape[-2:] != obs_speed.shape[-2:]:
        raise ShapeError("attention and observation grids differ")
    weighted = a_dot.abs() * (1.0 - obs_speed).unsqueeze(1)
    return weighted.mean(dim=(1, 2, 3)).mean()


def _pair_ratios(x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Signed separation rate over the pair's mean speed, for all ordered pairs.

    x, v: (B, n, 2). Returns (B, n, n); the diagonal is meaningless and is
    masked by the caller. Norms are smoothed by EPS_PAIR so coincident points
    and zero velocities stay differentiable.
    """
    diff_pos = x.unsqueeze(2) - x.unsqueeze(1)
    diff_vel = v.unsqueeze(2) - v.unsqueeze(1)
    dist = torch.sqrt(diff_pos.pow(2).sum(-1) + EPS_PAIR**2)
    sep_rate = (diff_pos * diff_vel).sum(-1) / dist
    speed = torch.sqrt(v.pow(2).sum(-1) + EPS_PAIR**2)
    mean_speed = 0.5 * (speed.unsqueeze(2) + speed.unsqueeze(1)) + EPS_PAIR
    return sep_rate / mean_speed


def attention_coupling_loss(
    q: torch.Tensor,
    qdot: torch.Tensor,
    p: torch.Tensor,
    pdot: torch.Tensor,
) -> torch.Tensor:
    """Match normalized pairwise separation rates between latent and image space.

    q, qdot: latent oscillator positions/velocities (B, n, 2); p, pdot: their
    image-space counterparts. Mean over ordered pairs l != m; invariant to a
    uniform positive rescaling of either space.
    """
    n = q.shape[-2]
    if n < 2:
        raise ShapeError(f"coupling loss needs at least 2 oscillators, got {n}")
    ratio_lat = _pair_ratios(q, qdot)
    ratio_img = _pair_ratios(p, pdot)
    sq = (ratio_lat - ratio_img).pow(2)
    off_diag = ~torch.eye(n, dtype=torch.bool, device=q.device)
    return sq[..., off_diag].mean()


def loss_grad_check_cases(dtype=torch.float64):
    """Scalar graphs wrapping each loss term, for finite-difference verification."""
    k = 4
    hw = 5

    def recon_case(x):
        recon, target = torch.sigmoid(x[0]), torch.sigmoid(x[1])
        return F.mse_loss(recon, target)

    def kl_case(x):
        return kl_divergence(x[0].unsqueeze(0), x[1].unsqueeze(0))

    def consistency_case(x):
        return F.mse_loss(x[0], x[1]) + F.mse_loss((1 / 60) * x[2], (1 / 60) * x[3])

    def steady_case(x):
        loss, _ = steady_state_loss(x[:2], x[2:4], x[4], dt=1 / 60)
        return loss

    def attn_cons_case(x):
        a_dot = x[: 2 * hw * hw].reshape(1, 2, hw, hw)
        speed = torch.sigmoid(x[2 * hw * hw:].reshape(1, hw, hw))
        return attention_consistency_loss(a_dot, speed)

    def coupling_case(x):
        parts = x.reshape(4, 1, 3, 2)
        return attention_coupling_loss(parts[0], parts[1], parts[2], parts[3])

    return [
        ("reconstruction_mse", recon_case, (2, 3, 6, 6)),
        ("kl_divergence", kl_case, (2, k)),
        ("latent_consistency", consistency_case, (4, k)),
        ("steady_state", steady_case, (5, k)),
        ("attention_consistency", attn_cons_case, (3 * hw * hw,)),
        ("attention_coupling", coupling_case, (4 * 3 * 2,)),
    ]
