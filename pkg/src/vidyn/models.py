"""Vision models: variational conv encoder, transposed-conv decoder baseline,
and the attention broadcast decoder.

All modules are batch-first. Frames are float tensors in [0, 1] with shape
(B, c, h, w); latents are (B, k). Frame-difference velocities carry units of
intensity per second.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateMapError, NonFiniteError, ShapeError


def coordinate_grid(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Normalized pixel coordinates, shape (2, h, w), channels (x, y).

    Endpoint-inclusive: column 0 is x=-1, column w-1 is x=+1. Built from
    integer arithmetic so the grid is exactly antisymmetric about the center.
    """
    ix = torch.arange(w, dtype=dtype, device=device)
    iy = torch.arange(h, dtype=dtype, device=device)
    x = (2.0 * ix - (w - 1)) / (w - 1) if w > 1 else torch.zeros(1, dtype=dtype, device=device)
    y = (2.0 * iy - (h - 1)) / (h - 1) if h > 1 else torch.zeros(1, dtype=dtype, device=device)
    gx = x.view(1, w).expand(h, w)
    gy = y.view(h, 1).expand(h, w)
    return torch.stack([gx, gy], dim=0)


@dataclass
class VAEOutput:
    """Posterior statistics and the latent actually fed downstream."""

    mean: torch.Tensor
    logvar: torch.Tensor
    sample: torch.Tensor
    velocity: torch.Tensor | None = None


@dataclass
class AttentionOutput:
    """Attention logits and maps; features/recon are filled by a full decode.

    `maps` has the background map in the last channel, so its channel count is
    one more than `logits`. Per pixel the maps sum to 1.
    """

    logits: torch.Tensor
    maps: torch.Tensor
    features: torch.Tensor | None = None
    recon: torch.Tensor | None = None

    @property
    def background(self) -> torch.Tensor:
        return self.maps[:, -1]

    @property
    def latent_maps(self) -> torch.Tensor:
        return self.maps[:, :-1]


def _check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


class ConvEncoder(nn.Module):
    """Three stride-2 conv blocks plus two linear layers onto (mu, logvar).

    Smooth activations throughout: the encoder's Jacobian is part of the model
    output (latent velocities), so kinked activations would make it noisy.
    """

    def __init__(self, latent_dim: int, in_channels: int = 3, image_size: int = 32,
                 hidden: int = 128):
        super().__init__()
        if image_size % 8 != 0:
            raise ShapeError(f"image_size must be divisible by 8, got {image_size}")
        self.latent_dim = latent_dim
        self.image_size = image_size
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.GELU(),
        )
        feat = 64 * (image_size // 8) ** 2
        self.fc = nn.Sequential(nn.Linear(feat, hidden), nn.GELU())
        self.head = nn.Linear(hidden, 2 * latent_dim)

    def forward(self, o: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.conv(o)
        h = self.fc(h.flatten(1))
        stats = self.head(h)
        mu, logvar = stats.chunk(2, dim=-1)
        return mu, logvar

    def mean(self, o: torch.Tensor) -> torch.Tensor:
        return self.forward(o)[0]

    def encode(self, o: torch.Tensor, sample: bool = False,
               generator: torch.Generator | None = None) -> VAEOutput:
        """Posterior stats plus the working latent: mu, or mu + sigma*eps when sampling."""
        mu, logvar = self.forward(o)
        _check_finite(mu, "encoder mean")
        _check_finite(logvar, "encoder log-variance")
        if sample:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            z = mu + torch.exp(0.5 * logvar) * eps
        else:
            z = mu
        return VAEOutput(mean=mu, logvar=logvar, sample=z)


def latent_velocity(encoder: ConvEncoder, o: torch.Tensor, o_dot: torch.Tensor) -> torch.Tensor:
    """Map an observation velocity to latent space through the encoder mean's Jacobian."""
    if o_dot.shape != o.shape:
        raise ShapeError(
            f"velocity shape {tuple(o_dot.shape)} does not match frame shape {tuple(o.shape)}"
        )
    _, zdot = torch.func.jvp(lambda t: encoder.mean(t), (o,), (o_dot,))
    return zdot


class StandardDecoder(nn.Module):
    """Transposed-convolution decoder baseline; final sigmoid keeps pixels in [0, 1]."""

    def __init__(self, latent_dim: int, out_channels: int = 3, image_size: int = 32,
                 hidden: int = 128):
        super().__init__()
        self.latent_dim = latent_dim
        self.image_size = image_size
        base = image_size // 8
        self.fc = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.GELU(),
            nn.Linear(hidden, 64 * base * base), nn.GELU(),
        )
        self.base = base
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(64, 64, 4, stride=2, padding=1), nn.GELU(),
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.GELU(),
            nn.ConvTranspose2d(32, out_channels, 4, stride=2, padding=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.fc(z).view(z.shape[0], 64, self.base, self.base)
        return torch.sigmoid(self.deconv(h))


class AttentionBroadcastDecoder(nn.Module):
    """Decoder where per-latent attention maps compete for every output pixel.

    A feed-forward net scores each latent group at every normalized pixel
    coordinate; a constant background logit joins the per-pixel softmax, so
    latent maps and a learnable background feature plane split each pixel's
    reconstruction. A stack of four 1x1 convolutions turns the attended
    feature plane into the image, so all spatial structure comes from the
    attention itself.

    With `group_size=2`, consecutive latent pairs share one map each (the 2D
    oscillator grouping); with `group_size=1` every latent gets its own map.
    """

    def __init__(
        self,
        latent_dim: int,
        out_channels: int = 3,
        image_size: int = 32,
        group_size: int = 1,
        n_features: int = 8,
        att_hidden: int = 64,
        background_logit: float = 0.0,
        gumbel_on_background: bool = True,
    ):
        super().__init__()
        if latent_dim % group_size != 0:
            raise ShapeError(f"latent_dim {latent_dim} not divisible by group_size {group_size}")
        self.latent_dim = latent_dim
        self.image_size = image_size
        self.group_size = group_size
        self.n_maps = latent_dim // group_size
        self.n_features = n_features
        self.background_logit = float(background_logit)
        self.gumbel_on_background = gumbel_on_background

        self.att_net = nn.Sequential(
            nn.Linear(latent_dim + 2, att_hidden), nn.Tanh(),
            nn.Linear(att_hidden, att_hidden), nn.Tanh(),
            nn.Linear(att_hidden, self.n_maps),
        )
        # Per-group affine expansion of the latent scalars into feature space.
        self.expand_weight = nn.Parameter(
            torch.randn(self.n_maps, n_features, group_size) * 0.5
        )
        self.expand_bias = nn.Parameter(torch.zeros(self.n_maps, n_features))
        self.background_features = nn.Parameter(
            torch.zeros(n_features, image_size, image_size)
        )
        self.head = nn.Sequential(
            nn.Conv2d(n_features + 2, 32, 1), nn.GELU(),
            nn.Conv2d(32, 32, 1), nn.GELU(),
            nn.Conv2d(32, 32, 1), nn.GELU(),
            nn.Conv2d(32, out_channels, 1),
        )
        grid = coordinate_grid(image_size, image_size)
        self.register_buffer("grid", grid, persistent=False)

    def attention_logits(self, z: torch.Tensor) -> torch.Tensor:
        """Score every latent group at every pixel coordinate: (B, n_maps, h, w)."""
        b = z.shape[0]
        hw = self.image_size * self.image_size
        coords = self.grid.to(z.dtype).reshape(2, hw).T            # (hw, 2)
        zin = z.unsqueeze(1).expand(b, hw, self.latent_dim)
        cin = coords.unsqueeze(0).expand(b, hw, 2)
        logits = self.att_net(torch.cat([zin, cin], dim=-1))       # (B, hw, n_maps)
        return logits.permute(0, 2, 1).reshape(b, self.n_maps, self.image_size, self.image_size)

    def attention_maps(
        self,
        z: torch.Tensor,
        gumbel_strength: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> AttentionOutput:
        """Per-pixel softmax over latent logits plus the constant background logit."""
        if gumbel_strength < 0:
            raise ValueError(f"gumbel_strength must be >= 0, got {gumbel_strength}")
        logits = self.attention_logits(z)
        b = z.shape[0]
        bg = torch.full(
            (b, 1, self.image_size, self.image_size), self.background_logit,
            dtype=logits.dtype, device=logits.device,
        )
        stacked = torch.cat([logits, bg], dim=1)
        if gumbel_strength > 0.0:
            u = torch.rand(stacked.shape, generator=generator,
                           dtype=stacked.dtype, device=stacked.device)
            noise = -torch.log(-torch.log(u.clamp(1e-20, 1.0 - 1e-7)))
            if not self.gumbel_on_background:
                noise[:, -1:] = 0.0
            stacked = stacked + gumbel_strength * noise
        maps = torch.softmax(stacked, dim=1)
        return AttentionOutput(logits=logits, maps=maps)

    def forward(
        self,
        z: torch.Tensor,
        gumbel_strength: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> AttentionOutput:
        out = self.attention_maps(z, gumbel_strength=gumbel_strength, generator=generator)
        b = z.shape[0]
        groups = z.view(b, self.n_maps, self.group_size)
        # (B, n_maps, n_f): affine expansion of each group, then broadcast over pixels.
        expanded = torch.einsum("mfg,bmg->bmf", self.expand_weight.to(z.dtype), groups)
        expanded = expanded + self.expand_bias.to(z.dtype)
        latent_part = torch.einsum("bmhw,bmf->bfhw", out.latent_maps, expanded)
        bg_part = out.background.unsqueeze(1) * self.background_features.to(z.dtype).unsqueeze(0)
        features = latent_part + bg_part
        coords = self.grid.to(z.dtype).unsqueeze(0).expand(b, 2, self.image_size, self.image_size)
        recon = torch.sigmoid(self.head(torch.cat([features, coords], dim=1)))
        out.features = features
        out.recon = recon
        return out


def attention_com(a: torch.Tensor) -> torch.Tensor:
    """Center of mass of the squared map in normalized coordinates.

    Accepts (..., h, w); returns (..., 2) with components (x, y). Squaring
    sharpens toward regions a map holds exclusively. Scale-invariant.
    """
    h, w = a.shape[-2], a.shape[-1]
    grid = coordinate_grid(h, w, dtype=a.dtype, device=a.device)
    weight = a * a
    total = weight.sum(dim=(-2, -1))
    if not bool((total > 0).all()):
        raise DegenerateMapError("attention map is identically zero")
    px = (weight * grid[0]).sum(dim=(-2, -1)) / total
    py = (weight * grid[1]).sum(dim=(-2, -1)) / total
    return torch.stack([px, py], dim=-1)


def attention_com_velocity(a: torch.Tensor, a_dot: torch.Tensor) -> torch.Tensor:
    """Time derivative of the squared-map center of mass, by the quotient rule.

    `a_dot` is the map's time derivative (e.g. from a JVP of the attention
    pipeline along the observation velocity).
    """
    if a_dot.shape != a.shape:
        raise ShapeError("map and map-velocity shapes differ")
    h, w = a.shape[-2], a.shape[-1]
    grid = coordinate_grid(h, w, dtype=a.dtype, device=a.device)
    weight = a * a
    weight_dot = 2.0 * a * a_dot
    total = weight.sum(dim=(-2, -1))
    if not bool((total > 0).all()):
        raise DegenerateMapError("attention map is identically zero")
    total_dot = weight_dot.sum(dim=(-2, -1))
    num_x = (weight * grid[0]).sum(dim=(-2, -1))
    num_y = (weight * grid[1]).sum(dim=(-2, -1))
    num_dot_x = (weight_dot * grid[0]).sum(dim=(-2, -1))
    num_dot_y = (weight_dot * grid[1]).sum(dim=(-2, -1))
    vx = (num_dot_x * total - num_x * total_dot) / (total * total)
    vy = (num_dot_y * total - num_y * total_dot) / (total * total)
    return torch.stack([vx, vy], dim=-1)
