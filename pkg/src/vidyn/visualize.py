"""PNG export: raw frames, attention maps, and the oscillator-network overlay
(markers for masses, lines for pairwise stiffness, arrows for actuation).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .dynamics import rollout
from .errors import ShapeError, UnsupportedVariantError
from .models import attention_com
from .variants import VariantModel


def frame_to_pil(frame, scale: int = 1) -> Image.Image:
    """(3, h, w) float frame in [0, 1] (torch or numpy) to an RGB image."""
    if isinstance(frame, torch.Tensor):
        frame = frame.detach().cpu().numpy()
    arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError(f"expected (c, h, w) frame, got {arr.shape}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    img = Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB")
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    return img


def save_frame_png(frame, path, scale: int = 1) -> Path:
    path = Path(path)
    frame_to_pil(frame, scale=scale).save(path)
    return path


def export_attention(model: VariantModel, frame, out_dir, prefix: str = "attention") -> list[Path]:
    """One grayscale PNG per attention map; the background map goes last.

    Filenames are `{prefix}_00.png` .. for latent maps and
    `{prefix}_background.png` for the background channel.
    """
    if not model.uses_attention:
        raise UnsupportedVariantError(
            f"variant {model.name!r} has no attention maps to export"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(frame, np.ndarray):
        frame = torch.from_numpy(frame)
    model.eval()
    with torch.no_grad():
        z = model.encoder.mean(frame.unsqueeze(0).float())
        maps = model.decoder.attention_maps(z).maps[0]
    paths = []
    n_latent = maps.shape[0] - 1
    for j in range(maps.shape[0]):
        name = f"{prefix}_background.png" if j == n_latent else f"{prefix}_{j:02d}.png"
        arr = np.clip(np.rint(maps[j].numpy() * 255.0), 0, 255).astype(np.uint8)
        path = out_dir / name
        Image.fromarray(arr, mode="L").save(path)
        paths.append(path)
    return paths


@dataclass
class OverlaySpec:
    """Display geometry for one oscillator-network overlay, in pixel units."""

    positions: np.ndarray  # (n, 2) marker centers
    radii: np.ndarray      # (n,) marker radii, proportional to oscillator mass
    links: list[tuple[int, int, float]]  # (l, m, line width) above the threshold
    arrows: np.ndarray     # (n, 2) actuation force displacement per oscillator
    colors: list[tuple[int, int, int]]


def _oscillator_palette(n: int) -> list[tuple[int, int, int]]:
    # blue shades, light to dark, one per oscillator index
    return [
        (70 + int(120 * i / max(1, n - 1)), 120, 255 - int(100 * i / max(1, n - 1)))
        for i in range(n)
    ]


def overlay_spec(
    model: VariantModel,
    z: torch.Tensor,
    u: torch.Tensor,
    scale: int = 8,
    coupling_threshold: float = 0.2,
    max_marker: float = 1.5,
    arrow_gain: float = 3.0,
) -> OverlaySpec:
    """Overlay geometry for one latent state of a paired-oscillator model.

    Marker positions are the squared-attention centers of mass, spread 1.5x
    about their mean for legibility. Only stiffness couplings whose 2x2
    off-diagonal block norm exceeds `coupling_threshold` times the largest
    block norm are kept.
    """
    if not (model.uses_attention and model.two_d):
        raise UnsupportedVariantError(
            f"overlay needs the paired-oscillator attention variant, not {model.name!r}"
        )
    size = model.decoder.image_size * scale
    with torch.no_grad():
        maps = model.decoder.attention_maps(z.unsqueeze(0)).latent_maps[0]
        com = attention_com(maps).numpy()  # (n, 2) in [-1, 1]
        mass = model.dynamics.mass().numpy()[::2]  # one value per tied pair
        stiff = model.dynamics.stiffness().numpy()
        force = model.dynamics.input_net(u.unsqueeze(0))[0].numpy()

    spread = com.mean(axis=0, keepdims=True) + 1.5 * (com - com.mean(axis=0, keepdims=True))
    positions = (spread + 1.0) / 2.0 * (size - 1)

    radii = scale * (0.6 + max_marker * mass / mass.max())

    n = com.shape[0]
    links: list[tuple[int, int, float]] = []
    norms = np.zeros((n, n))
    for l in range(n):
        for m in range(l + 1, n):
            block = stiff[2 * l:2 * l + 2, 2 * m:2 * m + 2]
            norms[l, m] = np.linalg.norm(block)
    peak = norms.max()
    if peak > 0:
        for l in range(n):
            for m in range(l + 1, n):
                if norms[l, m] > coupling_threshold * peak:
                    links.append((l, m, max(1.0, scale / 2.0 * norms[l, m] / peak)))

    pairs = force.reshape(n, 2)
    fmax = np.abs(pairs).max()
    arrows = np.zeros_like(pairs)
    if fmax > 0:
        arrows = pairs / fmax * arrow_gain * scale
    arrows[:, 1] *= 1.0  # grid y grows downward, same as image rows
    return OverlaySpec(
        positions=positions,
        radii=radii,
        links=links,
        arrows=arrows,
        colors=_oscillator_palette(n),
    )


def draw_overlay(img: Image.Image, spec: OverlaySpec) -> Image.Image:
    draw = ImageDraw.Draw(img)
    for l, m, width in spec.links:
        draw.line(
            [tuple(spec.positions[l]), tuple(spec.positions[m])],
            fill=(230, 230, 230),
            width=int(round(width)),
        )
    for i, (pos, r) in enumerate(zip(spec.positions, spec.radii)):
        box = [pos[0] - r, pos[1] - r, pos[0] + r, pos[1] + r]
        draw.ellipse(box, fill=spec.colors[i], outline=(255, 255, 255))
    for pos, vec in zip(spec.positions, spec.arrows):
        if np.hypot(*vec) < 1.0:
            continue
        tip = pos + vec
        draw.line([tuple(pos), tuple(tip)], fill=(255, 80, 80), width=2)
        # simple arrowhead: two short strokes rotated off the shaft
        back = -vec / max(np.hypot(*vec), 1e-9) * 4.0
        for angle in (0.5, -0.5):
            c, s = np.cos(angle), np.sin(angle)
            wing = np.array([back[0] * c - back[1] * s, back[0] * s + back[1] * c])
            draw.line([tuple(tip), tuple(tip + wing)], fill=(255, 80, 80), width=2)
    return img


def render_overlay(
    model: VariantModel,
    window: torch.Tensor,
    u_seq: torch.Tensor,
    out_path,
    future_steps: int = 20,
    scale: int = 8,
    coupling_threshold: float = 0.2,
) -> Path:
    """Current frame and a rolled-out future reconstruction, side by side,
    each with its oscillator overlay.

    `window` holds frames (i-1, i, i+1) for the central-difference velocity;
    `u_seq` the inputs from step i onward (at least `future_steps` of them,
    at least one). With future_steps=0 the right panel is the current
    reconstruction.
    """
    if not (model.uses_attention and model.two_d):
        raise UnsupportedVariantError(
            f"overlay needs the paired-oscillator attention variant, not {model.name!r}"
        )
    if window.shape[0] != 3:
        raise ShapeError(f"window must hold 3 consecutive frames, got {window.shape[0]}")
    if future_steps > 0 and u_seq.shape[0] < future_steps:
        raise ShapeError(f"need {future_steps} inputs, got {u_seq.shape[0]}")
    model.eval()
    o_prev, o, o_next = window.float().unbind(0)
    o_dot = (o_next - o_prev) / (2.0 * model.dt)
    z, zdot = torch.func.jvp(
        lambda t: model.encoder.mean(t), (o.unsqueeze(0),), (o_dot.unsqueeze(0),)
    )
    z, zdot = z.detach(), zdot.detach()

    with torch.no_grad():
        if future_steps > 0:
            result = rollout(model.dynamics, z, zdot, u_seq[:future_steps].unsqueeze(0))
            z_future = result.z[:, -1]
            u_future = u_seq[future_steps - 1]
        else:
            z_future = z
            u_future = u_seq[0]
        future_frame = model.decode(z_future)[0]

    left = frame_to_pil(o, scale=scale)
    draw_overlay(left, overlay_spec(model, z[0], u_seq[0], scale, coupling_threshold))
    right = frame_to_pil(future_frame, scale=scale)
    draw_overlay(right, overlay_spec(model, z_future[0], u_future, scale, coupling_threshold))

    gap = scale
    canvas = Image.new(
        "RGB", (left.width + right.width + gap, left.height), (30, 30, 30)
    )
    canvas.paste(left, (0, 0))
    canvas.paste(right, (left.width + gap, 0))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)
    return out_path
