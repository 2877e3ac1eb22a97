"""Evaluation protocols: autoregressive multi-step prediction error and
latent-space extrapolation between two encoded frames.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import EpisodeDataset, chronological_split
from .dynamics import rollout
from .errors import BoundaryFrameError, DivergedError
from .models import attention_com
from .variants import VariantModel


@dataclass
class PredictionReport:
    """Per-step MSE curve plus its summary statistics.

    single_step is the first entry of the curve; multi_step_mean averages the
    whole curve; stderr is the standard error of per-trajectory mean MSE.
    """

    per_step: np.ndarray
    per_step_stderr: np.ndarray
    single_step: float
    multi_step_mean: float
    stderr: float
    n_trajectories: int
    n_diverged: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "mse_mean", "mse_stderr"])
            for step, (mean, err) in enumerate(zip(self.per_step, self.per_step_stderr), 1):
                writer.writerow([step, f"{mean:.10g}", f"{err:.10g}"])


def infer_val_range(dataset: EpisodeDataset, n_chunks: int | None = None,
                    fraction: float = 0.8) -> tuple[int, int]:
    """Validation range of the chronological split, inferring the chunk count
    from the episode length when it is not given."""
    if n_chunks is None:
        n_chunks = max(1, int(round((dataset.n_frames / 60.0 + 2.0) / 12.0)))
    _, val_range = chronological_split(dataset.n_frames, n_chunks, fraction)
    return val_range


def evaluate_multistep(
    model: VariantModel,
    dataset: EpisodeDataset,
    horizon: int = 30,
    n_traj: int = 50,
    seed: int = 0,
    val_range: tuple[int, int] | None = None,
    decode_batch: int = 256,
) -> PredictionReport:
    """Roll the learned dynamics `horizon` steps from sampled validation starts.

    Each trajectory is initialized from a central-difference observation
    window, advanced with the recorded inputs, decoded, and scored against
    ground-truth frames with pixel MSE in [0, 1]. Diverged rollouts are
    excluded from the statistics and counted.
    """
    model.eval()
    if val_range is None:
        val_range = infer_val_range(dataset)
    lo, hi = val_range
    starts_lo, starts_hi = lo + 1, hi - 1 - horizon
    if starts_hi < starts_lo:
        raise BoundaryFrameError(
            f"validation range [{lo}, {hi}) too short for horizon {horizon}"
        )
    candidates = np.arange(starts_lo, starts_hi + 1)
    rng = np.random.default_rng(seed)
    n = min(n_traj, len(candidates))
    starts = np.sort(rng.choice(candidates, size=n, replace=False))

    dt = model.dt
    with torch.no_grad():
        o_prev = torch.from_numpy(dataset.frames_float(starts - 1))
        o = torch.from_numpy(dataset.frames_float(starts))
        o_next = torch.from_numpy(dataset.frames_float(starts + 1))
    o_dot = (o_next - o_prev) / (2.0 * dt)
    z, zdot = torch.func.jvp(lambda t: model.encoder.mean(t), (o,), (o_dot,))
    z, zdot = z.detach(), zdot.detach()

    u_idx = starts[:, None] + np.arange(horizon)[None, :]
    u_seq = torch.from_numpy(dataset.inputs[u_idx.reshape(-1)]).reshape(n, horizon, -1)

    with torch.no_grad():
        result = rollout(model.dynamics, z, zdot, u_seq)
        flat = result.z.reshape(n * horizon, -1)
        decoded = []
        for i in range(0, len(flat), decode_batch):
            decoded.append(model.decode(flat[i:i + decode_batch]))
        pred = torch.cat(decoded).reshape(n, horizon, *dataset.frames.shape[1:])

    gt_idx = starts[:, None] + 1 + np.arange(horizon)[None, :]
    truth = torch.from_numpy(dataset.frames_float(gt_idx.reshape(-1))).reshape_as(pred)
    mse = (pred - truth).pow(2).mean(dim=(2, 3, 4)).double().numpy()

    keep = ~result.diverged.numpy()
    n_diverged = int((~keep).sum())
    if not keep.any():
        raise DivergedError("every evaluation rollout diverged")
    included = mse[keep]
    per_step = included.mean(axis=0)
    if included.shape[0] > 1:
        per_step_stderr = included.std(axis=0, ddof=1) / math.sqrt(included.shape[0])
        traj_means = included.mean(axis=1)
        stderr = float(traj_means.std(ddof=1) / math.sqrt(included.shape[0]))
    else:
        per_step_stderr = np.zeros_like(per_step)
        stderr = 0.0
    return PredictionReport(
        per_step=per_step,
        per_step_stderr=per_step_stderr,
        single_step=float(per_step[0]),
        multi_step_mean=float(per_step.mean()),
        stderr=stderr,
        n_trajectories=int(included.shape[0]),
        n_diverged=n_diverged,
    )


@dataclass
class ExtrapolationResult:
    alphas: tuple[float, ...]
    latents: torch.Tensor  # (A, k)
    images: torch.Tensor   # (A, c, h, w)
    com: torch.Tensor | None = None  # (A, n_maps, 2) in normalized coordinates


def extrapolate(
    model: VariantModel,
    dataset: EpisodeDataset,
    index: int,
    gap: int = 10,
    alphas: tuple[float, ...] = (1.2, 1.5, 2.0, 3.0),
) -> ExtrapolationResult:
    """Decode z_i + alpha * (z_{i+gap} - z_i) for each extrapolation factor.

    alpha=0 and alpha=1 reproduce the reconstructions of the two endpoint
    frames. For attention variants the per-map centers of mass are returned
    alongside the images.
    """
    if index < 0 or index + gap >= dataset.n_frames:
        raise BoundaryFrameError(
            f"frames {index} and {index + gap} must both exist (N={dataset.n_frames})"
        )
    model.eval()
    with torch.no_grad():
        pair = torch.from_numpy(dataset.frames_float(np.array([index, index + gap])))
        z_pair = model.encoder.mean(pair)
        z_i, z_j = z_pair[0], z_pair[1]
        alpha_t = torch.tensor(alphas, dtype=z_i.dtype)
        latents = z_i.unsqueeze(0) + alpha_t.unsqueeze(1) * (z_j - z_i).unsqueeze(0)
        images = model.decode(latents)
        com = None
        if model.uses_attention:
            maps = model.decoder.attention_maps(latents).latent_maps
            com = attention_com(maps)
    return ExtrapolationResult(alphas=tuple(alphas), latents=latents, images=images, com=com)
