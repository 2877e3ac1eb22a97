"""Training harness: config file round-trip, a dict-based AdamW, the warmup
and Gumbel schedules, the epoch loop with CSV logging, and versioned binary
checkpoints that support bit-exact resume (single thread, float32).
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import EpisodeDataset, chronological_split, window_centers
from .dynamics import group_oscillators
from .errors import DatasetFormatError, DivergedError
from .losses import (
    LossBreakdown,
    LossWeights,
    attention_consistency_loss,
    attention_coupling_loss,
    basic_loss,
    normalized_observation_speed,
    steady_state_loss,
)
from .models import attention_com, attention_com_velocity
from .variants import VARIANTS, VariantModel, build_variant

CKPT_MAGIC = b"VCKP"
CKPT_VERSION = 1


@dataclass
class TrainingConfig:
    variant: str = "koopman-abcd"
    latent_dim: int = 0  # 0 picks the variant default
    epochs: int = 300
    batch_size: int = 32
    dt: float = 1.0 / 60.0
    lr_encoder: float = 5e-4
    lr_dynamics: float = 5e-4
    lr_decoder: float = 1e-3
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    warmup_scale: float = 0.1
    early_stop: int = 0  # 0 disables; otherwise stop after this many epochs
    grad_clip: float = 10.0
    seed: int = 0
    gumbel_start: float = 0.5
    gumbel_epochs: int = 0  # 0 means anneal over the first half of the run
    background_logit: float = 0.0
    equilibrium_tol: float = 0.02
    train_fraction: float = 0.8
    threads: int = 1  # 0 leaves the torch thread pool untouched
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("lr_encoder", "lr_dynamics", "lr_decoder"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.early_stop < 0 or self.early_stop > self.epochs:
            raise ValueError(f"early_stop must lie in [0, epochs], got {self.early_stop}")


def config_to_ini(config: TrainingConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser["training"] = {
        f.name: repr(getattr(config, f.name)) for f in fields(config) if f.name != "weights"
    }
    parser["loss_weights"] = {k: repr(v) for k, v in vars(config.weights).items()}
    with open(path, "w") as fh:
        parser.write(fh)


def config_from_ini(path) -> TrainingConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise DatasetFormatError(f"could not read config file {path}")
    kwargs = {}
    section = parser["training"]
    for f in fields(TrainingConfig):
        if f.name == "weights" or f.name not in section:
            continue
        raw = section[f.name]
        if f.type == "str":
            kwargs[f.name] = raw.strip("'\"")
        elif f.type == "int":
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = float(raw)
    weights = LossWeights()
    if parser.has_section("loss_weights"):
        wkw = {k: float(v) for k, v in parser["loss_weights"].items()}
        weights = LossWeights(**wkw)
    return TrainingConfig(weights=weights, **kwargs)


def effective_lrs(config: TrainingConfig, epoch: int) -> dict[str, float]:
    """Per-group learning rates; warmup scales encoder and dynamics only."""
    scale = config.warmup_scale if epoch < config.warmup_epochs else 1.0
    return {
        "encoder": config.lr_encoder * scale,
        "dynamics": config.lr_dynamics * scale,
        "decoder": config.lr_decoder,
    }


def gumbel_strength(config: TrainingConfig, epoch: int) -> float:
    """Linear anneal of the attention noise scale, reaching 0 mid-run."""
    span = config.gumbel_epochs if config.gumbel_epochs > 0 else max(1, config.epochs // 2)
    return config.gumbel_start * max(0.0, 1.0 - epoch / span)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr,
    weight_decay: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """One decoupled-weight-decay Adam step, in place on `params`.

    `lr` is a float or a per-parameter-name dict. If any gradient is
    non-finite the whole step is skipped and False is returned; moments and
    the step counter are left untouched so a skipped step is a true no-op.
    """
    for g in grads.values():
        if not torch.isfinite(g).all():
            return False
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            lr_p = lr[name] if isinstance(lr, dict) else lr
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.mul_(1.0 - lr_p * weight_decay)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m / bc1, denom, value=-lr_p)
    return True


def clip_gradients(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = torch.sqrt(sum(g.pow(2).sum() for g in grads.values()))
    norm = float(total)
    if math.isfinite(norm) and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g.mul_(factor)
    return norm


def load_windows(dataset: EpisodeDataset, centers: np.ndarray):
    """Frames (B, 4, c, h, w) in [0,1] around each center i and the inputs u_i."""
    idx = np.stack([centers - 1, centers, centers + 1, centers + 2], axis=1)
    flat = dataset.frames_float(idx.reshape(-1))
    frames = torch.from_numpy(flat).reshape(len(centers), 4, *dataset.frames.shape[1:])
    u = torch.from_numpy(dataset.inputs[centers])
    return frames, u


def compute_losses(
    model: VariantModel,
    frames: torch.Tensor,
    u: torch.Tensor,
    config: TrainingConfig,
    gumbel: float = 0.0,
) -> LossBreakdown:
    """Full training objective for one batch of (i-1, i, i+1, i+2) windows."""
    w = config.weights
    dt = model.dt
    b = frames.shape[0]
    o_prev, o, o_next, o_next2 = frames.unbind(1)
    o_dot = (o_next - o_prev) / (2.0 * dt)
    o_dot_next = (o_next2 - o) / (2.0 * dt)

    # One fused JVP for both frames and (when present) the attention maps:
    # backprop through a forward-mode graph is expensive, so call it once.
    need_att = model.uses_attention and (
        w.attention_consistency > 0.0 or (model.two_d and w.attention_coupling > 0.0)
    )

    def encode_all(t):
        mu_both, logvar_both = model.encoder(t)
        if need_att:
            maps = model.decoder.attention_maps(mu_both[:b]).maps
        else:
            maps = mu_both.new_zeros(())
        return mu_both, logvar_both, maps

    stacked = torch.cat([o, o_next])
    stacked_dot = torch.cat([o_dot, o_dot_next])
    (mu_both, logvar_both, a), (zdot_both, _, a_dot) = torch.func.jvp(
        encode_all, (stacked,), (stacked_dot,)
    )
    mu, mu_next = mu_both[:b], mu_both[b:]
    zdot, zdot_next = zdot_both[:b], zdot_both[b:]
    logvar = logvar_both[:b]
    eps = torch.randn_like(mu)
    z_sample = mu + (0.5 * logvar).exp() * eps

    z_pred, zdot_pred = model.dynamics.step(mu, zdot, u)

    both_z = torch.cat([z_sample, z_pred])
    if model.uses_attention:
        recon_both = model.decoder(both_z, gumbel_strength=gumbel).recon
    else:
        recon_both = model.decoder(both_z)
    recon_static, recon_dynamic = recon_both[:b], recon_both[b:]

    out = basic_loss(
        recon_static, o, recon_dynamic, o_next,
        mu, logvar, z_pred, mu_next, zdot_pred, zdot_next,
        dt, w,
    )

    if model.is_oscillator and w.steady_state > 0.0:
        at_rest = u.abs().amax(dim=1) <= config.equilibrium_tol
        static = o_dot.abs().amax(dim=(1, 2, 3)) < 0.01
        mask = at_rest & static
        value, n_sel = steady_state_loss(mu, zdot, model.dynamics.rest, dt, mask)
        if n_sel > 0:
            out.add("steady_state", value, w.steady_state)

    if need_att:
        if w.attention_consistency > 0.0:
            speed = normalized_observation_speed(o_dot)
            out.add(
                "attention_consistency",
                attention_consistency_loss(a_dot[:, :-1], speed),
                w.attention_consistency,
            )
        if model.two_d and w.attention_coupling > 0.0:
            maps = a[:, :-1]
            p = attention_com(maps)
            p_dot = attention_com_velocity(maps, a_dot[:, :-1])
            q = group_oscillators(mu)
            q_dot = group_oscillators(zdot)
            out.add(
                "attention_coupling",
                attention_coupling_loss(q, q_dot, p, p_dot),
                w.attention_coupling,
            )
    return out


def validation_loss(
    model: VariantModel,
    dataset: EpisodeDataset,
    val_range: tuple[int, int],
    config: TrainingConfig,
    max_windows: int = 512,
) -> float:
    """Static + one-step reconstruction MSE on a deterministic validation subset."""
    centers = window_centers(*val_range)
    if len(centers) == 0:
        return math.nan
    if len(centers) > max_windows:
        sel = np.linspace(0, len(centers) - 1, max_windows).astype(int)
        centers = centers[sel]
    total = 0.0
    count = 0
    with torch.no_grad():
        for lo in range(0, len(centers), 256):
            frames, u = load_windows(dataset, centers[lo:lo + 256])
            _, o, o_next, _ = frames.unbind(1)
            mu = model.encoder.mean(o)
            zero = torch.zeros_like(mu)
            z_pred, _ = model.dynamics.step(mu, zero, u)
            recon = model.decode(mu)
            recon_next = model.decode(z_pred)
            batch = (recon - o).pow(2).mean() + (recon_next - o_next).pow(2).mean()
            total += float(batch) * len(frames)
            count += len(frames)
    return total / count


def _rng_payload(np_rng: np.random.Generator) -> dict:
    return {"torch": torch.get_rng_state(), "numpy": np_rng.bit_generator.state}


def save_checkpoint(
    path,
    model: VariantModel,
    config: TrainingConfig,
    n_inputs: int,
    state: AdamState,
    epoch: int,
    rng: dict | None = None,
    best_val: float = math.inf,
) -> None:
    cfg = {f.name: getattr(config, f.name) for f in fields(config) if f.name != "weights"}
    payload = {
        "config": cfg,
        "loss_weights": dict(vars(config.weights)),
        "n_inputs": n_inputs,
        "epoch": epoch,
        "params": {k: v.detach().clone() for k, v in model.named_parameters()},
        "adam_step": state.step,
        "adam_m": {k: v.clone() for k, v in state.m.items()},
        "adam_v": {k: v.clone() for k, v in state.v.items()},
        "rng": rng,
        "best_val": best_val,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(buf.getvalue())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(6)
        if len(head) < 6 or head[:4] != CKPT_MAGIC:
            raise DatasetFormatError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<H", head[4:6])
        if version != CKPT_VERSION:
            raise DatasetFormatError(f"unsupported checkpoint version {version}")
        payload = torch.load(io.BytesIO(fh.read()), weights_only=True)
    return payload


def restore_model(payload: dict) -> tuple[VariantModel, TrainingConfig]:
    """Rebuild the variant described by a checkpoint and load its parameters."""
    config = TrainingConfig(weights=LossWeights(**payload["loss_weights"]), **payload["config"])
    model = build_variant(
        config.variant,
        n_inputs=payload["n_inputs"],
        latent_dim=config.latent_dim or None,
        dt=config.dt,
        background_logit=config.background_logit,
    )
    params = model.parameter_dict()
    saved = payload["params"]
    missing = set(params) ^ set(saved)
    if missing:
        raise DatasetFormatError(f"checkpoint parameter names do not match model: {sorted(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            if p.shape != saved[name].shape:
                raise DatasetFormatError(f"shape mismatch for {name}")
            p.copy_(saved[name])
    return model, config


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path
    log: Path
    history: list[dict]
    aborted: bool = False
    epochs_run: int = 0


def train(
    config: TrainingConfig,
    dataset: EpisodeDataset,
    out_dir,
    n_chunks: int | None = None,
    resume: str | None = None,
) -> TrainResult:
    """Run the full training loop and leave last/best checkpoints plus a CSV log.

    `n_chunks` locates the chunk boundaries for the chronological split; when
    omitted it is inferred from the episode length. A NaN/Inf total loss
    aborts the run, keeping the last epoch-end checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.threads > 0:
        torch.set_num_threads(config.threads)
    if n_chunks is None:
        n_chunks = max(1, int(round((dataset.n_frames / 60.0 + 2.0) / 12.0)))
    train_range, val_range = chronological_split(
        dataset.n_frames, n_chunks, config.train_fraction
    )
    centers_all = window_centers(*train_range)
    if len(centers_all) < config.batch_size:
        raise DatasetFormatError("training split too short for one batch of windows")

    torch.manual_seed(config.seed)
    np_rng = np.random.default_rng(config.seed)
    model = build_variant(
        config.variant,
        n_inputs=dataset.n_inputs,
        latent_dim=config.latent_dim or None,
        dt=config.dt,
        background_logit=config.background_logit,
    )
    state = AdamState()
    start_epoch = 0
    best_val = math.inf
    if resume is not None:
        # architecture comes from the checkpoint; schedules follow the passed config
        payload = load_checkpoint(resume)
        model, _ = restore_model(payload)
        state = AdamState(
            step=payload["adam_step"],
            m=dict(payload["adam_m"]),
            v=dict(payload["adam_v"]),
        )
        start_epoch = payload["epoch"] + 1
        best_val = payload.get("best_val", math.inf)
        if payload.get("rng") is not None:
            torch.set_rng_state(payload["rng"]["torch"])
            np_rng.bit_generator.state = payload["rng"]["numpy"]

    params = model.parameter_dict()
    last_path = out_dir / "checkpoint_last.bin"
    best_path = out_dir / "checkpoint_best.bin"
    log_path = out_dir / "train_log.csv"
    history: list[dict] = []
    aborted = False

    stop_epoch = config.early_stop if config.early_stop > 0 else config.epochs
    log_mode = "a" if resume is not None and log_path.exists() else "w"
    log_fh = open(log_path, log_mode, newline="")
    writer = csv.writer(log_fh)
    if log_mode == "w":
        writer.writerow(["epoch", "term", "value"])

    model.train()
    epoch = start_epoch
    try:
        for epoch in range(start_epoch, stop_epoch):
            lrs = effective_lrs(config, epoch)
            lr_map = {n: lrs[model.group_of(n)] for n in params}
            gumbel = gumbel_strength(config, epoch)
            perm = np_rng.permutation(centers_all)
            sums: dict[str, float] = {}
            n_steps = 0
            skipped = 0
            for lo in range(0, len(perm) - config.batch_size + 1, config.batch_size):
                batch = perm[lo:lo + config.batch_size]
                frames, u = load_windows(dataset, batch)
                breakdown = compute_losses(model, frames, u, config, gumbel)
                total = breakdown.total
                if not torch.isfinite(total):
                    raise DivergedError(f"non-finite loss at epoch {epoch}")
                for p in params.values():
                    if p.grad is not None:
                        p.grad = None
                total.backward()
                grads = {
                    n: (p.grad if p.grad is not None else torch.zeros_like(p))
                    for n, p in params.items()
                }
                clip_gradients(grads, config.grad_clip)
                if not adamw_step(params, grads, state, lr_map, config.weight_decay):
                    skipped += 1
                for name, value in breakdown.detached().items():
                    sums[name] = sums.get(name, 0.0) + value
                n_steps += 1

            model.eval()
            val = validation_loss(model, dataset, val_range, config)
            model.train()
            record = {name: s / max(1, n_steps) for name, s in sums.items()}
            record["val_loss"] = val
            record["skipped_steps"] = float(skipped)
            history.append({"epoch": epoch, **record})
            for name, value in record.items():
                writer.writerow([epoch, name, f"{value:.10g}"])
            log_fh.flush()

            rng = _rng_payload(np_rng)
            # update best first so checkpoint_last carries the tracking state a
            # resumed run needs to keep checkpoint_best monotone
            improved = math.isfinite(val) and val < best_val
            if improved:
                best_val = val
            save_checkpoint(
                last_path, model, config, dataset.n_inputs, state, epoch, rng, best_val
            )
            if improved:
                save_checkpoint(
                    best_path, model, config, dataset.n_inputs, state, epoch, rng, best_val
                )
    except DivergedError:
        aborted = True
    finally:
        log_fh.close()

    if not best_path.exists() and last_path.exists():
        best_path.write_bytes(last_path.read_bytes())
    return TrainResult(
        checkpoint=last_path,
        best_checkpoint=best_path,
        log=log_path,
        history=history,
        aborted=aborted,
        epochs_run=len(history),
    )
