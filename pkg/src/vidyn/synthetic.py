"""Synthetic planar continuum-arm rig: random actuation trajectories, a
piecewise-constant-curvature arm with second-order curvature dynamics, and a
32x32 rasterizer.

The rig is the ground-truth data source for all experiments, so everything
here is deterministic under a fixed seed. The renderer is built so that
negating all curvatures mirrors the foreground bit-exactly: pixel centers are
symmetric dyadics, and arc points are assembled from even/odd parts in |kappa|
so the sign flip never passes through a trig call.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SAMPLE_RATE = 60.0
CHUNK_SECONDS = 10.0
RAMP_SECONDS = 2.0


@dataclass
class InputTrajectory:
    """Per-channel superposition of two sines, chunked with linear crossfades."""

    samples: np.ndarray  # (N, n_u) float64 in [-1, 1]
    freqs: np.ndarray    # (n_chunks, n_u, 2) Hz
    phases: np.ndarray   # (n_chunks, n_u, 2) rad
    amps: np.ndarray     # (n_chunks, n_u, 2)
    rate: float = SAMPLE_RATE

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.n_samples / self.rate


def _chunk_signal(tau, freqs, phases, amps):
    """Evaluate one chunk's signal on its local clock tau: (T,) x (n_u, 2)."""
    arg = 2.0 * np.pi * freqs[None, :, :] * tau[:, None, None] + phases[None, :, :]
    return (amps[None, :, :] * np.sin(arg)).sum(axis=-1)


def generate_inputs(seed: int, n_chunks: int = 75, n_u: int = 2) -> InputTrajectory:
    """Random actuation episode: n_chunks 10 s chunks joined by 2 s linear ramps.

    Frequencies are drawn from [0.04, 2] Hz, phases from [0, 2pi); the two
    amplitudes per channel sum to at most 1 so the commanded input stays in
    the actuator range [-1, 1].
    """
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(0.04, 2.0, size=(n_chunks, n_u, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_chunks, n_u, 2))
    total = rng.uniform(0.4, 1.0, size=(n_chunks, n_u))
    split = rng.uniform(0.25, 0.75, size=(n_chunks, n_u))
    amps = np.stack([total * split, total * (1.0 - split)], axis=-1)

    duration = n_chunks * CHUNK_SECONDS + (n_chunks - 1) * RAMP_SECONDS
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    period = CHUNK_SECONDS + RAMP_SECONDS
    idx = np.minimum((t / period).astype(int), n_chunks - 1)
    tau = t - idx * period

    u = np.zeros((n, n_u))
    for i in range(n_chunks):
        sel = idx == i
        if not sel.any():
            continue
        tau_i = tau[sel]
        sig = _chunk_signal(tau_i, freqs[i], phases[i], amps[i])
        ramp = tau_i >= CHUNK_SECONDS
        if ramp.any() and i + 1 < n_chunks:
            # crossfade with the next chunk evaluated on its own (negative) clock
            w = ((tau_i[ramp] - CHUNK_SECONDS) / RAMP_SECONDS)[:, None]
            nxt = _chunk_signal(tau_i[ramp] - period, freqs[i + 1], phases[i + 1], amps[i + 1])
            sig[ramp] = (1.0 - w) * sig[ramp] + w * nxt
        u[sel] = sig
    return InputTrajectory(samples=u, freqs=freqs, phases=phases, amps=amps)


@dataclass
class ArmConfig:
    """Geometry and per-segment curvature dynamics constants.

    Each segment's curvature follows m*k'' = u*gain - d*k' - s*k, optionally
    with a nearest-neighbour spring `coupling` between segment curvatures,
    integrated by velocity-first (semi-implicit) Euler with `substeps`
    sub-intervals per frame.
    """

    n_segments: int = 2
    seg_length: float = 0.58
    base: tuple[float, float] = (0.0, -0.88)
    kappa_max: float = 2.0
    radius: float = 0.10
    mass: float = 1.0
    damping: float = 4.0
    stiffness: float = 40.0
    gain: float = 50.0
    coupling: float = 0.0
    substeps: int = 4

    def stiffness_matrix(self) -> np.ndarray:
        n = self.n_segments
        k = self.stiffness * np.eye(n)
        if self.coupling != 0.0 and n > 1:
            lap = 2.0 * np.eye(n)
            lap[0, 0] = lap[-1, -1] = 1.0
            lap -= np.eye(n, k=1) + np.eye(n, k=-1)
            k = k + self.coupling * lap
        return k


@dataclass
class ArmState:
    kappa: np.ndarray
    kappa_dot: np.ndarray
    saturated: bool = False

    @classmethod
    def rest(cls, config: ArmConfig) -> "ArmState":
        n = config.n_segments
        return cls(kappa=np.zeros(n), kappa_dot=np.zeros(n))


def arm_step(state: ArmState, u: np.ndarray, dt: float, config: ArmConfig) -> ArmState:
    """Advance the curvature oscillators by one frame.

    Same scheme as the latent oscillator model: velocity updated from the
    acceleration at the current position, position updated with the new
    velocity. Curvatures are clamped to +-kappa_max with the velocity zeroed
    at the wall; the clamp sets the saturated flag.
    """
    k_mat = config.stiffness_matrix()
    h = dt / config.substeps
    kappa = state.kappa.copy()
    kdot = state.kappa_dot.copy()
    saturated = state.saturated
    force = config.gain * np.asarray(u, dtype=float)
    for _ in range(config.substeps):
        accel = (force - config.damping * kdot - k_mat @ kappa) / config.mass
        kdot = kdot + h * accel
        kappa = kappa + h * kdot
        over = np.abs(kappa) > config.kappa_max
        if over.any():
            saturated = True
            kappa = np.clip(kappa, -config.kappa_max, config.kappa_max)
            kdot = np.where(over, 0.0, kdot)
    return ArmState(kappa=kappa, kappa_dot=kdot, saturated=saturated)


def arc_points(config: ArmConfig, kappa: np.ndarray, n_samples: int = 128):
    """Centerline sample points per segment, list of (n_samples+1, 2) arrays.

    Displacements are built from sin/cos of |kappa| with the bend sign applied
    as a pure factor, so kappa -> -kappa negates every x coordinate exactly.
    """
    points = []
    pos = np.array([config.base[0], config.base[1]], dtype=float)
    heading = np.array([0.0, 1.0])
    t = np.linspace(0.0, config.seg_length, n_samples + 1)
    for seg in range(config.n_segments):
        k = float(kappa[seg])
        ak = abs(k)
        sg = float(np.sign(k))
        if ak < 1e-9:
            fwd = t
            lat = 0.5 * ak * t * t
        else:
            fwd = np.sin(ak * t) / ak
            lat = (1.0 - np.cos(ak * t)) / ak
        # left normal of the heading; positive curvature bends left
        normal = np.array([-heading[1], heading[0]])
        pts = pos[None, :] + fwd[:, None] * heading[None, :] + (sg * lat)[:, None] * normal[None, :]
        points.append(pts)
        theta = ak * config.seg_length
        c, s = np.cos(theta), np.sin(theta)
        heading = np.array(
            [heading[0] * c - heading[1] * (sg * s), heading[0] * (sg * s) + heading[1] * c]
        )
        pos = pts[-1]
    return points


def _pixel_grid(size: int):
    """Symmetric pixel centers (2i+1)/size - 1; row 0 is the top of the image."""
    x = (2.0 * np.arange(size) + 1.0) / size - 1.0
    y = -x
    return np.meshgrid(x, y, indexing="xy")


SEGMENT_COLORS = np.array([[0.90, 0.45, 0.15], [0.20, 0.70, 0.90], [0.85, 0.80, 0.25]])


def render_parts(state: ArmState, config: ArmConfig, size: int = 32):
    """Foreground color image and coverage alpha, both (size, size[, 3]) in [0, 1]."""
    px, py = _pixel_grid(size)
    aa = 2.0 / size
    fg = np.zeros((size, size, 3))
    alpha = np.zeros((size, size))
    for seg, pts in enumerate(arc_points(config, state.kappa)):
        d2 = (px[:, :, None] - pts[None, None, :, 0]) ** 2 + (
            py[:, :, None] - pts[None, None, :, 1]
        ) ** 2
        dist = np.sqrt(d2.min(axis=2))
        cover = np.clip((config.radius - dist) / aa + 0.5, 0.0, 1.0)
        color = SEGMENT_COLORS[seg % len(SEGMENT_COLORS)]
        fg = fg * (1.0 - cover[:, :, None]) + color[None, None, :] * cover[:, :, None]
        alpha = alpha + cover * (1.0 - alpha)
    return fg, alpha


def background_pattern(size: int = 32) -> np.ndarray:
    """Static non-uniform backdrop: vertical shade plus a coarse checker."""
    px, py = _pixel_grid(size)
    shade = 0.16 + 0.05 * py
    checker = 0.03 * (((np.arange(size) // 4)[None, :] + (np.arange(size) // 4)[:, None]) % 2)
    value = shade + checker
    return np.stack([value * 0.9, value, value * 1.1], axis=-1).clip(0.0, 1.0)


def render(state: ArmState, config: ArmConfig, size: int = 32) -> np.ndarray:
    """Composite frame (3, size, size) float in [0, 1], channels first."""
    fg, alpha = render_parts(state, config, size)
    bg = background_pattern(size)
    frame = bg * (1.0 - alpha[:, :, None]) + fg * alpha[:, :, None]
    return np.transpose(frame, (2, 0, 1))


def foreground_mask(state: ArmState, config: ArmConfig, size: int = 32) -> np.ndarray:
    """Boolean (size, size) mask of pixels at least half covered by the arm."""
    _, alpha = render_parts(state, config, size)
    return alpha >= 0.5


def simulate_episode(inputs: InputTrajectory, config: ArmConfig, size: int = 32):
    """Roll the arm through an input trajectory and rasterize every state.

    Frame n shows the state before input n is applied, so u[n] drives the
    transition from frame n to frame n+1. Returns (frames (N,3,s,s) float,
    states list).
    """
    n = inputs.n_samples
    dt = 1.0 / inputs.rate
    state = ArmState.rest(config)
    frames = np.zeros((n, 3, size, size))
    states = []
    for i in range(n):
        frames[i] = render(state, config, size)
        states.append(state)
        state = arm_step(state, inputs.samples[i], dt, config)
    return frames, states
