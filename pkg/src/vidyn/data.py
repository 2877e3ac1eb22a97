"""Episode container: a little-endian binary format for (frames, inputs)
pairs, frame-window indexing for training, and the chronological split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BoundaryFrameError, DatasetFormatError
from .synthetic import (
    CHUNK_SECONDS,
    RAMP_SECONDS,
    SAMPLE_RATE,
    ArmConfig,
    generate_inputs,
    simulate_episode,
)

MAGIC = b"VDYN"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHIId")

# sanity bounds so a fuzzed header cannot trigger a huge allocation
_MAX_CHANNELS = 16
_MAX_SIDE = 4096
_MAX_FRAMES = 100_000_000
_MAX_INPUTS = 10_000


@dataclass
class EpisodeDataset:
    """Frames as uint8 (N, c, h, w); per-frame inputs as float32 (N, n_u).

    Input n drives the transition from frame n to frame n+1. dt is the frame
    interval in seconds.
    """

    frames: np.ndarray
    inputs: np.ndarray
    dt: float = 1.0 / 60.0

    def __post_init__(self):
        if self.frames.ndim != 4 or self.inputs.ndim != 2:
            raise DatasetFormatError("frames must be (N,c,h,w) and inputs (N,n_u)")
        if self.frames.shape[0] != self.inputs.shape[0]:
            raise DatasetFormatError("frame and input counts differ")
        self.frames = np.ascontiguousarray(self.frames, dtype=np.uint8)
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    def frames_float(self, idx) -> np.ndarray:
        """Selected frames as float32 in [0, 1]."""
        return self.frames[idx].astype(np.float32) / 255.0


def write_dataset(dataset: EpisodeDataset, path) -> None:
    c, h, w = dataset.frames.shape[1:]
    header = _HEADER.pack(MAGIC, VERSION, c, h, w, dataset.n_frames, dataset.n_inputs, dataset.dt)
    with open(path, "wb") as f:
        f.write(header)
        f.write(dataset.frames.tobytes())
        f.write(dataset.inputs.astype("<f4").tobytes())


def read_dataset(path) -> EpisodeDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("file shorter than header")
    magic, version, c, h, w, n_frames, n_u, dt = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    if not (1 <= c <= _MAX_CHANNELS and 1 <= h <= _MAX_SIDE and 1 <= w <= _MAX_SIDE):
        raise DatasetFormatError("implausible frame geometry in header")
    if n_frames > _MAX_FRAMES or n_u > _MAX_INPUTS or n_u < 1:
        raise DatasetFormatError("implausible counts in header")
    if not (dt == dt and 0.0 < dt < 10.0):
        raise DatasetFormatError(f"implausible dt {dt}")
    frame_bytes = n_frames * c * h * w
    input_bytes = n_frames * n_u * 4
    body = raw[_HEADER.size:]
    if len(body) != frame_bytes + input_bytes:
        raise DatasetFormatError(
            f"body length {len(body)} does not match header ({frame_bytes + input_bytes})"
        )
    frames = np.frombuffer(body[:frame_bytes], dtype=np.uint8).reshape(n_frames, c, h, w)
    inputs = np.frombuffer(body[frame_bytes:], dtype="<f4").reshape(n_frames, n_u)
    return EpisodeDataset(frames=frames.copy(), inputs=inputs.astype(np.float32), dt=dt)


def frame_window(n_frames: int, i: int) -> tuple[int, int, int, int]:
    """Indices (i-1, i, i+1, i+2) for central-difference velocities at i and i+1."""
    if i - 1 < 0 or i + 2 > n_frames - 1:
        raise BoundaryFrameError(f"window around frame {i} leaves [0, {n_frames})")
    return (i - 1, i, i + 1, i + 2)


def window_centers(lo: int, hi: int) -> np.ndarray:
    """All i with a full (i-1 .. i+2) window inside the half-open range [lo, hi)."""
    return np.arange(lo + 1, hi - 2)


def chronological_split(n_frames: int, n_chunks: int, fraction: float = 0.8):
    """Train/validation ranges split on a chunk boundary, train first.

    Returns ((0, split), (split, n_frames)). The boundary lands after the ramp
    that follows the last training chunk, so both sides are contiguous in time.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    if n_chunks < 2:
        # single-chunk episodes (toy runs) fall back to a plain frame split
        split = max(1, min(n_frames - 1, int(n_frames * fraction)))
        return (0, split), (split, n_frames)
    per_chunk = int(round((CHUNK_SECONDS + RAMP_SECONDS) * SAMPLE_RATE))
    n_train = min(n_chunks - 1, max(1, int(n_chunks * fraction)))
    split = min(n_frames, n_train * per_chunk)
    return (0, split), (split, n_frames)


def build_episode_dataset(
    seed: int,
    n_chunks: int = 10,
    config: ArmConfig | None = None,
    size: int = 32,
) -> EpisodeDataset:
    """Generate inputs, simulate the arm, rasterize, and quantize to a dataset."""
    if config is None:
        config = ArmConfig()
    inputs = generate_inputs(seed, n_chunks=n_chunks, n_u=config.n_segments)
    frames, _ = simulate_episode(inputs, config, size=size)
    frames_u8 = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    return EpisodeDataset(
        frames=frames_u8,
        inputs=inputs.samples.astype(np.float32),
        dt=1.0 / inputs.rate,
    )
