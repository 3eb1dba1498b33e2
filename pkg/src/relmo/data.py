"""Scenes, velocity augmentation, the synthetic generator and the ``.mmp`` format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Scene",
    "SyntheticConfig",
    "DatasetFormatError",
    "BadMagicError",
    "TruncatedFileError",
    "LengthMismatchError",
    "frame_differences",
    "velocity_augment",
    "reconstruct_positions",
    "quantize",
    "generate_synthetic",
    "generate_scenes",
    "save_dataset",
    "load_dataset",
    "read_header",
    "MAGIC",
]

MAGIC = b"MMP1"
_HEADER = struct.Struct("<4s5I")

# Coordinates produced by the generator sit on this dyadic lattice; below
# ~1e6 every sum and difference of lattice values is exact in float64.
LATTICE = 2.0**-20


@dataclass(frozen=True)
class Scene:
    """N persons observed for T frames and continued for P frames.

    ``coords`` has shape ``(N, T + P, J, 3)`` and is stored read-only.
    """

    coords: np.ndarray
    T: int

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 4 or coords.shape[-1] != 3:
            raise ValueError(f"scene coords must be (N, T+P, J, 3), got {coords.shape}")
        n, total, j, _ = coords.shape
        t = int(self.T)
        if n < 1 or j < 2 or t < 2 or total - t < 1:
            raise ValueError(f"invalid scene dims N={n} T={t} P={total - t} J={j}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("scene coordinates must be finite")
        coords.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "T", t)

    @property
    def N(self) -> int:
        return self.coords.shape[0]

    @property
    def P(self) -> int:
        return self.coords.shape[1] - self.T

    @property
    def J(self) -> int:
        return self.coords.shape[2]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.N, self.T, self.P, self.J

    @property
    def observed(self) -> np.ndarray:
        return self.coords[:, : self.T]

    @property
    def future(self) -> np.ndarray:
        return self.coords[:, self.T :]

    @property
    def last_observed(self) -> np.ndarray:
        return self.coords[:, self.T - 1]

    def permute_persons(self, order: Sequence[int]) -> Scene:
        return Scene(self.coords[np.asarray(order)], self.T)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return self.T == other.T and np.array_equal(self.coords, other.coords)

    __hash__ = None


# ---------------------------------------------------------------------------
# velocities


def frame_differences(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """First differences along ``axis`` with a zero first frame."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] < 2:
        raise ValueError("need at least 2 frames to form velocities")
    v = np.zeros_like(x)
    src = np.moveaxis(x, axis, 0)
    dst = np.moveaxis(v, axis, 0)
    dst[1:] = src[1:] - src[:-1]
    return v


def velocity_augment(scene: Scene) -> np.ndarray:
    """Per-frame velocities of the observed window, shape ``(N, T, J, 3)``."""
    return frame_differences(scene.observed, axis=1)


def reconstruct_positions(v: np.ndarray, x1: np.ndarray, axis: int = 0) -> np.ndarray:
    """Inverse of :func:`frame_differences`: running sum seeded with ``x1``.

    The sum is accumulated frame by frame (``x_t = x_{t-1} + v_t``), so on the
    generator lattice the round trip is exact.
    """
    v = np.asarray(v, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    steps = np.moveaxis(v, axis, 0).copy()
    if x1.shape != steps.shape[1:]:
        raise ValueError(f"x1 shape {x1.shape} does not match a frame of {v.shape}")
    steps[0] = x1
    return np.moveaxis(np.cumsum(steps, axis=0), 0, axis)


def quantize(x: np.ndarray) -> np.ndarray:
    """Round onto the 2**-20 lattice used by the generator."""
    return np.round(np.asarray(x, dtype=np.float64) / LATTICE) * LATTICE


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SyntheticConfig:
    N: int = 2
    T: int = 15
    P: int = 15
    J: int = 15
    seed: int = 0
    interaction_strength: float = 0.0
    person_seeds: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.N < 1 or self.J < 2 or self.T < 2 or self.P < 1:
            raise ValueError(f"invalid scene dims N={self.N} T={self.T} P={self.P} J={self.J}")
        if not np.isfinite(self.interaction_strength) or self.interaction_strength < 0:
            raise ValueError("interaction_strength must be finite and >= 0")
        if self.person_seeds is not None and len(self.person_seeds) != self.N:
            raise ValueError("person_seeds needs one entry per person")


# per-frame pull toward the nearest other person at interaction_strength 1
_ATTRACTION_GAIN = 0.6


def _person_motion(rng: np.random.Generator, frames: int, joints: int):
    t = np.arange(frames, dtype=np.float64)
    start = np.array([rng.uniform(-2.0, 2.0), 0.9, rng.uniform(-2.0, 2.0)])
    heading = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.0, 0.03)
    drift = speed * np.array([np.cos(heading), 0.0, np.sin(heading)])
    # low-frequency wander on the ground plane
    wander = np.zeros((frames, 3))
    for axis in (0, 2):
        for _ in range(2):
            amp = rng.uniform(0.05, 0.25)
            freq = rng.uniform(0.02, 0.08)
            phase = rng.uniform(0, 2 * np.pi)
            wander[:, axis] += amp * np.sin(2 * np.pi * freq * t + phase)
    root_steps = np.diff(start + drift * t[:, None] + wander, axis=0, prepend=np.zeros((1, 3)))

    offsets = rng.uniform(-0.5, 0.5, size=(joints, 3))
    offsets[0] = 0.0
    gait_freq = rng.uniform(0.05, 0.15)
    gait_phase = rng.uniform(0, 2 * np.pi)
    joint_phase = rng.uniform(0, 2 * np.pi, size=joints)
    amp = rng.uniform(0.01, 0.08, size=(joints, 3))
    gait = amp[None] * np.sin(2 * np.pi * gait_freq * t[:, None, None] + gait_phase + joint_phase[None, :, None])
    return root_steps, offsets, gait


def generate_synthetic(config: SyntheticConfig) -> Scene:
    """Deterministic toy scene: drifting, wandering roots plus a periodic gait.

    Each person is driven by their own generator (seeded from ``config.seed``
    and the person index unless ``person_seeds`` is given). With a positive
    ``interaction_strength`` each root is pulled every frame toward the
    currently nearest other person, keeping the offset the two started with,
    so coupled persons move together.
    """
    n, frames, joints = config.N, config.T + config.P, config.J
    if config.person_seeds is not None:
        seeds = [np.random.SeedSequence(int(s)) for s in config.person_seeds]
    else:
        seeds = [np.random.SeedSequence([int(config.seed), i]) for i in range(n)]
    parts = [_person_motion(np.random.default_rng(s), frames, joints) for s in seeds]

    roots = np.zeros((n, frames, 3))
    roots[:, 0] = [p[0][0] for p in parts]
    pull = config.interaction_strength * _ATTRACTION_GAIN
    for t in range(1, frames):
        prev = roots[:, t - 1]
        roots[:, t] = prev + np.array([p[0][t] for p in parts])
        if pull > 0 and n > 1:
            gaps = np.linalg.norm(prev[:, None] - prev[None], axis=-1)
            np.fill_diagonal(gaps, np.inf)
            nearest = gaps.argmin(axis=1)
            # pull toward the slot beside the partner (partner position plus
            # the initial offset between the two)
            slot = prev[nearest] + (roots[:, 0] - roots[nearest, 0])
            roots[:, t] += pull * (slot - prev)

    coords = np.stack(
        [roots[i][:, None, :] + parts[i][1][None] + parts[i][2] for i in range(n)]
    )
    return Scene(quantize(coords), config.T)


def generate_scenes(count: int, config: SyntheticConfig) -> list[Scene]:
    """``count`` scenes whose seeds are derived from ``config.seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    children = np.random.SeedSequence(int(config.seed)).generate_state(count, dtype=np.uint64)
    out = []
    for s in children:
        cfg = SyntheticConfig(
            N=config.N,
            T=config.T,
            P=config.P,
            J=config.J,
            seed=int(s),
            interaction_strength=config.interaction_strength,
        )
        out.append(generate_synthetic(cfg))
    return out


# ---------------------------------------------------------------------------
# .mmp files


class DatasetFormatError(ValueError):
    """Malformed ``.mmp`` file."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class LengthMismatchError(DatasetFormatError):
    pass


def save_dataset(scenes: Sequence[Scene], path) -> int:
    """Write scenes to ``path``; returns the number of bytes written."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("cannot save an empty dataset")
    dims = scenes[0].dims
    for s in scenes[1:]:
        if s.dims != dims:
            raise ValueError(f"heterogeneous scene dims {s.dims} vs {dims}")
    n, t, p, j = dims
    payload = np.stack([s.coords for s in scenes]).astype("<f8", copy=False).tobytes()
    blob = _HEADER.pack(MAGIC, n, t, p, j, len(scenes)) + payload
    Path(path).write_bytes(blob)
    return len(blob)


def read_header(blob: bytes) -> tuple[int, int, int, int, int]:
    """Parse ``(N, T, P, J, count)`` from the start of an ``.mmp`` blob."""
    if len(blob) < 4:
        raise TruncatedFileError("file too short to hold the magic bytes")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError("file too short to hold the header")
    _, n, t, p, j, count = _HEADER.unpack_from(blob)
    return n, t, p, j, count


def load_dataset(path) -> list[Scene]:
    blob = Path(path).read_bytes()
    n, t, p, j, count = read_header(blob)
    expected = count * n * (t + p) * j * 3 * 8
    got = len(blob) - _HEADER.size
    if got != expected:
        raise LengthMismatchError(
            f"payload is {got} bytes but header (N={n} T={t} P={p} J={j} count={count}) implies {expected}"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(count, n, t + p, j, 3)
    return [Scene(data[i].astype(np.float64), t) for i in range(count)]
