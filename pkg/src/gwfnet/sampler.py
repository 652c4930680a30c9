"""Gaussian-weighted temporal frame aggregation.

A raw video is cut into consecutive, non-overlapping windows of ``L`` frames
and every window is collapsed into a single frame by a normalized
Gaussian-weighted sum.  With ``L = 5`` and 100 raw frames this yields the
20-frame clips the 3D CNN consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, InputError, ShapeError

MIN_WINDOW = 3
MAX_WINDOW = 8


@dataclass(frozen=True)
class GaussianWeightVector:
    weights: np.ndarray

    @property
    def window_size(self) -> int:
        return int(self.weights.shape[0])

    def normalized(self) -> np.ndarray:
        return self.weights / np.sum(self.weights)


@dataclass
class FrameSequence:
    """Temporally ordered single-channel frames, stored as a T x H x W array."""

    frames: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.ndim != 3:
            raise ShapeError(f"frames must be T x H x W, got shape {frames.shape}")
        self.frames = frames

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @classmethod
    def from_frames(cls, frames: Sequence[np.ndarray], frame_rate: float = 25.0) -> "FrameSequence":
        if len(frames) == 0:
            return cls(np.zeros((0, 1, 1)), frame_rate)
        shapes = {np.shape(f) for f in frames}
        if len(shapes) != 1:
            raise ShapeError(f"frames differ in size: {sorted(shapes)}")
        return cls(np.stack([np.asarray(f) for f in frames]), frame_rate)


@dataclass
class ClipVolume:
    """One preprocessed video as an H x W x T volume."""

    voxels: np.ndarray
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.voxels.shape)


def gaussian_weights(window_size: int, allow_any_size: bool = False) -> GaussianWeightVector:
    """Sampled Gaussian with centre ``(L+1)/2`` and ``sigma = (L-1)/4``.

    For ``L = 5`` this gives ``[0.135, 0.607, 1, 0.607, 0.135]``.  Odd sizes
    peak at exactly 1; even sizes have two equal central entries below 1.
    """
    L = int(window_size)
    if not allow_any_size and not MIN_WINDOW <= L <= MAX_WINDOW:
        raise DomainError(f"window size {L} outside [{MIN_WINDOW}, {MAX_WINDOW}]")
    if L < 1:
        raise DomainError(f"window size must be positive, got {L}")
    if L == 1:
        return GaussianWeightVector(np.ones(1))
    j = np.arange(1, L + 1, dtype=np.float64)
    centre = (L + 1) / 2.0
    sigma = (L - 1) / 4.0
    return GaussianWeightVector(np.exp(-0.5 * ((j - centre) / sigma) ** 2))


def partition_sequence(seq: FrameSequence | np.ndarray, window_size: int) -> list[np.ndarray]:
    """Split into ``floor(T / L)`` contiguous windows; a short tail is dropped."""
    frames = seq.frames if isinstance(seq, FrameSequence) else np.asarray(seq)
    L = int(window_size)
    if L < 1:
        raise DomainError(f"window size must be positive, got {L}")
    T = frames.shape[0]
    if T < L:
        raise InputError(f"{T} frames cannot fill a window of {L}")
    return [frames[k * L:(k + 1) * L] for k in range(T // L)]


def aggregate_window(window: Sequence[np.ndarray] | np.ndarray, w: GaussianWeightVector) -> np.ndarray:
    """Pixelwise convex combination ``sum_j frame_j * W_j / sum(W)``."""
    frames = np.asarray(window, dtype=np.float64)
    if frames.ndim != 3:
        raise ShapeError(f"window must be L x H x W, got shape {frames.shape}")
    if frames.shape[0] != w.window_size:
        raise ShapeError(f"window holds {frames.shape[0]} frames, weight vector has {w.window_size}")
    coeffs = w.normalized()
    out = np.zeros(frames.shape[1:], dtype=np.float64)
    for c, frame in zip(coeffs, frames):
        out += c * frame
    return out


def pad_or_trim(frames: np.ndarray, max_raw_frames: int) -> np.ndarray:
    """Keep the first ``max_raw_frames`` frames, repeating the last one if short."""
    T = frames.shape[0]
    if T == 0:
        raise InputError("empty frame sequence")
    if T >= max_raw_frames:
        return frames[:max_raw_frames]
    tail = np.repeat(frames[-1:], max_raw_frames - T, axis=0)
    return np.concatenate([frames, tail], axis=0)


def aggregate_video(
    seq: FrameSequence,
    window_size: int = 5,
    max_raw_frames: int = 100,
    source_id: str = "",
    allow_any_size: bool = False,
) -> ClipVolume:
    """Aggregate a whole video into an H x W x floor(max_raw_frames / L) clip."""
    if len(seq) == 0:
        raise InputError(f"empty frame sequence {source_id!r}")
    if max_raw_frames < 1:
        raise DomainError(f"max_raw_frames must be positive, got {max_raw_frames}")
    w = gaussian_weights(window_size, allow_any_size=allow_any_size)
    frames = pad_or_trim(seq.frames, max_raw_frames)
    aggregated = [aggregate_window(win, w) for win in partition_sequence(frames, w.window_size)]
    voxels = np.stack(aggregated, axis=-1)
    return ClipVolume(voxels, source_id, {"window_size": w.window_size, "raw_frames": len(seq)})
