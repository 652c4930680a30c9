"""Synthetic two-class motion dataset: a bright square translating left or right."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataio import ManifestEntry, write_frame, write_manifest
from .sampler import FrameSequence, aggregate_video
from .training import ClipDataset, Sample

CLASS_NAMES = ["left", "right"]


def render_square(shape, top: int, left: float, size: int, intensity: float = 1.0) -> np.ndarray:
    """Anti-aliased square: columns are weighted by their horizontal coverage."""
    h, w = shape
    frame = np.zeros((h, w))
    cols = np.arange(w)
    coverage = np.clip(np.minimum(cols + 1, left + size) - np.maximum(cols, left), 0.0, 1.0)
    frame[top:top + size, :] = intensity * coverage[None, :]
    return frame


def moving_square_frames(direction: str, shape=(16, 16), raw_frames: int = 100, size: int = 4,
                         rng: np.random.Generator | None = None, noise: float = 0.02) -> np.ndarray:
    rng = rng or np.random.default_rng()
    h, w = shape
    top = int(rng.integers(0, h - size + 1))
    travel = (w - size) * rng.uniform(0.7, 1.0)
    start = rng.uniform(0, (w - size) - travel)
    xs = start + travel * np.linspace(0.0, 1.0, raw_frames)
    if direction == "left":
        xs = (w - size) - xs
    elif direction != "right":
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    intensity = rng.uniform(0.7, 1.0)
    frames = np.stack([render_square(shape, top, x, size, intensity) for x in xs])
    frames += noise * rng.random(frames.shape)
    return np.clip(frames, 0.0, 1.0)


def make_moving_square_dataset(n_per_class: int, shape=(16, 16), raw_frames: int = 100, window_size: int = 5,
                               size: int = 4, seed: int = 0, prefix: str = "sq") -> ClipDataset:
    """Aggregated clips (h x w x raw_frames // window_size), classes interleaved."""
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n_per_class):
        for label, direction in enumerate(CLASS_NAMES):
            frames = moving_square_frames(direction, shape, raw_frames, size, rng)
            clip = aggregate_video(FrameSequence(frames), window_size, raw_frames)
            cid = f"{prefix}{k:03d}_{direction}"
            samples.append(Sample(clip.voxels.astype(np.float32), label, cid, cid, subject=f"s{k % 4}"))
    return ClipDataset(samples, list(CLASS_NAMES))


def write_moving_square_raw(out_dir, n_per_class: int, shape=(16, 16), raw_frames: int = 100, size: int = 4,
                            seed: int = 0) -> Path:
    """Write PGM frame directories plus ``manifest.tsv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for k in range(n_per_class):
        for direction in CLASS_NAMES:
            clip_dir = out_dir / f"sq{k:03d}_{direction}"
            clip_dir.mkdir(exist_ok=True)
            for t, frame in enumerate(moving_square_frames(direction, shape, raw_frames, size, rng)):
                write_frame(clip_dir / f"{t:04d}.pgm", frame)
            entries.append(ManifestEntry(clip_dir, direction, f"s{k % 4}"))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
