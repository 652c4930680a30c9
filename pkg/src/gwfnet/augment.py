"""Clip-level augmentation: mirror flips and a 30 degree rotation."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .sampler import ClipVolume

OPS = ("hflip", "vflip", "rotate30")


def rotate_frame(frame: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the frame centre; bilinear, zero fill."""
    h, w = frame.shape
    theta = np.deg2rad(degrees)
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc_grid = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = rr - cr, cc_grid - cc
    src_r = cr + np.sin(theta) * dx + np.cos(theta) * dy
    src_c = cc + np.cos(theta) * dx - np.sin(theta) * dy
    out = ndimage.map_coordinates(frame.astype(np.float64), [src_r, src_c], order=1, mode="constant", cval=0.0)
    return out.astype(frame.dtype, copy=False)


def augment_voxels(voxels: np.ndarray, op: str) -> np.ndarray:
    if op == "hflip":
        return voxels[:, ::-1, ...].copy()
    if op == "vflip":
        return voxels[::-1, ...].copy()
    if op == "rotate30":
        out = np.empty_like(voxels)
        for t in range(voxels.shape[2]):
            out[:, :, t] = rotate_frame(voxels[:, :, t], 30.0)
        return out
    raise ConfigError(f"unknown augmentation {op!r}; expected one of {OPS}")


def augment(clip: ClipVolume, op: str) -> ClipVolume:
    """Apply ``op`` to every frame; the temporal axis is untouched."""
    meta = dict(clip.meta)
    meta["augment"] = meta.get("augment", ()) + (op,)
    return ClipVolume(augment_voxels(clip.voxels, op), f"{clip.source_id}#{op}", meta)


def round_robin_plan(num_sources: int, target_count: int) -> list[tuple[int, str]]:
    """(source index, op) pairs that grow ``num_sources`` clips to ``target_count``.

    Ops are applied in rounds: every source gets ``hflip``, then ``vflip``,
    then ``rotate30``, stopping as soon as the target is reached.
    """
    extra = target_count - num_sources
    if extra < 0:
        raise ConfigError(f"target {target_count} is below the {num_sources} source clips")
    if extra > len(OPS) * num_sources:
        raise ConfigError(f"target {target_count} needs more than {len(OPS)} augmentations per clip")
    return [(k % num_sources, OPS[k // num_sources]) for k in range(extra)]
