"""Bidirectional maximum intensity projections around a central slice.

Forward slabs cover ``[c, c + t - 1]`` and backward slabs ``[c - t + 1, c]``
(forward = increasing slice index). Both include the central slice and are
clamped at the volume edges, so a slab is never empty.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import CTVolume

SLAB_THICKNESSES_MM = (3, 5, 10)
DIRECTIONS = ("forward", "backward")


def _as_unit_spacing_array(volume) -> np.ndarray:
    if isinstance(volume, CTVolume):
        if abs(volume.spacing_mm[0] - 1.0) > 1e-6:
            raise ValueError(
                f"MIP slab thickness assumes 1 mm slices, got z-spacing {volume.spacing_mm[0]}"
            )
        return volume.voxels
    arr = np.asarray(volume)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {arr.shape}")
    return arr


def slab_range(center: int, thickness: int, direction: str, n_slices: int) -> tuple[int, int]:
    """Inclusive slice range of a slab after clamping to ``[0, n_slices - 1]``."""
    if not 0 <= center < n_slices:
        raise IndexError(f"center {center} outside [0, {n_slices - 1}]")
    if thickness < 1:
        raise ValueError("thickness_mm must be >= 1")
    if direction == "forward":
        return center, min(center + thickness - 1, n_slices - 1)
    if direction == "backward":
        return max(center - thickness + 1, 0), center
    raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def directional_mip(volume, center: int, thickness_mm: int, direction: str) -> np.ndarray:
    arr = _as_unit_spacing_array(volume)
    z0, z1 = slab_range(int(center), int(thickness_mm), direction, arr.shape[0])
    return arr[z0: z1 + 1].max(axis=0)


def directional_mip_volume(volume, thickness_mm: int, direction: str) -> np.ndarray:
    """MIP for every central slice at once, shape ``(Z, H, W)``.

    ``out[c]`` equals ``directional_mip(volume, c, thickness_mm, direction)``.
    """
    arr = _as_unit_spacing_array(volume)
    if thickness_mm < 1:
        raise ValueError("thickness_mm must be >= 1")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    Z = arr.shape[0]
    base = np.arange(Z)
    out = arr.copy()
    for k in range(1, int(thickness_mm)):
        if direction == "forward":
            idx = np.minimum(base + k, Z - 1)
        else:
            idx = np.maximum(base - k, 0)
        np.maximum(out, arr[idx], out=out)
    return out


@dataclass
class MIPStack:
    center_index: int
    forward: np.ndarray       # (3, H, W), thicknesses in order
    backward: np.ndarray      # (3, H, W)
    thicknesses: tuple[int, ...] = SLAB_THICKNESSES_MM

    def image(self, direction: str, thickness_mm: int) -> np.ndarray:
        stack = self.forward if direction == "forward" else self.backward
        return stack[self.thicknesses.index(thickness_mm)]


def build_mip_stack(volume, center: int, thicknesses=SLAB_THICKNESSES_MM) -> MIPStack:
    fwd = np.stack([directional_mip(volume, center, t, "forward") for t in thicknesses])
    bwd = np.stack([directional_mip(volume, center, t, "backward") for t in thicknesses])
    return MIPStack(int(center), fwd, bwd, tuple(thicknesses))


def mip_stack_volume(volume, thicknesses=SLAB_THICKNESSES_MM) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward MIP triples for every slice: two arrays ``(Z, 3, H, W)``."""
    fwd = np.stack([directional_mip_volume(volume, t, "forward") for t in thicknesses], axis=1)
    bwd = np.stack([directional_mip_volume(volume, t, "backward") for t in thicknesses], axis=1)
    return fwd, bwd
