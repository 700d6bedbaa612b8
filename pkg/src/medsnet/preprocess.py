"""CT preprocessing: lung masking, HU windowing, z-resampling and in-plane cropping."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage as ndi

from .volume import CTVolume, NormalizedVolume

AIR_HU = -1000.0


class LungSegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    air_threshold_hu: float = -320.0
    closing_radius: int = 2
    dilation_radius: int = 5
    fill_hu: float = AIR_HU
    window_min_hu: float = -1000.0
    window_max_hu: float = 400.0
    target_z_mm: float = 1.0
    crop_size: int = 256
    keep_components: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


def ball(radius: int) -> np.ndarray:
    """Spherical structuring element of the given voxel radius."""
    if radius <= 0:
        return np.ones((1, 1, 1), dtype=bool)
    r = np.arange(-radius, radius + 1)
    zz, yy, xx = np.meshgrid(r, r, r, indexing="ij")
    return zz ** 2 + yy ** 2 + xx ** 2 <= radius ** 2


def _as_array(volume) -> np.ndarray:
    return volume.voxels if isinstance(volume, CTVolume) else np.asarray(volume)


def segment_lung_parenchyma(volume, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Boolean lung mask congruent with ``volume``.

    Air below the threshold is labelled slice by slice; components touching the
    in-plane border (outside air) are dropped, the largest 3D components are kept
    as lungs, holes are filled per slice, then the mask is closed and dilated so
    wall-attached lesions stay inside.
    """
    vox = _as_array(volume)
    air = vox < config.air_threshold_hu
    if not air.any():
        raise LungSegmentationError("no lung candidate region")

    in_plane = np.zeros((3, 3, 3), dtype=bool)
    in_plane[1] = True
    labels, n = ndi.label(air, structure=in_plane)
    border = np.unique(np.concatenate([
        labels[:, 0, :].ravel(), labels[:, -1, :].ravel(),
        labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
    ]))
    inner = air & ~np.isin(labels, border[border > 0])
    if not inner.any():
        raise LungSegmentationError("no lung candidate region")

    labels, n = ndi.label(inner)
    sizes = np.bincount(labels.ravel())[1:]
    keep = np.argsort(sizes)[::-1][: config.keep_components] + 1
    mask = np.isin(labels, keep)

    for z in range(mask.shape[0]):
        mask[z] = ndi.binary_fill_holes(mask[z])
    if config.closing_radius > 0:
        mask = ndi.binary_closing(mask, structure=ball(config.closing_radius))
    if config.dilation_radius > 0:
        mask = ndi.binary_dilation(mask, structure=ball(config.dilation_radius))
    return mask


def apply_mask(volume: CTVolume, mask: np.ndarray, fill_hu: float = AIR_HU) -> CTVolume:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.shape:
        raise ValueError(f"mask shape {mask.shape} does not match volume {volume.shape}")
    vox = np.where(mask, volume.voxels, np.asarray(fill_hu, dtype=volume.voxels.dtype))
    return CTVolume(vox, volume.spacing_mm, volume.scan_id, volume.origin_mm)


def normalize_intensity(volume, lo: float = -1000.0, hi: float = 400.0):
    """Window HU to [lo, hi] and map affinely onto [0, 1].

    Accepts a CTVolume (returns a CTVolume) or a plain array (returns float32 array).
    """
    arr = _as_array(volume).astype(np.float32)
    out = (np.clip(arr, lo, hi) - lo) / np.float32(hi - lo)
    out = np.clip(out, 0.0, 1.0)
    if isinstance(volume, CTVolume):
        return CTVolume(out, volume.spacing_mm, volume.scan_id, volume.origin_mm)
    return out


def resampled_slice_count(n_slices: int, spacing_z: float, target_z_mm: float) -> int:
    extent = (n_slices - 1) * spacing_z
    return int(math.floor(extent / target_z_mm + 1e-9)) + 1


def resample_axial(volume: CTVolume, target_z_mm: float = 1.0) -> CTVolume:
    """Linear interpolation along z; the first slice stays anchored at its position."""
    if target_z_mm <= 0:
        raise ValueError("target_z_mm must be > 0")
    Z = volume.shape[0]
    if Z < 2:
        raise ValueError("cannot resample along z: volume has a single slice")
    sz = volume.spacing_mm[0]
    spacing = (float(target_z_mm), volume.spacing_mm[1], volume.spacing_mm[2])
    if math.isclose(sz, target_z_mm, rel_tol=0, abs_tol=1e-9):
        return CTVolume(volume.voxels.copy(), spacing, volume.scan_id, volume.origin_mm)
    n = resampled_slice_count(Z, sz, target_z_mm)
    pos = np.arange(n) * (target_z_mm / sz)
    lo = np.minimum(np.floor(pos).astype(int), Z - 1)
    hi = np.minimum(lo + 1, Z - 1)
    w = (pos - lo).reshape(-1, 1, 1)
    vox = volume.voxels.astype(np.float64)
    out = (1.0 - w) * vox[lo] + w * vox[hi]
    return CTVolume(out.astype(np.float32), spacing, volume.scan_id, volume.origin_mm)


def crop_window(in_plane_shape, size: int, centroid_yx=None) -> tuple[int, int]:
    """Start indices (y0, x0) of a ``size`` window; negative starts mean padding."""
    starts = []
    for axis, dim in enumerate(in_plane_shape):
        if dim >= size:
            c = dim / 2.0 if centroid_yx is None else float(centroid_yx[axis]) + 0.5
            s = int(math.floor(c - size / 2.0 + 0.5))
            starts.append(min(max(s, 0), dim - size))
        else:
            starts.append(-((size - dim) // 2))
    return starts[0], starts[1]


def extract_window(arr: np.ndarray, starts, size: int, fill) -> np.ndarray:
    """Cut ``arr[:, y0:y0+size, x0:x0+size]``, padding with ``fill`` where out of range."""
    Z, H, W = arr.shape
    out = np.full((Z, size, size), fill, dtype=arr.dtype)
    y0, x0 = starts
    sy0, sx0 = max(y0, 0), max(x0, 0)
    sy1, sx1 = min(y0 + size, H), min(x0 + size, W)
    out[:, sy0 - y0: sy1 - y0, sx0 - x0: sx1 - x0] = arr[:, sy0:sy1, sx0:sx1]
    return out


def mask_centroid_yx(mask: np.ndarray):
    if mask is None or not np.any(mask):
        return None
    proj = np.asarray(mask).any(axis=0)
    ys, xs = np.nonzero(proj)
    return ys.mean(), xs.mean()


def crop_center(volume: CTVolume, size: int = 256, mask=None, fill_hu: float = AIR_HU) -> CTVolume:
    """Crop (or pad with ``fill_hu``) every slice to ``size`` x ``size``.

    The window is centred on the in-plane centroid of ``mask`` when given,
    otherwise on the image centre, and clamped to the image bounds.
    """
    starts = crop_window(volume.shape[1:], size, mask_centroid_yx(mask))
    vox = extract_window(volume.voxels, starts, size, fill_hu)
    sz, sy, sx = volume.spacing_mm
    oz, oy, ox = volume.origin_mm
    origin = (oz, oy + starts[0] * sy, ox + starts[1] * sx)
    return CTVolume(vox, volume.spacing_mm, volume.scan_id, origin)


@dataclass
class PreprocessedScan:
    volume: NormalizedVolume
    lung_mask: np.ndarray
    hu: CTVolume | None = None   # masked, resampled and cropped, before windowing


def preprocess_scan(volume: CTVolume, config: PreprocessConfig = PreprocessConfig()) -> PreprocessedScan:
    """Resample, mask, crop and normalize one scan (in that order)."""
    resampled = resample_axial(volume, config.target_z_mm)
    mask = segment_lung_parenchyma(resampled, config)
    masked = apply_mask(resampled, mask, config.fill_hu)
    starts = crop_window(masked.shape[1:], config.crop_size, mask_centroid_yx(mask))
    cropped = crop_center(masked, config.crop_size, mask, config.fill_hu)
    mask = extract_window(mask, starts, config.crop_size, False)
    norm = normalize_intensity(cropped, config.window_min_hu, config.window_max_hu)
    return PreprocessedScan(
        NormalizedVolume(norm.voxels, norm.spacing_mm, norm.scan_id, norm.origin_mm), mask, cropped
    )


def normalized_from_hu(volume: CTVolume, config: PreprocessConfig = PreprocessConfig()) -> NormalizedVolume:
    """Normalize an already masked/resampled/cropped HU volume (as written by ``preprocess``)."""
    norm = normalize_intensity(volume, config.window_min_hu, config.window_max_hu)
    return NormalizedVolume(norm.voxels, norm.spacing_mm, norm.scan_id, norm.origin_mm)
