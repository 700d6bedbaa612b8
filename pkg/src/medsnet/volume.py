"""Volume containers, the raw+sidecar volume format and annotation files."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MIN_NODULE_DIAMETER_MM = 3.0
ANNOTATION_COLUMNS = ("scan_id", "center_x_mm", "center_y_mm", "center_z_mm", "diameter_mm")


class VolumeFormatError(ValueError):
    pass


class AnnotationFormatError(ValueError):
    pass


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ValueError(f"spacing_mm must be three positive reals, got {spacing}")
    return spacing


@dataclass
class CTVolume:
    """HU voxels ordered (z, y, x) with per-axis spacing.

    ``origin_mm`` is the world position of voxel (0, 0, 0) relative to the
    origin of the scan the volume was derived from; it stays (0, 0, 0) for
    raw scans and tracks resampling and cropping.
    """

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]
    scan_id: str = ""
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D (z, y, x), got shape {self.voxels.shape}")
        self.spacing_mm = _check_spacing(self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        if not np.isfinite(self.voxels).all():
            raise ValueError("volume contains non-finite voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def world_to_voxel(self, zyx_mm) -> np.ndarray:
        return (np.asarray(zyx_mm, dtype=float) - self.origin_mm) / self.spacing_mm

    def voxel_to_world(self, zyx) -> np.ndarray:
        return np.asarray(zyx, dtype=float) * self.spacing_mm + self.origin_mm


@dataclass
class NormalizedVolume(CTVolume):
    """Intensity-normalized volume in [0, 1] at 1 mm slice spacing."""

    def __post_init__(self):
        super().__post_init__()
        self.voxels = self.voxels.astype(np.float32, copy=False)
        if self.voxels.size and (self.voxels.min() < 0.0 or self.voxels.max() > 1.0):
            raise ValueError("normalized volume must lie in [0, 1]")
        if not math.isclose(self.spacing_mm[0], 1.0, rel_tol=0, abs_tol=1e-6):
            raise ValueError(f"normalized volume needs 1 mm z-spacing, got {self.spacing_mm[0]}")


@dataclass(frozen=True)
class Annotation:
    scan_id: str
    center_x_mm: float
    center_y_mm: float
    center_z_mm: float
    diameter_mm: float

    @property
    def center_zyx_mm(self) -> np.ndarray:
        return np.array([self.center_z_mm, self.center_y_mm, self.center_x_mm])

    @property
    def radius_mm(self) -> float:
        return self.diameter_mm / 2.0


# -- raw volume + sidecar -----------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _raw_path(path: Path) -> Path:
    return path.with_suffix(".raw")


def write_volume(volume: CTVolume, path) -> tuple[Path, Path]:
    """Write ``<stem>.raw`` (little-endian int16, z-major) and ``<stem>.json``.

    Voxels are rounded to the nearest integer HU and must fit int16.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vox = np.rint(volume.voxels)
    if vox.min(initial=0) < -32768 or vox.max(initial=0) > 32767:
        raise VolumeFormatError(f"{path}: voxel values do not fit int16")
    raw = _raw_path(path)
    vox.astype("<i2").tofile(raw)
    meta = {
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing_mm),
        "origin_mm": list(volume.origin_mm),
        "scan_id": volume.scan_id,
        "dtype": "<i2",
        "order": "zyx",
    }
    sidecar = _sidecar_path(path)
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return raw, sidecar


def read_volume(path) -> CTVolume:
    path = Path(path)
    sidecar, raw = _sidecar_path(path), _raw_path(path)
    try:
        meta = json.loads(sidecar.read_text())
    except FileNotFoundError:
        raise VolumeFormatError(f"{sidecar}: metadata sidecar is missing") from None
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{sidecar}: corrupt metadata ({exc})") from None
    for key in ("shape", "spacing_mm", "scan_id"):
        if key not in meta:
            raise VolumeFormatError(f"{sidecar}: missing field '{key}'")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3 or min(shape) < 1:
        raise VolumeFormatError(f"{sidecar}: invalid shape {meta['shape']}")
    if meta.get("dtype", "<i2") != "<i2":
        raise VolumeFormatError(f"{sidecar}: unsupported dtype {meta['dtype']}")
    if not raw.exists():
        raise VolumeFormatError(f"{raw}: voxel file is missing")
    expected = int(np.prod(shape)) * 2
    actual = raw.stat().st_size
    if actual != expected:
        raise VolumeFormatError(
            f"{raw}: size mismatch, {actual} bytes on disk but shape {shape} needs {expected}"
        )
    vox = np.fromfile(raw, dtype="<i2").reshape(shape)
    try:
        return CTVolume(vox, tuple(meta["spacing_mm"]), str(meta["scan_id"]),
                        tuple(meta.get("origin_mm", (0.0, 0.0, 0.0))))
    except ValueError as exc:
        raise VolumeFormatError(f"{sidecar}: {exc}") from None


# -- annotations --------------------------------------------------------------

def load_annotations(path, min_diameter_mm: float = MIN_NODULE_DIAMETER_MM) -> list[Annotation]:
    """Parse an annotation CSV; rows below ``min_diameter_mm`` are dropped with a warning."""
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise AnnotationFormatError(f"{path}: empty file") from None
        missing = [c for c in ANNOTATION_COLUMNS if c not in header]
        if missing:
            raise AnnotationFormatError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = {c: header.index(c) for c in ANNOTATION_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise AnnotationFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ann = Annotation(
                    scan_id=row[idx["scan_id"]].strip(),
                    center_x_mm=float(row[idx["center_x_mm"]]),
                    center_y_mm=float(row[idx["center_y_mm"]]),
                    center_z_mm=float(row[idx["center_z_mm"]]),
                    diameter_mm=float(row[idx["diameter_mm"]]),
                )
            except ValueError as exc:
                raise AnnotationFormatError(f"{path}:{lineno}: {exc}") from None
            if not ann.scan_id:
                raise AnnotationFormatError(f"{path}:{lineno}: empty scan_id")
            if ann.diameter_mm < min_diameter_mm:
                logger.warning("%s:%d: nodule diameter %.2f mm < %.1f mm, excluded",
                               path, lineno, ann.diameter_mm, min_diameter_mm)
                continue
            out.append(ann)
    return out


def write_annotations(annotations, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ANNOTATION_COLUMNS)
        for a in annotations:
            w.writerow([a.scan_id, f"{a.center_x_mm:.4f}", f"{a.center_y_mm:.4f}",
                        f"{a.center_z_mm:.4f}", f"{a.diameter_mm:.4f}"])
    return path


def group_by_scan(annotations) -> dict[str, list[Annotation]]:
    groups: dict[str, list[Annotation]] = {}
    for a in annotations:
        groups.setdefault(a.scan_id, []).append(a)
    return groups
