"""Synthetic thorax phantoms with known nodule ground truth.

A phantom is a thoracic section: a soft-tissue body cylinder holding two
lungs that run through every slice, tapering slightly towards the ends.
Nodules are solid spheres placed fully inside a lung; vessels are curved
tubes of similar density that act as confusers (elongated under MIP,
compact in a single slice).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .volume import Annotation, CTVolume


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    volume_shape: tuple[int, int, int] = (64, 128, 128)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_nodules: int = 3
    nodule_diameter_range_mm: tuple[float, float] = (3.0, 25.0)
    n_vessels: int = 4
    vessel_radius_range_mm: tuple[float, float] = (0.8, 1.6)
    noise_sigma_hu: float = 20.0
    background_hu: float = -1000.0
    body_hu: float = 40.0
    lung_hu: float = -800.0
    nodule_hu: float = 30.0
    vessel_hu: float = 30.0
    scan_id: str = ""
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(s) for s in self.volume_shape))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "nodule_diameter_range_mm",
                           tuple(float(d) for d in self.nodule_diameter_range_mm))
        object.__setattr__(self, "vessel_radius_range_mm",
                           tuple(float(d) for d in self.vessel_radius_range_mm))
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 8:
            raise ValueError(f"volume_shape must be three sizes >= 8, got {self.volume_shape}")
        if min(self.spacing_mm) <= 0:
            raise ValueError("spacing_mm must be positive")
        lo, hi = self.nodule_diameter_range_mm
        if not 3.0 <= lo <= hi <= 30.0:
            raise ValueError(f"nodule diameters must satisfy 3 <= lo <= hi <= 30, got {(lo, hi)}")
        if self.n_nodules < 0 or self.n_vessels < 0:
            raise ValueError("counts must be >= 0")
        if self.noise_sigma_hu < 0:
            raise ValueError("noise_sigma_hu must be >= 0")

    @property
    def resolved_scan_id(self) -> str:
        return self.scan_id or f"phantom-{self.seed:04d}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


@dataclass
class _Ellipsoid:
    """Lung body: elliptic in-plane, flattened along z (z term raised to ``z_power``)."""

    center: np.ndarray  # mm, (z, y, x)
    semi_axes: np.ndarray
    z_power: float = 6.0

    def inside(self, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Points at least roughly ``margin`` mm inside the surface."""
        axes = np.maximum(self.semi_axes - margin, 1e-6)
        u = np.abs((pts - self.center) / axes)
        return u[..., 0] ** self.z_power + u[..., 1] ** 2 + u[..., 2] ** 2 <= 1.0


@dataclass
class PhantomLayout:
    lungs: list[_Ellipsoid] = field(default_factory=list)
    body_semi_axes_yx: np.ndarray | None = None


def _grid_mm(shape, spacing):
    return [np.arange(n) * s for n, s in zip(shape, spacing)]


def _layout(shape, spacing) -> PhantomLayout:
    extent = np.array([(n - 1) * s for n, s in zip(shape, spacing)])
    c = extent / 2.0
    lungs = []
    for side in (-1, 1):
        center = np.array([c[0], c[1], c[2] + side * 0.22 * extent[2]])
        semi = np.array([0.70 * extent[0], 0.32 * extent[1], 0.17 * extent[2]])
        lungs.append(_Ellipsoid(center, semi))
    return PhantomLayout(lungs, np.array([0.45 * extent[1], 0.47 * extent[2]]))


def _paint_ball(vol, center_mm, radius_mm, spacing, value, where=None):
    """Set voxels whose centres lie within ``radius_mm`` of ``center_mm``."""
    spacing = np.asarray(spacing)
    lo = np.maximum(np.floor((center_mm - radius_mm) / spacing).astype(int), 0)
    hi = np.minimum(np.ceil((center_mm + radius_mm) / spacing).astype(int) + 1, vol.shape)
    if np.any(hi <= lo):
        return
    zz, yy, xx = np.meshgrid(*[np.arange(a, b) * s for a, b, s in zip(lo, hi, spacing)],
                             indexing="ij")
    d2 = (zz - center_mm[0]) ** 2 + (yy - center_mm[1]) ** 2 + (xx - center_mm[2]) ** 2
    sel = d2 <= radius_mm ** 2
    region = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
    if where is not None:
        sel &= where[region]
    vol[region][sel] = value


def rasterize_sphere(shape, spacing, center_zyx_mm, diameter_mm, origin_mm=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Boolean mask of voxels whose centres lie within the sphere."""
    mask = np.zeros(shape, dtype=bool)
    center = np.asarray(center_zyx_mm, dtype=float) - np.asarray(origin_mm, dtype=float)
    _paint_ball(mask, center, diameter_mm / 2.0, spacing, True)
    return mask


def generate_phantom(spec: PhantomSpec) -> tuple[CTVolume, list[Annotation]]:
    rng = np.random.default_rng(spec.seed)
    shape, spacing = spec.volume_shape, np.asarray(spec.spacing_mm)
    layout = _layout(shape, spacing)
    extent_z = (shape[0] - 1) * spacing[0]
    gz, gy, gx = _grid_mm(shape, spacing)
    Z, Y, X = np.meshgrid(gz, gy, gx, indexing="ij")
    pts = np.stack([Z, Y, X], axis=-1)

    vol = np.full(shape, spec.background_hu, dtype=np.float64)
    cy, cx = layout.lungs[0].center[1], (layout.lungs[0].center[2] + layout.lungs[1].center[2]) / 2
    by, bx = layout.body_semi_axes_yx
    body = ((Y - cy) / by) ** 2 + ((X - cx) / bx) ** 2 <= 1.0
    vol[body] = spec.body_hu
    lung_mask = np.zeros(shape, dtype=bool)
    for lung in layout.lungs:
        lung_mask |= lung.inside(pts)
    vol[lung_mask] = spec.lung_hu

    nodules = []
    dmin, dmax = spec.nodule_diameter_range_mm
    for _ in range(spec.n_nodules):
        for _attempt in range(spec.max_retries):
            d = float(rng.uniform(dmin, dmax))
            lung = layout.lungs[rng.integers(len(layout.lungs))]
            p = lung.center + rng.uniform(-1, 1, 3) * lung.semi_axes
            if not lung.inside(p[None], margin=d / 2 + 1.0)[0]:
                continue
            if not d / 2 + 1.0 <= p[0] <= extent_z - d / 2 - 1.0:
                continue
            if any(np.linalg.norm(p - q) < (d + e) / 2 + 3.0 for q, e in nodules):
                continue
            nodules.append((p, d))
            break
        else:
            raise PhantomError(
                f"could not place nodule {len(nodules) + 1} of {spec.n_nodules} "
                f"after {spec.max_retries} attempts"
            )

    rmin, rmax = spec.vessel_radius_range_mm
    for _ in range(spec.n_vessels):
        for _attempt in range(spec.max_retries):
            lung = layout.lungs[rng.integers(len(layout.lungs))]
            a = lung.center + rng.uniform(-0.9, 0.9, 3) * lung.semi_axes
            b = lung.center + rng.uniform(-0.9, 0.9, 3) * lung.semi_axes
            ctrl = (a + b) / 2 + rng.normal(0, 0.25, 3) * lung.semi_axes
            if np.linalg.norm(b - a) < 0.6 * lung.semi_axes.min():
                continue
            r = float(rng.uniform(rmin, rmax))
            t = np.linspace(0, 1, max(int(np.linalg.norm(b - a) / (0.5 * spacing.min())), 8))[:, None]
            path = (1 - t) ** 2 * a + 2 * (1 - t) * t * ctrl + t ** 2 * b
            clear = all(
                np.min(np.linalg.norm(path - q, axis=1)) > d / 2 + r + 2.0 for q, d in nodules
            )
            if not clear:
                continue
            for p in path:
                _paint_ball(vol, p, r, spacing, spec.vessel_hu, where=lung_mask)
            break
        # a vessel that cannot be placed is simply omitted; it carries no ground truth

    for p, d in nodules:
        _paint_ball(vol, p, d / 2, spacing, spec.nodule_hu)

    if spec.noise_sigma_hu > 0:
        vol += rng.normal(0.0, spec.noise_sigma_hu, size=shape)
    vol = np.clip(np.rint(vol), -1024, 3071).astype(np.int16)

    sid = spec.resolved_scan_id
    annotations = [
        Annotation(sid, center_x_mm=float(p[2]), center_y_mm=float(p[1]),
                   center_z_mm=float(p[0]), diameter_mm=float(d))
        for p, d in nodules
    ]
    return CTVolume(vol, tuple(spacing), sid), annotations


def lung_ellipsoid_mask(spec: PhantomSpec) -> np.ndarray:
    """Ground-truth lung region of a phantom (before vessels and nodules)."""
    layout = _layout(spec.volume_shape, np.asarray(spec.spacing_mm))
    gz, gy, gx = _grid_mm(spec.volume_shape, spec.spacing_mm)
    pts = np.stack(np.meshgrid(gz, gy, gx, indexing="ij"), axis=-1)
    mask = np.zeros(spec.volume_shape, dtype=bool)
    for lung in layout.lungs:
        mask |= lung.inside(pts)
    return mask
