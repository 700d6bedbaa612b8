"""Candidate extraction from the main detector and auxiliary-detector false-positive reduction."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage as ndi

from .mip import mip_stack_volume
from .model import MEDSNet
from .trainer import reflect_indices
from .volume import NormalizedVolume

CANDIDATE_COLUMNS = ("scan_id", "z0", "y0", "x0", "z1", "y1", "x1",
                     "centroid_x_mm", "centroid_y_mm", "centroid_z_mm", "theta", "survived")


@dataclass
class ProbabilityVolumeSet:
    main: np.ndarray
    aux: list[np.ndarray]

    def __post_init__(self):
        for a in self.aux:
            if a.shape != self.main.shape:
                raise ValueError(f"aux volume {a.shape} differs from main {self.main.shape}")

    @property
    def k(self) -> int:
        return len(self.aux)

    @property
    def shape(self):
        return self.main.shape


@dataclass(frozen=True)
class Candidate:
    scan_id: str
    box: tuple[int, int, int, int, int, int]   # inclusive (z0, y0, x0, z1, y1, x1)
    centroid_voxel: tuple[float, float, float]
    centroid_mm: tuple[float, float, float]    # (z, y, x) world
    n_voxels: int
    mean_main_prob: float
    theta: float | None = None
    is_tp: bool | None = None

    @property
    def score(self) -> float:
        return self.mean_main_prob if self.theta is None else self.theta

    @property
    def box_voxels(self) -> int:
        z0, y0, x0, z1, y1, x1 = self.box
        return (z1 - z0 + 1) * (y1 - y0 + 1) * (x1 - x0 + 1)


def infer_volume(model: MEDSNet, scan: NormalizedVolume, batch_size: int = 16) -> ProbabilityVolumeSet:
    """Run the network on every slice; stack per-slice maps into (Z, H, W) volumes."""
    cfg = model.config
    if scan.shape[1:] != (cfg.input_size, cfg.input_size):
        raise ValueError(f"scan in-plane shape {scan.shape[1:]} != model input {cfg.input_size}")
    vox = scan.voxels
    Z = vox.shape[0]
    fwd, bwd = mip_stack_volume(scan)
    main, aux = [], [[] for _ in range(cfg.num_aux_detectors)]
    model.eval()
    with torch.no_grad():
        for start in range(0, Z, batch_size):
            centers = np.arange(start, min(start + batch_size, Z))
            patch = torch.from_numpy(np.ascontiguousarray(
                vox[reflect_indices(centers, cfg.patch_depth, Z)]))
            out = model(patch, torch.from_numpy(fwd[centers]), torch.from_numpy(bwd[centers]))
            main.append(out.main_prob.numpy())
            for i, p in enumerate(out.aux_probs):
                aux[i].append(p.numpy())
    return ProbabilityVolumeSet(np.concatenate(main), [np.concatenate(a) for a in aux])


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return ndi.generate_binary_structure(3, 3)
    if connectivity == 6:
        return ndi.generate_binary_structure(3, 1)
    raise ValueError("connectivity must be 6 or 26")


def extract_candidates(main_volume: np.ndarray, bin_threshold: float = 0.5, min_voxels: int = 3,
                       connectivity: int = 26, scan: NormalizedVolume | None = None,
                       scan_id: str = "") -> list[Candidate]:
    """Connected components of ``main_volume > bin_threshold`` with tight bounding boxes."""
    if not 0.0 < bin_threshold < 1.0:
        raise ValueError("bin_threshold must lie in (0, 1)")
    main_volume = np.asarray(main_volume)
    labels, n = ndi.label(main_volume > bin_threshold, structure=_structure(connectivity))
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    counts = ndi.sum_labels(np.ones_like(main_volume), labels, idx)
    means = ndi.mean(main_volume, labels, idx)
    centroids = ndi.center_of_mass(np.ones_like(main_volume), labels, idx)
    sid = scan_id or (scan.scan_id if scan is not None else "")
    out = []
    for lab, sl, cnt, mean, cen in zip(idx, ndi.find_objects(labels), counts, means, centroids):
        if cnt < min_voxels:
            continue
        box = (sl[0].start, sl[1].start, sl[2].start, sl[0].stop - 1, sl[1].stop - 1, sl[2].stop - 1)
        cen = tuple(float(c) for c in cen)
        cen_mm = tuple(float(c) for c in scan.voxel_to_world(cen)) if scan is not None else cen
        out.append(Candidate(sid, tuple(int(b) for b in box), cen, cen_mm, int(cnt), float(mean)))
    return out


def thr(theta: float, tau: float) -> int:
    return 1 if theta > tau else 0


def aggregate_probability(box, aux: Sequence[np.ndarray]) -> float:
    """Mean of every auxiliary voxel inside the inclusive box, over all k volumes."""
    z0, y0, x0, z1, y1, x1 = box
    if z1 < z0 or y1 < y0 or x1 < x0:
        raise ValueError(f"degenerate region of proposal {box}")
    if not aux:
        raise ValueError("at least one auxiliary volume is required")
    n = (z1 - z0 + 1) * (y1 - y0 + 1) * (x1 - x0 + 1)
    total = 0.0
    for vol in aux:
        total += float(np.sum(vol[z0:z1 + 1, y0:y1 + 1, x0:x1 + 1], dtype=np.float64))
    return total / (n * len(aux))


def is_true_positive(candidate: Candidate, prob_set: ProbabilityVolumeSet, tau: float) -> tuple[bool, float]:
    z0, y0, x0, z1, y1, x1 = candidate.box
    if min(z0, y0, x0) < 0 or any(h >= s for h, s in zip((z1, y1, x1), prob_set.shape)):
        raise ValueError(f"candidate box {candidate.box} outside volume {prob_set.shape}")
    theta = aggregate_probability(candidate.box, prob_set.aux)
    return bool(thr(theta, tau)), theta


def score_candidates(candidates: Sequence[Candidate], prob_set: ProbabilityVolumeSet,
                     tau: float) -> list[Candidate]:
    """Annotate every candidate with its aggregate probability and keep/drop flag."""
    out = []
    for c in candidates:
        ok, theta = is_true_positive(c, prob_set, tau)
        out.append(replace(c, theta=theta, is_tp=ok))
    return out


def reduce_false_positives(candidates: Sequence[Candidate], prob_set: ProbabilityVolumeSet,
                           tau: float) -> list[Candidate]:
    return [c for c in score_candidates(candidates, prob_set, tau) if c.is_tp]


def write_candidates(candidates: Sequence[Candidate], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CANDIDATE_COLUMNS)
        for c in candidates:
            cz, cy, cx = c.centroid_mm
            w.writerow([c.scan_id, *c.box, f"{cx:.4f}", f"{cy:.4f}", f"{cz:.4f}",
                        "" if c.theta is None else f"{c.theta:.8f}",
                        "" if c.is_tp is None else int(c.is_tp)])
    return path


def read_candidates(path) -> list[Candidate]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CANDIDATE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                box = tuple(int(row[k]) for k in ("z0", "y0", "x0", "z1", "y1", "x1"))
                cen = (float(row["centroid_z_mm"]), float(row["centroid_y_mm"]),
                       float(row["centroid_x_mm"]))
                theta = float(row["theta"]) if row["theta"] else None
                survived = bool(int(row["survived"])) if row["survived"] else None
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            out.append(Candidate(row["scan_id"], box, cen, cen, 0,
                                 theta if theta is not None else 0.0, theta, survived))
    return out
