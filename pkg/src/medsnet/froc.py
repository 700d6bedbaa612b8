"""Candidate/annotation matching, FROC curves and the CPM score."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .candidates import Candidate
from .volume import Annotation

CPM_OPERATING_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
SIZE_STRATA_MM = ((3.0, 10.0), (10.0, 20.0), (20.0, float("inf")))

TP, FP, IGNORED = "TP", "FP", "ignored"


@dataclass
class MatchResult:
    labels: list[str]                 # per candidate, input order
    hit_annotation: list[int | None]  # index into annotations for TPs
    annotation_hits: list[bool]

    @property
    def n_tp(self) -> int:
        return self.labels.count(TP)

    @property
    def n_fp(self) -> int:
        return self.labels.count(FP)

    @property
    def n_ignored(self) -> int:
        return self.labels.count(IGNORED)


def _rank(candidates: Sequence[Candidate]) -> list[int]:
    """Highest score first; geometry breaks ties so the result is order independent."""
    return sorted(range(len(candidates)),
                  key=lambda i: (-candidates[i].score, candidates[i].scan_id,
                                 candidates[i].centroid_mm, candidates[i].box))


def match_candidates(candidates: Sequence[Candidate], annotations: Sequence[Annotation]) -> MatchResult:
    """Greedy hit assignment.

    A candidate hits an annotation when its centroid lies strictly within the
    annotation radius. Candidates are visited by descending score; each takes
    the nearest annotation not yet hit. A candidate inside only already-hit
    annotations is a duplicate and is ignored.
    """
    by_scan = defaultdict(list)
    for j, a in enumerate(annotations):
        by_scan[a.scan_id].append(j)
    centers = np.array([a.center_zyx_mm for a in annotations], dtype=float).reshape(-1, 3)
    radii = np.array([a.radius_mm for a in annotations], dtype=float)

    labels: list[str] = [FP] * len(candidates)
    hit_of: list[int | None] = [None] * len(candidates)
    hit = [False] * len(annotations)
    for i in _rank(candidates):
        c = candidates[i]
        js = by_scan.get(c.scan_id, [])
        if not js:
            continue
        d = np.linalg.norm(centers[js] - np.asarray(c.centroid_mm, dtype=float), axis=1)
        inside = [(dist, j) for dist, j in zip(d, js) if dist < radii[j]]
        if not inside:
            continue
        free = [(dist, j) for dist, j in inside if not hit[j]]
        if free:
            _, j = min(free)
            hit[j] = True
            labels[i], hit_of[i] = TP, j
        else:
            labels[i] = IGNORED
    return MatchResult(labels, hit_of, hit)


@dataclass
class FROCCurve:
    fp_per_scan: np.ndarray
    sensitivity: np.ndarray
    thresholds: np.ndarray
    n_scans: int
    n_annotations: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fp_per_scan.tolist(), self.sensitivity.tolist()))

    @classmethod
    def from_points(cls, points: Iterable[tuple[float, float]], n_scans: int = 1,
                    n_annotations: int = 1) -> "FROCCurve":
        pts = sorted((float(f), float(s)) for f, s in points)
        fp = np.array([p[0] for p in pts])
        sens = np.array([p[1] for p in pts])
        if len(fp) and (fp.min() < 0 or sens.min() < 0 or sens.max() > 1):
            raise ValueError("fp_per_scan must be >= 0 and sensitivity in [0, 1]")
        if np.any(np.diff(sens) < 0):
            raise ValueError("sensitivity must be non-decreasing in fp_per_scan")
        return cls(fp, sens, np.full(len(fp), np.nan), n_scans, n_annotations)


def froc_curve(candidates: Sequence[Candidate], annotations: Sequence[Annotation],
               scan_ids: Sequence[str]) -> FROCCurve:
    """Sweep the score threshold over every distinct candidate score.

    Candidates from scans outside ``scan_ids`` are rejected. Because matching
    is greedy by score, the labels of the candidates above a threshold do not
    depend on those below it, so one matching pass yields the whole curve.
    """
    scans = set(scan_ids)
    if not scans:
        raise ValueError("FROC needs at least one scan")
    stray = {c.scan_id for c in candidates} - scans
    if stray:
        raise ValueError(f"candidates reference unknown scans: {sorted(stray)[:5]}")
    annotations = [a for a in annotations if a.scan_id in scans]
    n_ann = len(annotations)
    match = match_candidates(candidates, annotations)
    scores = np.array([c.score for c in candidates], dtype=float)
    thresholds = np.unique(scores)[::-1]
    is_tp = np.array([lab == TP for lab in match.labels])
    is_fp = np.array([lab == FP for lab in match.labels])
    fps, sens = [], []
    for t in thresholds:
        keep = scores >= t
        fps.append(is_fp[keep].sum() / len(scans))
        sens.append(is_tp[keep].sum() / n_ann if n_ann else 0.0)
    return FROCCurve(np.array(fps, dtype=float), np.array(sens, dtype=float), thresholds,
                     len(scans), n_ann)


def sensitivity_at(curve: FROCCurve, fp_per_scan: float, interpolate: bool = False) -> float:
    """Sensitivity at the largest achieved FP rate not above ``fp_per_scan``.

    With ``interpolate`` the curve is instead read linearly between its
    neighbouring points, anchored at (0, 0).
    """
    fp, sens = curve.fp_per_scan, curve.sensitivity
    if len(fp) == 0:
        return 0.0
    if interpolate:
        xs = np.concatenate([[0.0], fp])
        ys = np.concatenate([[0.0], sens])
        # several points can share an FP rate; keep the best sensitivity for each
        ux = np.unique(xs)
        uy = np.array([ys[xs == x].max() for x in ux])
        return float(np.interp(fp_per_scan, ux, uy))
    ok = fp <= fp_per_scan
    return float(sens[ok].max()) if ok.any() else 0.0


@dataclass
class CPMReport:
    operating_points: tuple[float, ...]
    sensitivities: tuple[float, ...]
    cpm: float

    def as_text(self) -> str:
        head = "fp_per_scan," + ",".join(f"{p:g}" for p in self.operating_points) + ",cpm"
        row = "sensitivity," + ",".join(f"{s:.4f}" for s in self.sensitivities) + f",{self.cpm:.4f}"
        return head + "\n" + row + "\n"


def cpm_from_sensitivities(sensitivities: Sequence[float],
                           operating_points: Sequence[float] = CPM_OPERATING_POINTS) -> CPMReport:
    sens = tuple(float(s) for s in sensitivities)
    if len(sens) != len(operating_points):
        raise ValueError(f"expected {len(operating_points)} sensitivities, got {len(sens)}")
    if any(not 0.0 <= s <= 1.0 for s in sens):
        raise ValueError("sensitivities must lie in [0, 1]")
    return CPMReport(tuple(operating_points), sens, float(np.mean(sens)))


def cpm(curve: FROCCurve, interpolate: bool = False,
        operating_points: Sequence[float] = CPM_OPERATING_POINTS) -> CPMReport:
    return cpm_from_sensitivities([sensitivity_at(curve, p, interpolate) for p in operating_points],
                                  operating_points)


def candidates_per_scan(total: int, n_scans: int) -> float:
    if n_scans <= 0:
        raise ValueError("n_scans must be positive")
    return total / n_scans


def size_stratum(diameter_mm: float) -> int:
    for k, (lo, hi) in enumerate(SIZE_STRATA_MM):
        if lo <= diameter_mm < hi:
            return k
    raise ValueError(f"diameter {diameter_mm} mm below the smallest stratum")


def stratum_label(k: int) -> str:
    lo, hi = SIZE_STRATA_MM[k]
    return f">={lo:g}mm" if np.isinf(hi) else f"{lo:g}-{hi:g}mm"


@dataclass
class CandidateStageReport:
    sensitivity: float
    total_candidates: int
    candidates_per_scan: float
    detected: int = 0
    n_annotations: int = 0
    false_positives: int = 0
    detected_by_stratum: dict[str, int] = field(default_factory=dict)
    annotations_by_stratum: dict[str, int] = field(default_factory=dict)

    def as_tuple(self) -> tuple[float, int, float]:
        return self.sensitivity, self.total_candidates, self.candidates_per_scan


def candidate_stage_report(candidates: Sequence[Candidate], annotations: Sequence[Annotation],
                           scan_ids: Sequence[str]) -> CandidateStageReport:
    """Per-nodule sensitivity and candidate counts before FP reduction."""
    scans = set(scan_ids)
    n_scans = len(scans)
    annotations = [a for a in annotations if a.scan_id in scans]
    strata = {stratum_label(k): 0 for k in range(len(SIZE_STRATA_MM))}
    ann_strata = dict(strata)
    for a in annotations:
        ann_strata[stratum_label(size_stratum(a.diameter_mm))] += 1
    if not candidates:
        return CandidateStageReport(0.0, 0, 0.0, 0, len(annotations), 0, strata, ann_strata)
    match = match_candidates(candidates, annotations)
    det_strata = dict(strata)
    for j, h in enumerate(match.annotation_hits):
        if h:
            det_strata[stratum_label(size_stratum(annotations[j].diameter_mm))] += 1
    detected = sum(match.annotation_hits)
    sens = detected / len(annotations) if annotations else 0.0
    return CandidateStageReport(sens, len(candidates), candidates_per_scan(len(candidates), n_scans),
                                detected, len(annotations), match.n_fp, det_strata, ann_strata)
