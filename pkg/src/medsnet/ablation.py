"""Ablation presets, per-detector reports and the phantom benchmark.

Every preset is a configuration over the same model, trainer and inference
code; nothing forks per variant.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .candidates import Candidate, extract_candidates, infer_volume, score_candidates
from .froc import (CPM_OPERATING_POINTS, SIZE_STRATA_MM, candidate_stage_report, cpm, froc_curve,
                   sensitivity_at, stratum_label)
from .model import MEDSNet, ModelConfig
from .phantom import PhantomSpec, generate_phantom
from .preprocess import PreprocessConfig, preprocess_scan
from .trainer import ScanRecord, TrainConfig, train_model

logger = logging.getLogger(__name__)

_ALL = ("patch", "forward", "backward")
# preset -> (inputs, attention, self-distillation)
PRESETS: dict[str, tuple[tuple[str, ...], bool, bool]] = {
    "single_3d": (("patch",), True, True),
    "single_fwd": (("forward",), True, True),
    "single_bwd": (("backward",), True, True),
    "dual_3d_fwd": (("patch", "forward"), True, True),
    "dual_fwd_bwd": (("forward", "backward"), True, True),
    "multi_plain": (_ALL, False, False),
    "multi_attn": (_ALL, True, False),
    "multi_sd": (_ALL, False, True),
    "meds_full": (_ALL, True, True),
}
NO_DISTILLATION_BASELINE = "multi_attn"


@dataclass(frozen=True)
class Variant:
    name: str
    model_config: ModelConfig
    train_config: TrainConfig

    @property
    def distilled(self) -> bool:
        return self.model_config.num_aux_detectors > 0

    def build_model(self) -> MEDSNet:
        torch.manual_seed(self.train_config.seed)
        return MEDSNet(self.model_config)


def build_variant(preset: str, base_model: ModelConfig = ModelConfig(),
                  base_train: TrainConfig = TrainConfig()) -> Variant:
    """Model and training configuration of one ablation preset.

    Variants without self-distillation drop the auxiliary heads and train on
    the main dice term only (alpha = lambda = 0).
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    inputs, attention, distill = PRESETS[preset]
    k = base_model.num_aux_detectors if distill else 0
    mc = replace(base_model, inputs=inputs, attention=attention, num_aux_detectors=k)
    weights = base_train.loss_weights
    if not distill:
        weights = replace(weights, alpha=0.0, lambda_feat=0.0)
    return Variant(preset, mc, replace(base_train, loss_weights=weights))


# -- per-detector table -------------------------------------------------------

@dataclass
class DetectorRow:
    detector: str
    detected_by_stratum: dict[str, int]
    annotations_by_stratum: dict[str, int]
    detected: int
    n_annotations: int
    false_positives: int
    n_scans: int

    @property
    def sensitivity(self) -> float:
        return self.detected / self.n_annotations if self.n_annotations else 0.0

    @property
    def fp_per_scan(self) -> float:
        return self.false_positives / self.n_scans if self.n_scans else 0.0


def _row(name: str, candidates: list[Candidate], records: Sequence[ScanRecord]) -> DetectorRow:
    ids = [r.volume.scan_id for r in records]
    anns = [a for r in records for a in r.annotations]
    rep = candidate_stage_report(candidates, anns, ids)
    return DetectorRow(name, rep.detected_by_stratum, rep.annotations_by_stratum,
                       rep.detected, rep.n_annotations, rep.false_positives, len(ids))


def detector_candidates(model: MEDSNet, records: Sequence[ScanRecord], bin_threshold: float = 0.5,
                        min_voxels: int = 3) -> dict[str, list[Candidate]]:
    """Candidates of every detector head: ``aux1..auxk`` (shallowest first) and ``main``."""
    k = model.config.num_aux_detectors
    out: dict[str, list[Candidate]] = {f"aux{i + 1}": [] for i in range(k)}
    out["main"] = []
    for rec in records:
        ps = infer_volume(model, rec.volume)
        for i, vol in enumerate(ps.aux):
            out[f"aux{i + 1}"] += extract_candidates(vol, bin_threshold, min_voxels, scan=rec.volume)
        out["main"] += extract_candidates(ps.main, bin_threshold, min_voxels, scan=rec.volume)
    return out


def per_detector_report(model: MEDSNet, records: Sequence[ScanRecord], bin_threshold: float = 0.5,
                        min_voxels: int = 3) -> list[DetectorRow]:
    """One row per auxiliary detector, the main detector, and their union (ensemble)."""
    per = detector_candidates(model, records, bin_threshold, min_voxels)
    rows = [_row(name, cands, records) for name, cands in per.items()]
    union = [c for cands in per.values() for c in cands]
    rows.append(_row("ensemble", union, records))
    return rows


def format_detector_table(rows: Sequence[DetectorRow]) -> str:
    labels = [stratum_label(k) for k in range(len(SIZE_STRATA_MM))]
    head = ["detector", *labels, "detected", "sensitivity", "fps", "fps_per_scan"]
    lines = ["\t".join(head)]
    for r in rows:
        lines.append("\t".join([
            r.detector,
            *(f"{r.detected_by_stratum[s]}/{r.annotations_by_stratum[s]}" for s in labels),
            str(r.detected), f"{r.sensitivity:.4f}", str(r.false_positives), f"{r.fp_per_scan:.3f}",
        ]))
    return "\n".join(lines) + "\n"


# -- false-positive threshold tuning -----------------------------------------

def tune_tau(scored: Sequence[Candidate], records: Sequence[ScanRecord],
             max_sensitivity_loss: float = 0.05, grid: Sequence[float] | None = None) -> float:
    """Largest tau whose sensitivity drop on ``records`` stays within ``max_sensitivity_loss``.

    The drop is absolute (sensitivity points) relative to keeping every
    candidate. With no admissible tau above zero, 0 is returned.
    """
    ids = [r.volume.scan_id for r in records]
    anns = [a for r in records for a in r.annotations]
    base = candidate_stage_report(list(scored), anns, ids).sensitivity
    if grid is None:
        thetas = sorted({c.theta for c in scored})
        # just below each theta so that the candidate itself survives
        grid = [0.0] + [np.nextafter(t, -np.inf) for t in thetas if t > 0]
    best = 0.0
    for tau in sorted(grid):
        kept = [c for c in scored if c.theta > tau]
        if base - candidate_stage_report(kept, anns, ids).sensitivity <= max_sensitivity_loss + 1e-12:
            best = float(tau)
    return best


# -- phantom benchmark --------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkConfig:
    n_phantoms: int = 60
    split: tuple[int, int, int] = (45, 7, 8)
    phantom_seed: int = 1000
    volume_shape: tuple[int, int, int] = (24, 40, 40)
    spacing_mm: tuple[float, float, float] = (1.25, 1.0, 1.0)
    n_nodules: int = 3
    nodule_diameter_range_mm: tuple[float, float] = (5.0, 9.0)
    n_vessels: int = 6
    vessel_radius_range_mm: tuple[float, float] = (1.0, 2.0)
    preprocess: PreprocessConfig = PreprocessConfig(closing_radius=1, dilation_radius=2, crop_size=32)
    model: ModelConfig = ModelConfig(base_width=4, encoder_depth=5, num_aux_detectors=4, input_size=32,
                                     patch_depth=5, dense_growth=2, dense_width=4, head_width=4)
    train: TrainConfig = TrainConfig(batch_size=8, learning_rate=3e-3, max_epochs=30, patience=10,
                                     max_positives_per_scan=6)
    seeds: tuple[int, ...] = (0, 1, 2)
    presets: tuple[str, ...] = ("meds_full", "single_3d", NO_DISTILLATION_BASELINE)
    max_sensitivity_loss: float = 0.05

    def __post_init__(self):
        if sum(self.split) != self.n_phantoms:
            raise ValueError(f"split {self.split} does not add up to {self.n_phantoms}")

    def phantom_spec(self, i: int) -> PhantomSpec:
        return PhantomSpec(seed=self.phantom_seed + i, volume_shape=self.volume_shape,
                           spacing_mm=self.spacing_mm, n_nodules=self.n_nodules,
                           nodule_diameter_range_mm=self.nodule_diameter_range_mm,
                           n_vessels=self.n_vessels, vessel_radius_range_mm=self.vessel_radius_range_mm)


def build_phantom_dataset(cfg: BenchmarkConfig) -> tuple[list[ScanRecord], list[ScanRecord], list[ScanRecord]]:
    recs = []
    for i in range(cfg.n_phantoms):
        vol, anns = generate_phantom(cfg.phantom_spec(i))
        recs.append(ScanRecord(preprocess_scan(vol, cfg.preprocess).volume, anns))
    a, b, _ = cfg.split
    return recs[:a], recs[a:a + b], recs[a + b:]


@dataclass
class RunResult:
    preset: str
    seed: int
    epochs_run: int
    best_epoch: int
    final_val_total: float
    final_val_main_dice: float
    best_val_total: float
    pre_sensitivity: float
    pre_fp_per_scan: float
    sensitivity_at_8: float
    froc_sensitivities: tuple[float, ...]
    cpm: float
    tau: float | None = None
    post_sensitivity: float | None = None
    post_fp_per_scan: float | None = None
    detector_sensitivity: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def fp_cut(self) -> float | None:
        if self.post_fp_per_scan is None or self.pre_fp_per_scan == 0:
            return None
        return 1.0 - self.post_fp_per_scan / self.pre_fp_per_scan

    @property
    def sensitivity_loss(self) -> float | None:
        return None if self.post_sensitivity is None else self.pre_sensitivity - self.post_sensitivity


def _score_records(model: MEDSNet, records: Sequence[ScanRecord], tau: float = 0.0):
    """Main-detector candidates (scored with theta when aux heads exist) plus per-head candidates."""
    scored: list[Candidate] = []
    per: dict[str, list[Candidate]] = {}
    for rec in records:
        ps = infer_volume(model, rec.volume)
        cands = extract_candidates(ps.main, scan=rec.volume)
        scored += score_candidates(cands, ps, tau) if ps.k else cands
        for i, vol in enumerate(ps.aux):
            per.setdefault(f"aux{i + 1}", []).extend(extract_candidates(vol, scan=rec.volume))
        per.setdefault("main", []).extend(cands)
    return scored, per


def run_variant(preset: str, seed: int, cfg: BenchmarkConfig, data=None, out_dir=None) -> RunResult:
    t0 = time.time()
    torch.set_num_threads(1)
    train, val, test = data if data is not None else build_phantom_dataset(cfg)
    variant = build_variant(preset, cfg.model, replace(cfg.train, seed=seed))
    res = train_model(train, val, variant.model_config, variant.train_config,
                      out_dir=None if out_dir is None else Path(out_dir) / f"{preset}-seed{seed}",
                      model=variant.build_model())
    model = res.model
    ids = [r.volume.scan_id for r in test]
    anns = [a for r in test for a in r.annotations]

    test_scored, per = _score_records(model, test)
    main_scored = [replace(c, theta=None, is_tp=None) for c in test_scored]
    pre = candidate_stage_report(main_scored, anns, ids)
    curve = froc_curve(main_scored, anns, ids)
    report = cpm(curve)
    out = RunResult(
        preset, seed, res.epochs_run, res.best_epoch,
        res.history[-1]["val_total"], res.history[-1]["val_main_dice"], res.best_val,
        pre.sensitivity, pre.false_positives / len(ids), sensitivity_at(curve, 8.0),
        report.sensitivities, report.cpm,
        detector_sensitivity={k: candidate_stage_report(v, anns, ids).sensitivity for k, v in per.items()},
    )
    if variant.distilled:
        val_scored, _ = _score_records(model, val)
        tau = tune_tau(val_scored, val, cfg.max_sensitivity_loss)
        post = candidate_stage_report([c for c in test_scored if c.theta > tau], anns, ids)
        out.tau, out.post_sensitivity = tau, post.sensitivity
        out.post_fp_per_scan = post.false_positives / len(ids)
    out.seconds = time.time() - t0
    logger.info("%s seed %d: cpm %.3f sens@8 %.3f (%.0f s)", preset, seed, out.cpm,
                out.sensitivity_at_8, out.seconds)
    return out


def _run_job(args):
    preset, seed, cfg = args
    return run_variant(preset, seed, cfg)


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), jobs: int = 1, out_dir=None) -> list[RunResult]:
    """Train and evaluate every (preset, seed) pair; ``jobs > 1`` uses separate processes."""
    pairs = [(p, s) for s in cfg.seeds for p in cfg.presets]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_job, [(p, s, cfg) for p, s in pairs]))
    else:
        data = build_phantom_dataset(cfg)
        results = [run_variant(p, s, cfg, data, out_dir) for p, s in pairs]
    if out_dir is not None:
        write_results(results, Path(out_dir) / "ablation.json")
    return results


def median_by_preset(results: Sequence[RunResult], attr: str) -> dict[str, float]:
    vals: dict[str, list[float]] = {}
    for r in results:
        v = getattr(r, attr)
        if v is not None:
            vals.setdefault(r.preset, []).append(float(v))
    return {k: float(np.median(v)) for k, v in vals.items()}


def median_froc(results: Sequence[RunResult], preset: str) -> np.ndarray:
    rows = [r.froc_sensitivities for r in results if r.preset == preset]
    return np.median(np.asarray(rows, dtype=float), axis=0)


def format_report(results: Sequence[RunResult]) -> str:
    """Tab-separated table, one row per preset (medians over seeds)."""
    head = ["preset", *(f"fp{p:g}" for p in CPM_OPERATING_POINTS), "cpm", "sens_pre", "fps_pre",
            "tau", "sens_post", "fps_post", "val_total", "val_main_dice"]
    lines = ["\t".join(head)]
    med = {a: median_by_preset(results, a) for a in
           ("cpm", "pre_sensitivity", "pre_fp_per_scan", "tau", "post_sensitivity",
            "post_fp_per_scan", "final_val_total", "final_val_main_dice")}

    def fmt(v):
        return "-" if v is None else f"{v:.4f}"

    for preset in dict.fromkeys(r.preset for r in results):
        froc = median_froc(results, preset)
        lines.append("\t".join([preset, *(f"{s:.4f}" for s in froc),
                                *(fmt(med[a].get(preset)) for a in med)]))
    return "\n".join(lines) + "\n"


def write_results(results: Sequence[RunResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([asdict(r) for r in results], indent=2))
    return path


def read_results(path) -> list[RunResult]:
    rows = json.loads(Path(path).read_text())
    return [RunResult(**{**r, "froc_sensitivities": tuple(r["froc_sensitivities"])}) for r in rows]


def main(argv=None) -> int:
    """``python -m medsnet.ablation``: run the phantom benchmark and print the median table."""
    import argparse
    ap = argparse.ArgumentParser(prog="python -m medsnet.ablation", description=main.__doc__)
    ap.add_argument("--out", type=Path, required=True, help="directory for run logs and ablation.json")
    ap.add_argument("--presets", nargs="+", default=list(BenchmarkConfig.presets))
    ap.add_argument("--seeds", nargs="+", type=int, default=list(BenchmarkConfig.seeds))
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = BenchmarkConfig(presets=tuple(args.presets), seeds=tuple(args.seeds))
    results = run_benchmark(cfg, jobs=args.jobs, out_dir=args.out)
    text = format_report(results)
    (args.out / "report.tsv").write_text(text)
    print(text, end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
