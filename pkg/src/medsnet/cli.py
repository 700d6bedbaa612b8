"""Command-line entry point: ``medsnet <subcommand> ...``.

Every subcommand reads explicit input paths, writes into an output
directory (or file) and leaves a ``manifest.json`` beside its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import ablation
from .candidates import (extract_candidates, infer_volume, read_candidates, score_candidates,
                         write_candidates)
from .froc import CPM_OPERATING_POINTS, FROCCurve, candidate_stage_report, cpm, froc_curve
from .mip import SLAB_THICKNESSES_MM, mip_stack_volume
from .model import CheckpointError, ModelConfig, load_checkpoint
from .phantom import PhantomError, PhantomSpec, generate_phantom
from .preprocess import LungSegmentationError, PreprocessConfig, normalized_from_hu, preprocess_scan
from .trainer import ScanRecord, TrainConfig, TrainingDivergedError, make_folds, train_fold
from .volume import (AnnotationFormatError, VolumeFormatError, group_by_scan, load_annotations,
                     read_volume, write_annotations, write_volume)

logger = logging.getLogger("medsnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class CandidateConfig:
    bin_threshold: float = 0.5
    min_voxels: int = 3
    connectivity: int = 26
    tau: float = 0.3


_SECTIONS = {
    "phantom": PhantomSpec,
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "candidates": CandidateConfig,
}


def default_config() -> dict:
    return {
        "phantom": PhantomSpec().to_dict(),
        "preprocess": asdict(PreprocessConfig()),
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "candidates": asdict(CandidateConfig()),
    }


def _build(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} key(s): {', '.join(sorted(unknown))}")
    try:
        if cls is TrainConfig:
            return TrainConfig.from_dict(values)
        if cls is ModelConfig:
            return ModelConfig.from_dict(values)
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def load_config(path: str | None) -> dict:
    """Merge a JSON config file over the defaults and validate every section."""
    cfg = default_config()
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise UsageError(f"{p}: top level must be an object")
        unknown = set(user) - set(_SECTIONS)
        if unknown:
            raise UsageError(f"{p}: unknown section(s) {', '.join(sorted(unknown))}")
        for name, values in user.items():
            if not isinstance(values, dict):
                raise UsageError(f"{p}: section {name!r} must be an object")
            cfg[name] = {**cfg[name], **values}
    for name in _SECTIONS:
        section(cfg, name)
    return cfg


def section(cfg: dict, name: str):
    return _build(_SECTIONS[name], cfg[name])


# -- helpers ------------------------------------------------------------------

def _versions() -> dict:
    out = {}
    for pkg in ("artifact", "numpy", "scipy", "torch"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(out_dir: Path, args, inputs, outputs, seed=None) -> Path:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": args.config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "versions": _versions(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _pmap(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as ex:
        return list(ex.map(fn, items))


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def _volume_paths(paths) -> list[Path]:
    """Expand directories to the volume sidecars they contain."""
    out = []
    for p in map(_require, paths):
        if p.is_dir():
            out += sorted(q for q in p.glob("*.json") if q.with_suffix(".raw").exists())
        else:
            out.append(p)
    if not out:
        raise FileNotFoundError(f"no volumes found in {', '.join(map(str, paths))}")
    return out


def _override(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return replace(obj, **changes) if changes else obj


# -- subcommands --------------------------------------------------------------

def cmd_phantom(args, cfg) -> int:
    spec = section(cfg, "phantom")
    if args.spec:
        spec = _build(PhantomSpec, {**spec.to_dict(), **json.loads(_require(args.spec).read_text())})
    spec = _override(spec, seed=args.seed)
    out = Path(args.out)
    outputs = []
    for i in range(args.count):
        s = replace(spec, seed=spec.seed + i, scan_id="") if args.count > 1 else spec
        vol, anns = generate_phantom(s)
        outputs += list(write_volume(vol, out / vol.scan_id))
        outputs.append(write_annotations(anns, out / f"{vol.scan_id}_annotations.csv"))
        logger.info("phantom %s: %d nodules", vol.scan_id, len(anns))
    write_manifest(out, args, [args.spec] if args.spec else [], outputs, spec.seed)
    return EXIT_OK


def cmd_preprocess(args, cfg) -> int:
    pc = _override(section(cfg, "preprocess"), crop_size=args.crop_size)
    out = Path(args.out)
    paths = _volume_paths(args.inputs)

    def one(path):
        scan = preprocess_scan(read_volume(path), pc)
        written = list(write_volume(scan.hu, out / scan.volume.scan_id))
        np.save(out / f"{scan.volume.scan_id}_lung_mask.npy", scan.lung_mask)
        return written

    outputs = [p for w in _pmap(one, paths, args.jobs) for p in w]
    write_manifest(out, args, paths, outputs)
    return EXIT_OK


def cmd_mip(args, cfg) -> int:
    pc = section(cfg, "preprocess")
    out = Path(args.out)
    paths = _volume_paths(args.inputs)

    def one(path):
        vol = normalized_from_hu(read_volume(path), pc)
        fwd, bwd = mip_stack_volume(vol)
        sid = vol.scan_id
        np.save(out / f"{sid}_forward.npy", fwd)
        np.save(out / f"{sid}_backward.npy", bwd)
        written = [out / f"{sid}_forward.npy", out / f"{sid}_backward.npy"]
        if args.png:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
            c = vol.shape[0] // 2 if args.center is None else args.center
            for name, stack in (("forward", fwd), ("backward", bwd)):
                for t, img in zip(SLAB_THICKNESSES_MM, stack[c]):
                    p = out / f"{sid}_{name}_{t}mm_z{c:03d}.png"
                    plt.imsave(p, img, cmap="gray", vmin=0.0, vmax=1.0)
                    written.append(p)
        return sid, written

    out.mkdir(parents=True, exist_ok=True)
    results = _pmap(one, paths, args.jobs)
    index = {
        "thicknesses_mm": list(SLAB_THICKNESSES_MM),
        "layout": "(slice, thickness, y, x)",
        "scans": {sid: [p.name for p in w] for sid, w in results},
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    write_manifest(out, args, paths, [p for _, w in results for p in w] + [out / "index.json"])
    return EXIT_OK


def _load_dataset(data_paths, annotation_paths, pc: PreprocessConfig) -> dict[str, ScanRecord]:
    anns = []
    for p in annotation_paths:
        p = _require(p)
        for q in (sorted(p.glob("*.csv")) if p.is_dir() else [p]):
            anns += load_annotations(q)
    by_scan = group_by_scan(anns)
    records = {}
    for path in _volume_paths(data_paths):
        vol = normalized_from_hu(read_volume(path), pc)
        records[vol.scan_id] = ScanRecord(vol, by_scan.get(vol.scan_id, []))
    return records


def cmd_train(args, cfg) -> int:
    mc = section(cfg, "model")
    if args.preset:
        tc0 = section(cfg, "train")
        variant = ablation.build_variant(args.preset, mc, tc0)
        mc, tc = variant.model_config, variant.train_config
    else:
        tc = section(cfg, "train")
    tc = _override(tc, max_epochs=args.max_epochs, seed=args.seed)
    records = _load_dataset(args.data, args.annotations, section(cfg, "preprocess"))
    folds = make_folds(sorted(records), k=args.folds, seed=tc.seed)
    if not 0 <= args.fold < len(folds):
        raise UsageError(f"--fold must lie in [0, {len(folds) - 1}]")
    fold = folds[args.fold]
    out = Path(args.out)
    res = train_fold(fold, records, mc, tc, out)
    (out / "fold.json").write_text(json.dumps(asdict(fold), indent=2) + "\n")
    (out / "config.json").write_text(json.dumps(
        {**cfg, "model": mc.to_dict(), "train": tc.to_dict()}, indent=2, sort_keys=True) + "\n")
    logger.info("trained %d epochs, best epoch %d", res.epochs_run, res.best_epoch)
    write_manifest(out, args, [*args.data, *args.annotations],
                   [res.checkpoint_path, out / "metrics.csv", out / "fold.json", out / "config.json"],
                   tc.seed)
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    cc = _override(section(cfg, "candidates"), tau=args.tau, bin_threshold=args.bin_threshold)
    pc = section(cfg, "preprocess")
    model, _ = load_checkpoint(_require(args.checkpoint))
    paths = _volume_paths(args.inputs)

    def one(path):
        vol = normalized_from_hu(read_volume(path), pc)
        ps = infer_volume(model, vol)
        cands = extract_candidates(ps.main, cc.bin_threshold, cc.min_voxels, cc.connectivity, scan=vol)
        if ps.k:
            cands = score_candidates(cands, ps, cc.tau)
        if args.save_probabilities:
            np.savez_compressed(Path(args.out).parent / f"{vol.scan_id}_probabilities.npz",
                                main=ps.main, aux=np.stack(ps.aux) if ps.k else np.empty(0))
        return cands

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    cands = [c for part in _pmap(one, paths, args.jobs) for c in part]
    write_candidates(cands, args.out)
    logger.info("%d candidates from %d scans", len(cands), len(paths))
    write_manifest(Path(args.out).parent, args, [args.checkpoint, *paths], [args.out])
    return EXIT_OK


def _read_curve(path) -> FROCCurve:
    """A two-column ``fp_per_scan,sensitivity`` table."""
    with _require(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"fp_per_scan", "sensitivity"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns fp_per_scan,sensitivity")
        pts = []
        for lineno, row in enumerate(reader, start=2):
            try:
                pts.append((float(row["fp_per_scan"]), float(row["sensitivity"])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return FROCCurve.from_points(pts)


def _write_curve(curve: FROCCurve, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fp_per_scan", "sensitivity", "threshold"])
        for f, s, t in zip(curve.fp_per_scan, curve.sensitivity, curve.thresholds):
            w.writerow([f"{f:.6f}", f"{s:.6f}", "" if np.isnan(t) else f"{t:.8f}"])
    return path


def cmd_evaluate(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    if args.curve:
        curve = _read_curve(args.curve)
        inputs = [args.curve]
    else:
        if not (args.candidates and args.annotations and (args.scans or args.data)):
            raise UsageError("evaluate needs --curve, or --candidates with --annotations and --scans/--data")
        cands = read_candidates(_require(args.candidates))
        if args.survivors_only:
            cands = [c for c in cands if c.is_tp]
        anns = []
        for p in args.annotations:
            anns += load_annotations(_require(p))
        if args.scans:
            ids = [s.strip() for s in _require(args.scans).read_text().split() if s.strip()]
        else:
            ids = [json.loads(p.read_text())["scan_id"] for p in _volume_paths(args.data)]
        curve = froc_curve(cands, anns, ids)
        stage = candidate_stage_report(cands, anns, ids)
        lines += [f"scans\t{len(set(ids))}", f"annotations\t{stage.n_annotations}",
                  f"candidates\t{stage.total_candidates}",
                  f"candidates_per_scan\t{stage.candidates_per_scan:.2f}",
                  f"candidate_sensitivity\t{stage.sensitivity:.4f}"]
        inputs = [args.candidates, *args.annotations]
    report = cpm(curve, interpolate=args.interpolate)
    for p, s in zip(report.operating_points, report.sensitivities):
        lines.append(f"sensitivity@{p:g}\t{s:.4f}")
    lines.append(f"cpm\t{report.cpm:.4f}")
    text = "\n".join(lines) + "\n"
    (out / "report.tsv").write_text(text)
    _write_curve(curve, out / "froc.csv")
    sys.stdout.write(text)
    write_manifest(out, args, inputs, [out / "report.tsv", out / "froc.csv"])
    return EXIT_OK


def cmd_plot_froc(args, cfg) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = args.labels or [Path(p).parent.name or Path(p).stem for p in args.curves]
    if len(labels) != len(args.curves):
        raise UsageError("--labels must match the number of curves")
    plt.rcParams["svg.hashsalt"] = "froc"
    fig, ax = plt.subplots(figsize=(5, 4))
    for path, label in zip(args.curves, labels):
        curve = _read_curve(path)
        xs = np.concatenate([[curve.fp_per_scan[0]], curve.fp_per_scan]) if len(curve.fp_per_scan) else []
        ys = np.concatenate([[0.0], curve.sensitivity]) if len(curve.sensitivity) else []
        ax.step(xs, ys, where="post", label=f"{label} (CPM {cpm(curve).cpm:.3f})")
    ax.set_xscale("log", base=2)
    ax.set_xlim(CPM_OPERATING_POINTS[0] / 2, CPM_OPERATING_POINTS[-1] * 2)
    ax.set_ylim(0, 1.0)
    ax.set_xlabel("false positives per scan")
    ax.set_ylabel("sensitivity")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    write_manifest(out.parent, args, args.curves, [out])
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: %s)" % ", ".join(_SECTIONS))
    common.add_argument("--jobs", type=int, default=1, help="scan-level parallelism")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="medsnet", description="Lung nodule detection pipeline.")
    parser.add_argument("--show-config", action="store_true", help="print the default configuration")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("phantom", parents=[common], help="generate synthetic phantoms")
    p.add_argument("--spec", help="JSON phantom spec (overrides the config section)")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", parents=[common], help="resample, mask and crop volumes")
    p.add_argument("inputs", nargs="+", help="volume sidecars or directories")
    p.add_argument("--crop-size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("mip", parents=[common], help="bidirectional MIP stacks of preprocessed volumes")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--png", action="store_true", help="also write PNGs of one central slice")
    p.add_argument("--center", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mip)

    p = sub.add_parser("train", parents=[common], help="train one fold")
    p.add_argument("--data", nargs="+", required=True, help="preprocessed volumes or directories")
    p.add_argument("--annotations", nargs="+", required=True, help="annotation files or directories")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--folds", type=int, default=8)
    p.add_argument("--preset", choices=sorted(ablation.PRESETS))
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="candidates and FP reduction for scans")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--bin-threshold", type=float)
    p.add_argument("--save-probabilities", action="store_true")
    p.add_argument("--out", required=True, help="candidate CSV to write")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="FROC and CPM")
    p.add_argument("--curve", help="fp_per_scan,sensitivity table to score directly")
    p.add_argument("--candidates")
    p.add_argument("--annotations", nargs="+")
    p.add_argument("--scans", help="whitespace-separated scan id list")
    p.add_argument("--data", nargs="+", help="volumes whose ids define the scan set")
    p.add_argument("--survivors-only", action="store_true")
    p.add_argument("--interpolate", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-froc", parents=[common], help="SVG plot of FROC curves")
    p.add_argument("curves", nargs="+", help="froc.csv files written by evaluate")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_froc)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.show_config:
        sys.stdout.write(json.dumps(default_config(), indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"medsnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, VolumeFormatError, AnnotationFormatError, LungSegmentationError,
            PhantomError, CheckpointError, ValueError, KeyError, OSError) as exc:
        print(f"medsnet: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
