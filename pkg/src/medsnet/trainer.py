"""Fold planning, patch sampling and the optimisation loop with early stopping."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch

from .losses import LossWeights, dice_loss, total_loss
from .mip import SLAB_THICKNESSES_MM, MIPStack, mip_stack_volume
from .model import MEDSNet, ModelConfig, save_checkpoint
from .phantom import rasterize_sphere
from .volume import Annotation, NormalizedVolume

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_loss1", "train_loss2", "train_loss3", "train_total",
                   "val_total", "val_main_dice")
STEP_COLUMNS = ("epoch", "step", "loss1", "loss2", "loss3", "total")


class TrainingDivergedError(RuntimeError):
    pass


# -- folds --------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def make_folds(scan_ids: Sequence[str], k: int = 8, seed: int = 0) -> list[FoldPlan]:
    """Shuffle once, cut into ``k`` subsets; fold f tests on subsets f, f+1, validates on f+2."""
    ids = list(scan_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("scan ids must be unique")
    if k < 4:
        raise ValueError("k must be >= 4 (two test subsets, one validation, one training)")
    if len(ids) < k:
        raise ValueError(f"need at least {k} scans for {k}-fold splitting, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    subsets = [[ids[i] for i in part] for part in np.array_split(order, k)]
    plans = []
    for f in range(k):
        test_sets = {f % k, (f + 1) % k}
        val_set = (f + 2) % k
        plans.append(FoldPlan(
            fold_index=f,
            train_ids=tuple(i for s in range(k) if s not in test_sets | {val_set} for i in subsets[s]),
            val_ids=tuple(subsets[val_set]),
            test_ids=tuple(i for s in sorted(test_sets) for i in subsets[s]),
        ))
    return plans


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    pos_neg_ratio: float = 1.0
    empty_scan_negatives: int = 4
    # caps the positives drawn per scan and epoch; None keeps all
    max_positives_per_scan: int | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.pos_neg_ratio <= 0:
            raise ValueError("pos_neg_ratio must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


# -- sampling -----------------------------------------------------------------

@dataclass
class PatchSample:
    scan_id: str
    center_index: int
    patch: np.ndarray       # (D, H, W)
    mips: MIPStack
    mask: np.ndarray        # (H, W) float32 in {0, 1}


def nodule_mask_volume(volume: NormalizedVolume, annotations: Sequence[Annotation]) -> np.ndarray:
    """Union of rasterized annotation spheres; raises if a centre lies outside the volume."""
    mask = np.zeros(volume.shape, dtype=bool)
    for a in annotations:
        idx = volume.world_to_voxel(a.center_zyx_mm)
        if np.any(idx < -0.5) or np.any(idx > np.asarray(volume.shape) - 0.5):
            raise ValueError(
                f"annotation outside volume {volume.scan_id}: centre (x={a.center_x_mm:.1f}, "
                f"y={a.center_y_mm:.1f}, z={a.center_z_mm:.1f}) mm, diameter {a.diameter_mm:.1f} mm"
            )
        mask |= rasterize_sphere(volume.shape, volume.spacing_mm, a.center_zyx_mm,
                                 a.diameter_mm, volume.origin_mm)
    return mask


def reflect_indices(centers: np.ndarray, depth: int, n_slices: int) -> np.ndarray:
    """Slice indices of depth-``depth`` patches around ``centers`` with reflect padding."""
    half = depth // 2
    idx = np.asarray(centers)[:, None] + np.arange(-half, depth - half)[None, :]
    if n_slices == 1:
        return np.zeros_like(idx)
    period = 2 * (n_slices - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n_slices, period - idx, idx)


class ScanBank:
    """Per-scan cache of MIP volumes and the nodule mask used to cut training samples."""

    def __init__(self, volume: NormalizedVolume, annotations: Sequence[Annotation],
                 patch_depth: int = 11, thicknesses=SLAB_THICKNESSES_MM):
        self.volume = volume
        self.annotations = list(annotations)
        self.patch_depth = patch_depth
        self.thicknesses = tuple(thicknesses)
        self.mask = nodule_mask_volume(volume, annotations)
        self.forward, self.backward = mip_stack_volume(volume, self.thicknesses)

    @property
    def n_slices(self) -> int:
        return self.volume.shape[0]

    def positive_centers(self) -> np.ndarray:
        return np.flatnonzero(self.mask.any(axis=(1, 2)))

    def negative_pool(self) -> np.ndarray:
        has_lung = (self.volume.voxels > 0).any(axis=(1, 2))
        return np.flatnonzero(has_lung & ~self.mask.any(axis=(1, 2)))

    def arrays(self, centers) -> dict[str, np.ndarray]:
        centers = np.asarray(centers, dtype=int)
        idx = reflect_indices(centers, self.patch_depth, self.n_slices)
        return {
            "patch": self.volume.voxels[idx],
            "forward": self.forward[centers],
            "backward": self.backward[centers],
            "mask": self.mask[centers].astype(np.float32),
        }

    def sample(self, center: int) -> PatchSample:
        a = self.arrays([center])
        return PatchSample(self.volume.scan_id, int(center), a["patch"][0],
                           MIPStack(int(center), a["forward"][0], a["backward"][0], self.thicknesses),
                           a["mask"][0])


def choose_centers(bank: ScanBank, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    pos = bank.positive_centers()
    if config.max_positives_per_scan is not None and len(pos) > config.max_positives_per_scan:
        pos = np.sort(rng.choice(pos, config.max_positives_per_scan, replace=False))
    pool = bank.negative_pool()
    n_neg = int(round(len(pos) / config.pos_neg_ratio)) if len(pos) else config.empty_scan_negatives
    n_neg = min(n_neg, len(pool))
    neg = np.sort(rng.choice(pool, n_neg, replace=False)) if n_neg else np.empty(0, dtype=int)
    return np.concatenate([pos, neg]).astype(int)


def sample_patches(scan: NormalizedVolume, annotations: Sequence[Annotation],
                   config: TrainConfig = TrainConfig(), patch_depth: int = 11,
                   rng: np.random.Generator | None = None) -> Iterator[PatchSample]:
    """Yield positive samples (slices cut by a nodule) followed by negatives."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    bank = ScanBank(scan, annotations, patch_depth)
    for c in choose_centers(bank, config, rng):
        yield bank.sample(c)


# -- optimisation -------------------------------------------------------------

class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def step(self, value: float) -> bool:
        """Record one epoch's validation value; True means stop now."""
        self.epoch += 1
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, self.epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class ScanRecord:
    volume: NormalizedVolume
    annotations: list[Annotation]


@dataclass
class TrainResult:
    model: MEDSNet
    history: list[dict]
    best_epoch: int
    best_val: float
    checkpoint_path: Path | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def _to_batch(arrays: dict[str, np.ndarray], sel) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.ascontiguousarray(v[sel])) for k, v in arrays.items()}


def _concat(parts: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _forward(model: MEDSNet, batch):
    return model(batch["patch"], batch["forward"], batch["backward"])


def evaluate_loss(model: MEDSNet, arrays, weights: LossWeights, batch_size: int) -> dict[str, float]:
    """Sample-weighted mean validation losses in inference mode."""
    model.eval()
    n = len(arrays["mask"])
    sums = {"total": 0.0, "main_dice": 0.0}
    with torch.no_grad():
        for start in range(0, n, batch_size):
            sel = slice(start, start + batch_size)
            batch = _to_batch(arrays, sel)
            out = _forward(model, batch)
            m = len(batch["mask"])
            sums["total"] += float(total_loss(out, batch["mask"], weights).total) * m
            sums["main_dice"] += float(dice_loss(out.main_prob, batch["mask"], weights.dice_epsilon)) * m
    return {k: v / max(n, 1) for k, v in sums.items()}


def train_model(train: Sequence[ScanRecord], val: Sequence[ScanRecord],
                model_config: ModelConfig, config: TrainConfig = TrainConfig(),
                out_dir=None, model: MEDSNet | None = None) -> TrainResult:
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = model if model is not None else MEDSNet(model_config)
    depth = model_config.patch_depth
    train_banks = [ScanBank(r.volume, r.annotations, depth) for r in train]
    val_banks = [ScanBank(r.volume, r.annotations, depth) for r in val]
    val_rng = np.random.default_rng(config.seed + 1)
    val_parts = [b.arrays(choose_centers(b, config, val_rng)) for b in val_banks]
    val_parts = [p for p in val_parts if len(p["mask"])]
    val_arrays = _concat(val_parts) if val_parts else None

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2))
    weights = config.loss_weights
    stopper = EarlyStopping(config.patience)
    best_state = copy.deepcopy(model.state_dict())
    history, steps = [], []
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(1, config.max_epochs + 1):
        parts = [b.arrays(choose_centers(b, config, rng)) for b in train_banks]
        parts = [p for p in parts if len(p["mask"])]
        if not parts:
            raise ValueError("no training samples could be drawn")
        arrays = _concat(parts)
        order = rng.permutation(len(arrays["mask"]))
        model.train()
        sums = np.zeros(4)
        count = 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            sel = order[start: start + config.batch_size]
            if len(sel) < 2 and len(order) > 1:
                continue  # batch-norm needs more than one sample
            batch = _to_batch(arrays, sel)
            out = _forward(model, batch)
            parts_loss = total_loss(out, batch["mask"], weights)
            if not torch.isfinite(parts_loss.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}: {parts_loss.as_floats()}"
                )
            optimizer.zero_grad()
            parts_loss.total.backward()
            optimizer.step()
            f = parts_loss.as_floats()
            steps.append({"epoch": epoch, "step": step, **f})
            sums += np.array([f["loss1"], f["loss2"], f["loss3"], f["total"]]) * len(sel)
            count += len(sel)
        train_means = sums / max(count, 1)
        if val_arrays is not None:
            val = evaluate_loss(model, val_arrays, weights, config.batch_size)
        else:
            val = {"total": float(train_means[3]), "main_dice": math.nan}
        if not math.isfinite(val["total"]):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        row = {
            "epoch": epoch,
            "train_loss1": float(train_means[0]), "train_loss2": float(train_means[1]),
            "train_loss3": float(train_means[2]), "train_total": float(train_means[3]),
            "val_total": val["total"], "val_main_dice": val["main_dice"],
        }
        history.append(row)
        logger.info("epoch %d train %.4f val %.4f", epoch, row["train_total"], row["val_total"])
        stop = stopper.step(val["total"])
        if stopper.best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
        if out_dir is not None:
            write_metrics(history, out_dir / "metrics.csv")
            write_metrics(steps, out_dir / "steps.csv", STEP_COLUMNS)
        if stop:
            break

    model.load_state_dict(best_state)
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "checkpoint.pt"
        save_checkpoint(model, ckpt, extra={"train_config": config.to_dict(),
                                            "best_epoch": stopper.best_epoch,
                                            "best_val": stopper.best})
    return TrainResult(model, history, stopper.best_epoch, stopper.best, ckpt)


def train_fold(fold: FoldPlan, dataset: Mapping[str, ScanRecord], model_config: ModelConfig,
               config: TrainConfig = TrainConfig(), out_dir=None) -> TrainResult:
    missing = [i for i in (*fold.train_ids, *fold.val_ids) if i not in dataset]
    if missing:
        raise KeyError(f"scans missing from dataset: {missing}")
    return train_model([dataset[i] for i in fold.train_ids], [dataset[i] for i in fold.val_ids],
                       model_config, config, out_dir)


def write_metrics(history: list[dict], path, columns=METRICS_COLUMNS) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
