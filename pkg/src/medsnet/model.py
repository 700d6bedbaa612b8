"""Multi-encoder self-distilled segmentation network.

Layout follows the detection network: a 3D dense block squeezes an
``(D, H, W)`` CT patch into three channels, up to three identical 2D
encoders consume that latent and the forward/backward MIP triples, an
attention-gated decoder rebuilds full resolution, and one main plus ``k``
auxiliary detector heads emit per-pixel nodule probabilities.
"""
from __future__ import annotations

import io
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

INPUT_NAMES = ("patch", "forward", "backward")
CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 8
    encoder_depth: int = 6
    num_aux_detectors: int = 4
    input_size: int = 256
    patch_depth: int = 11
    inputs: tuple[str, ...] = INPUT_NAMES
    attention: bool = True
    dense_growth: int = 4
    dense_width: int = 8
    head_width: int = 8
    # Keras-style: running = momentum * running + (1 - momentum) * batch
    bn_momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if self.encoder_depth < 2:
            raise ValueError("encoder_depth must be >= 2")
        if self.num_aux_detectors < 0:
            raise ValueError("num_aux_detectors must be >= 0")
        if self.num_aux_detectors > self.encoder_depth - 1:
            raise ValueError(
                f"num_aux_detectors={self.num_aux_detectors} needs at least "
                f"{self.num_aux_detectors + 1} decoder levels"
            )
        if self.input_size % (2 ** self.encoder_depth):
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2**encoder_depth "
                f"= {2 ** self.encoder_depth}"
            )
        if not self.inputs or len(set(self.inputs)) != len(self.inputs):
            raise ValueError(f"inputs must be a non-empty set of {INPUT_NAMES}")
        unknown = set(self.inputs) - set(INPUT_NAMES)
        if unknown:
            raise ValueError(f"unknown encoder inputs: {sorted(unknown)}")
        depth = self.patch_depth
        if depth < 1:
            raise ValueError("patch_depth must be >= 1")
        for _ in range(4):
            depth = -(-depth // 2)
        if depth != 1:
            raise ValueError(
                f"patch_depth {self.patch_depth} does not pool to depth 1 in four steps"
            )

    @property
    def encoder_widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.encoder_depth)]

    @property
    def uses_patch(self) -> bool:
        return "patch" in self.inputs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = list(self.inputs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _bn2d(ch: int, cfg: ModelConfig) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(ch, momentum=1.0 - cfg.bn_momentum)


def _bn3d(ch: int, cfg: ModelConfig) -> nn.BatchNorm3d:
    return nn.BatchNorm3d(ch, momentum=1.0 - cfg.bn_momentum)


def depth_pool(x: torch.Tensor) -> torch.Tensor:
    """Ceil-mode max pooling of size 2 along depth only; depth 1 passes through."""
    if x.shape[2] == 1:
        return x
    return F.max_pool3d(x, kernel_size=(2, 1, 1), stride=(2, 1, 1), ceil_mode=True)


class DenseUnit(nn.Module):
    """Five densely connected (conv3d -> ReLU -> BN) sets plus a 1x1x1 transition."""

    def __init__(self, in_ch: int, out_ch: int, cfg: ModelConfig, n_sets: int = 5):
        super().__init__()
        g = cfg.dense_growth
        self.sets = nn.ModuleList()
        for i in range(n_sets):
            self.sets.append(nn.Sequential(
                nn.Conv3d(in_ch + i * g, g, kernel_size=3, padding=1),
                nn.ReLU(),
                _bn3d(g, cfg),
            ))
        self.transition = nn.Conv3d(n_sets * g, out_ch, kernel_size=1)

    def forward(self, x):
        feats = [x]
        outs = []
        for layer in self.sets:
            y = layer(torch.cat(feats, dim=1))
            feats.append(y)
            outs.append(y)
        return self.transition(torch.cat(outs, dim=1))


class DenseBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_depth = cfg.patch_depth
        w = cfg.dense_width
        self.units = nn.ModuleList([
            DenseUnit(1, w, cfg),
            DenseUnit(w, w, cfg),
            DenseUnit(w, w, cfg),
            DenseUnit(w, w, cfg),
            DenseUnit(w, 3, cfg),
        ])
        self.to(memory_format=torch.channels_last_3d)

    def forward(self, patch: torch.Tensor) -> torch.Tensor:
        # patch: (B, D, H, W) -> latent (B, 3, H, W)
        if patch.dim() != 4 or patch.shape[1] != self.patch_depth:
            raise ValueError(
                f"dense block expects (B, {self.patch_depth}, H, W), got {tuple(patch.shape)}"
            )
        # channels-last (weights and activations) is several times faster for conv3d
        # backward on CPU; values are unchanged
        x = patch.unsqueeze(1).contiguous(memory_format=torch.channels_last_3d)
        for unit in self.units[:-1]:
            x = depth_pool(unit(x))
        x = self.units[-1](x)
        return x.squeeze(2).contiguous()


class ConvBlock(nn.Module):
    """Two-stage residual encoder block; returns (pre-pool features, pooled)."""

    def __init__(self, in_ch: int, out_ch: int, cfg: ModelConfig):
        super().__init__()
        self.stage1 = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.ReLU(),
            _bn2d(out_ch, cfg),
        )
        self.proj = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.stage2 = nn.Sequential(
            nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.ReLU(),
            _bn2d(out_ch, cfg),
        )

    def forward(self, x):
        x = self.proj(x) + self.stage1(x)
        x = x + self.stage2(x)
        return x, F.max_pool2d(x, 2)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig, in_ch: int = 3):
        super().__init__()
        widths = cfg.encoder_widths
        self.blocks = nn.ModuleList()
        prev = in_ch
        for w in widths:
            self.blocks.append(ConvBlock(prev, w, cfg))
            prev = w

    def forward(self, x) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Return skip features of blocks 2..depth (shallow first) and the bottleneck."""
        skips = []
        for block in self.blocks:
            pre, x = block(x)
            skips.append(pre)
        return skips[1:], x


class AttentionGate(nn.Module):
    """Additive attention: sigmoid(psi(relu(W_x skip + W_g gate))) scales the skip."""

    def __init__(self, skip_ch: int, gate_ch: int, inter_ch: int | None = None):
        super().__init__()
        inter_ch = inter_ch or max(skip_ch // 2, 1)
        self.theta_x = nn.Conv2d(skip_ch, inter_ch, 1, bias=False)
        self.phi_g = nn.Conv2d(gate_ch, inter_ch, 1)
        self.psi = nn.Conv2d(inter_ch, 1, 1)

    def coefficients(self, skip, gate):
        if gate.shape[-2:] != skip.shape[-2:]:
            sh, sw = skip.shape[-2:]
            gh, gw = gate.shape[-2:]
            if sh % gh or sw % gw or sh // gh != sw // gw:
                raise ValueError(
                    f"gate {tuple(gate.shape[-2:])} cannot be resampled onto skip "
                    f"{tuple(skip.shape[-2:])}"
                )
            gate = F.interpolate(gate, size=(sh, sw), mode="nearest")
        return torch.sigmoid(self.psi(F.relu(self.theta_x(skip) + self.phi_g(gate))))

    def forward(self, skip, gate):
        return skip * self.coefficients(skip, gate)


class DeConvBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, cfg: ModelConfig,
                 attention: bool):
        super().__init__()
        self.stage1 = nn.Sequential(
            nn.Conv2d(in_ch, in_ch, 3, padding=1), nn.ReLU(),
            nn.Conv2d(in_ch, in_ch, 3, padding=1), nn.ReLU(),
            _bn2d(in_ch, cfg),
        )
        self.gate = AttentionGate(skip_ch, in_ch) if (attention and skip_ch) else None
        mid = in_ch + skip_ch
        self.stage2 = nn.Sequential(
            nn.Conv2d(mid, out_ch, 3, padding=1), nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.ReLU(),
            _bn2d(out_ch, cfg),
        )
        self.proj = nn.Conv2d(mid, out_ch, 1)
        self.up = nn.ConvTranspose2d(out_ch, out_ch, 2, stride=2)

    def forward(self, x, skip=None):
        h = x + self.stage1(x)
        if skip is not None:
            if self.gate is not None:
                skip = self.gate(skip, x)
            h = torch.cat([h, skip], dim=1)
        h = self.proj(h) + self.stage2(h)
        return self.up(h)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, n_encoders: int):
        super().__init__()
        D = cfg.encoder_depth
        widths = cfg.encoder_widths
        self.blocks = nn.ModuleList()
        in_ch = n_encoders * widths[-1]
        for j in range(1, D + 1):
            skip_ch = 0 if j == 1 else n_encoders * widths[D - j + 1]
            out_ch = widths[D - j]
            self.blocks.append(DeConvBlock(in_ch, skip_ch, out_ch, cfg, cfg.attention))
            in_ch = out_ch

    @property
    def level_channels(self) -> list[int]:
        return [b.up.out_channels for b in self.blocks]

    def forward(self, bottleneck, skips: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """Run all blocks; ``skips`` are the concatenated encoder features, shallow first.

        Returns one feature map per decoder level (level 1 first), each after
        its block's 2x up-sampling.
        """
        deep_first = list(reversed(skips))
        if len(deep_first) != len(self.blocks) - 1:
            raise ValueError(f"expected {len(self.blocks) - 1} skips, got {len(deep_first)}")
        x = self.blocks[0](bottleneck)
        levels = [x]
        for block, skip in zip(self.blocks[1:], deep_first):
            if skip.shape[-2:] != x.shape[-2:]:
                raise ValueError(
                    f"skip {tuple(skip.shape[-2:])} does not match decoder {tuple(x.shape[-2:])}"
                )
            x = block(x, skip)
            levels.append(x)
        return levels


class DetectorHead(nn.Module):
    """Nearest up-sample to input size, conv+ReLU+norm (aligned features), 1-filter conv + sigmoid.

    The aligned features are normalized per sample with no affine part, so
    they keep a fixed scale; otherwise the detached main-head features can
    grow without bound and the feature-matching term dominates training.
    Per-sample statistics (rather than running batch statistics) keep eval
    outputs finite when a feature channel is almost always zero.
    """

    def __init__(self, in_ch: int, cfg: ModelConfig):
        super().__init__()
        self.size = cfg.input_size
        self.feature = nn.Conv2d(in_ch, cfg.head_width, 3, padding=1)
        self.norm = nn.GroupNorm(1, cfg.head_width, affine=False)
        self.out = nn.Conv2d(cfg.head_width, 1, 1)

    def forward(self, x):
        if x.shape[-1] != self.size or x.shape[-2] != self.size:
            x = F.interpolate(x, size=(self.size, self.size), mode="nearest")
        feat = self.norm(F.relu(self.feature(x)))
        prob = torch.sigmoid(self.out(feat)).squeeze(1)
        return prob, feat


@dataclass
class DetectorOutputSet:
    main_prob: torch.Tensor                      # (B, S, S)
    main_features: torch.Tensor                  # (B, C, S, S)
    aux_probs: list[torch.Tensor] = field(default_factory=list)
    aux_features: list[torch.Tensor] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.aux_probs)

    def all_probs(self) -> list[torch.Tensor]:
        return [*self.aux_probs, self.main_prob]


class MEDSNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.config = cfg
        self.dense_block = DenseBlock(cfg) if cfg.uses_patch else None
        self.encoders = nn.ModuleDict({f"{name}_encoder": Encoder(cfg) for name in cfg.inputs})
        self.decoder = Decoder(cfg, len(cfg.inputs))
        ch = self.decoder.level_channels
        D, k = cfg.encoder_depth, cfg.num_aux_detectors
        # aux heads on the k levels just below the deepest one, shallowest first
        self.aux_levels = list(range(D - k, D))
        self.aux_heads = nn.ModuleList([DetectorHead(ch[lvl - 1], cfg) for lvl in self.aux_levels])
        self.main_head = DetectorHead(ch[-1], cfg)

    def _check_inputs(self, patch, forward_mips, backward_mips):
        cfg = self.config
        S = cfg.input_size
        expected = {
            "patch": (cfg.patch_depth, S, S),
            "forward": (3, S, S),
            "backward": (3, S, S),
        }
        given = {"patch": patch, "forward": forward_mips, "backward": backward_mips}
        batch = None
        for name in cfg.inputs:
            t = given[name]
            if t is None:
                raise ValueError(f"input '{name}' is required by this model")
            if t.dim() != 4 or tuple(t.shape[1:]) != expected[name]:
                raise ValueError(
                    f"input '{name}' must have shape (B, {', '.join(map(str, expected[name]))}), "
                    f"got {tuple(t.shape)}"
                )
            if batch is None:
                batch = t.shape[0]
            elif t.shape[0] != batch:
                raise ValueError("inputs disagree on batch size")
            if not torch.isfinite(t).all() or t.min() < 0 or t.max() > 1:
                raise ValueError(f"input '{name}' must be finite and within [0, 1]")

    def forward(self, patch=None, forward_mips=None, backward_mips=None) -> DetectorOutputSet:
        self._check_inputs(patch, forward_mips, backward_mips)
        sources = {"forward": forward_mips, "backward": backward_mips}
        if self.dense_block is not None:
            sources["patch"] = self.dense_block(patch)
        per_encoder = [self.encoders[f"{name}_encoder"](sources[name])
                       for name in self.config.inputs]
        n_levels = len(per_encoder[0][0])
        skips = [torch.cat([enc[0][i] for enc in per_encoder], dim=1) for i in range(n_levels)]
        bottleneck = torch.cat([enc[1] for enc in per_encoder], dim=1)
        levels = self.decoder(bottleneck, skips)
        main_prob, main_feat = self.main_head(levels[-1])
        out = DetectorOutputSet(main_prob=main_prob, main_features=main_feat)
        for head, lvl in zip(self.aux_heads, self.aux_levels):
            p, f = head(levels[lvl - 1])
            out.aux_probs.append(p)
            out.aux_features.append(f)
        return out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_report(cfg: ModelConfig) -> dict[str, int]:
    """Parameter counts per component for a freshly built model."""
    net = MEDSNet(cfg)
    report = {
        "dense_block": count_parameters(net.dense_block) if net.dense_block is not None else 0,
        "encoders": count_parameters(net.encoders),
        "decoder": count_parameters(net.decoder),
        "heads": count_parameters(net.aux_heads) + count_parameters(net.main_head),
    }
    report["total"] = count_parameters(net)
    return report


def save_checkpoint(model: MEDSNet, path, extra: dict | None = None) -> None:
    """Write parameters, config and format version atomically (temp file then rename).

    The archive is serialized in memory first so its bytes do not depend on
    the temporary file name.
    """
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    buf = io.BytesIO()
    torch.save(payload, buf)
    try:
        with open(tmp, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[MEDSNet, dict]:
    payload = torch.load(os.fspath(path), map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['format_version']} "
            f"(supported: {CHECKPOINT_FORMAT_VERSION})"
        )
    cfg = ModelConfig.from_dict(payload["config"])
    if expected_config is not None and expected_config != cfg:
        raise CheckpointError(f"{path}: checkpoint config {cfg} != expected {expected_config}")
    model = MEDSNet(cfg)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.eval()
    return model, payload.get("extra", {})
