"""RefNet: a U-Net-style encoder-decoder for per-B-scan three-class
segmentation, with a multi-scale input block and residual convolutional
blocks throughout."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volumes import ProbabilityVolume, ScanVolume


@dataclass
class ModelConfig:
    input_channels: int = 1
    num_classes: int = 3
    levels: int = 4
    base_channels: int = 32
    multiscale_kernels: tuple[int, ...] = (1, 3, 5, 7)
    normalization: str = "batch"  # batch | none
    seed: int = 0

    def __post_init__(self):
        self.multiscale_kernels = tuple(int(k) for k in self.multiscale_kernels)
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if self.num_classes != 3:
            raise ValueError(f"num_classes must be 3, got {self.num_classes}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if not self.multiscale_kernels or any(k < 1 or k % 2 == 0 for k in self.multiscale_kernels):
            raise ValueError("multiscale kernels must all be odd and >= 1")
        if self.normalization not in ("batch", "none"):
            raise ValueError(f"normalization must be 'batch' or 'none', got {self.normalization!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        return cls(**payload)


def _norm(channels: int, kind: str) -> nn.Module:
    return nn.BatchNorm2d(channels) if kind == "batch" else nn.Identity()


class MultiScaleBlock(nn.Module):
    """Parallel convolutions at several kernel sizes, concatenated and
    projected back down: small and large targets see matched receptive fields."""

    def __init__(self, in_channels: int, out_channels: int, kernels: tuple[int, ...], norm: str):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels, out_channels, k, padding=k // 2),
                _norm(out_channels, norm),
                nn.ReLU(inplace=True),
            )
            for k in kernels
        )
        self.project = nn.Sequential(
            nn.Conv2d(out_channels * len(kernels), out_channels, 1),
            _norm(out_channels, norm),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.project(torch.cat([branch(x) for branch in self.branches], dim=1))


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with an identity shortcut; the shortcut is a 1x1
    projection when the channel counts differ."""

    def __init__(self, in_channels: int, out_channels: int, norm: str):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm1 = _norm(out_channels, norm)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = _norm(out_channels, norm)
        if in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class DecoderStage(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, norm: str):
        super().__init__()
        self.up_conv = nn.Conv2d(in_channels, skip_channels, 3, padding=1)
        self.block = ResidualBlock(2 * skip_channels, out_channels, norm)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[2:], mode="nearest")
        x = self.up_conv(x)
        return self.block(torch.cat([x, skip], dim=1))


class RefNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        norm = config.normalization
        base = config.base_channels
        widths = [base] + [base * 2**i for i in range(config.levels)]
        # widths[i] = channels entering level i+1; widths[-1] = deepest

        self.multiscale = MultiScaleBlock(
            config.input_channels, base, config.multiscale_kernels, norm
        )
        self.encoder = nn.ModuleList(
            ResidualBlock(widths[i], widths[i + 1], norm) for i in range(config.levels)
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ResidualBlock(widths[-1], widths[-1], norm)
        self.decoder = nn.ModuleList(
            DecoderStage(
                in_channels=widths[i + 1],
                skip_channels=widths[i + 1],
                out_channels=widths[i],
                norm=norm,
            )
            for i in reversed(range(config.levels))
        )
        self.head = nn.Conv2d(base, config.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Map (batch, channels, H, W) images to (batch, classes, H, W)
        per-pixel probability maps. H and W are padded internally to
        multiples of 2**levels and the output is cropped back."""
        if x.dim() != 4:
            raise ValueError(f"expected a (batch, channel, H, W) tensor, got {tuple(x.shape)}")
        if x.shape[1] != self.config.input_channels:
            raise ValueError(
                f"channel mismatch: model expects {self.config.input_channels}, got {x.shape[1]}"
            )
        h, w = x.shape[2], x.shape[3]
        if h < 1 or w < 1:
            raise ValueError("spatial dimensions must be positive")
        multiple = 2**self.config.levels
        pad_h = (-h) % multiple
        pad_w = (-w) % multiple
        if pad_h or pad_w:
            mode = "reflect" if (pad_h < h and pad_w < w) else "replicate"
            x = F.pad(x, (0, pad_w, 0, pad_h), mode=mode)

        feats = self.multiscale(x)
        skips = []
        for block in self.encoder:
            feats = block(feats)
            skips.append(feats)
            feats = self.pool(feats)
        feats = self.bottleneck(feats)
        for stage, skip in zip(self.decoder, reversed(skips)):
            feats = stage(feats, skip)
        logits = self.head(feats)
        probs = F.softmax(logits, dim=1)
        return probs[:, :, :h, :w]


def build_model(config: ModelConfig) -> RefNet:
    """Construct a RefNet with seeded weight initialization.

    Identical config (including seed) yields bit-identical initial
    parameters. The model is returned in eval mode.
    """
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = RefNet(config)
    model.eval()
    return model


def forward_bscans(model: RefNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Run eval-mode inference over a stack of B-scans.

    images: (n, H, W) float array -> (n, H, W, classes) float32 probabilities.
    """
    if images.ndim != 3:
        raise ValueError(f"expected (n, H, W) images, got shape {images.shape}")
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = torch.from_numpy(
                np.ascontiguousarray(images[start: start + batch_size], dtype=np.float32)
            ).unsqueeze(1)
            probs = model(batch)
            chunks.append(probs.permute(0, 2, 3, 1).numpy())
    if was_training:
        model.train()
    return np.concatenate(chunks, axis=0)


def predict_volume(model: RefNet, prepared: ScanVolume, batch_size: int = 16) -> ProbabilityVolume:
    """Segment every B-scan of an already-preprocessed input volume."""
    probs = forward_bscans(model, prepared.voxels, batch_size=batch_size)
    # renormalize away float32 softmax round-off before the container check
    probs = probs / probs.sum(axis=-1, keepdims=True)
    return ProbabilityVolume(
        probs=probs,
        spacing_um=prepared.spacing_um,
        volume_id=prepared.volume_id,
        eye_id=prepared.eye_id,
    )


CHECKPOINT_FORMAT = "refnet-checkpoint-v1"


def save_checkpoint(model: RefNet, path: str | Path) -> None:
    """Persist parameters with the model config as a JSON sidecar section."""
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config_json": model.config.to_json(),
            "state_dict": model.state_dict(),
        },
        str(path),
    )


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> RefNet:
    """Rebuild a model from a checkpoint, rejecting config mismatches."""
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    config = ModelConfig.from_dict(json.loads(payload["config_json"]))
    if expected_config is not None and config != expected_config:
        raise ValueError(
            f"checkpoint config mismatch: stored {config} vs expected {expected_config}"
        )
    model = RefNet(config)
    model.load_state_dict(payload["state_dict"], strict=True)
    model.eval()
    return model
