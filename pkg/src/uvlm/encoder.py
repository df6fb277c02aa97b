"""Hierarchical 3D residual encoder, U-Net segmentation decoder and Dice+CE loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

FULL_ENCODER_CHANNELS = (32, 64, 128, 256, 320, 320)
FULL_INPUT_SHAPE = (256, 256, 192)
FULL_PATCH_SHAPE = (128, 128, 96)
DESK_ENCODER_CHANNELS = (8, 16, 32, 64)

DICE_EPS = 1e-5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = DESK_ENCODER_CHANNELS
    n_seg_classes: int = 7
    in_channels: int = 1
    blocks_per_stage: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2:
            raise ConfigError("encoder needs at least 2 stages")
        if any(c <= 0 for c in self.channels):
            raise ConfigError(f"stage widths must be positive: {self.channels}")

    @property
    def n_stages(self) -> int:
        return len(self.channels)

    def stage_shape(self, input_shape, stage: int) -> tuple[int, ...]:
        """Spatial grid of stage ``stage`` (1-based) for a given input grid."""
        self.check_input(input_shape)
        f = 2 ** (stage - 1)
        return tuple(s // f for s in input_shape)

    def check_input(self, input_shape) -> None:
        f = 2 ** (self.n_stages - 1)
        for axis, s in zip("DHW", input_shape):
            if s % f:
                raise ConfigError(f"input axis {axis}={s} is not divisible by 2^{self.n_stages - 1}={f}")

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "n_seg_classes": self.n_seg_classes,
            "in_channels": self.in_channels,
            "blocks_per_stage": self.blocks_per_stage,
        }


def full_encoder_config(n_seg_classes: int = 2) -> EncoderConfig:
    return EncoderConfig(FULL_ENCODER_CHANNELS, n_seg_classes=n_seg_classes)


class InstanceNorm(nn.Module):
    """Per-sample, per-channel normalization over the spatial axes.

    Unlike ``nn.InstanceNorm3d`` this accepts 1x1x1 grids (output = bias).
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        if x[0, 0].numel() > 1:
            return F.instance_norm(x, weight=self.weight, bias=self.bias, eps=self.eps)
        dims = tuple(range(2, x.dim()))
        mean = x.mean(dims, keepdim=True)
        var = (x - mean).pow(2).mean(dims, keepdim=True)
        shape = (1, -1) + (1,) * len(dims)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight.view(shape) + self.bias.view(shape)


def conv3(cin, cout, stride=1):
    return nn.Conv3d(cin, cout, 3, stride=stride, padding=1)


class ResidualBlock(nn.Module):
    """Pre-activation block: x + conv(act(norm(conv(act(norm(x))))))."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = InstanceNorm(channels)
        self.conv1 = conv3(channels, channels)
        self.norm2 = InstanceNorm(channels)
        self.conv2 = conv3(channels, channels)

    def forward(self, x):
        h = self.conv1(F.gelu(self.norm1(x)))
        h = self.conv2(F.gelu(self.norm2(h)))
        return x + h


class ResEncoder(nn.Module):
    """N-stage encoder; stage i output has ``channels[i]`` maps at 1/2^(i-1) resolution."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.entries = nn.ModuleList(
            [conv3(cfg.in_channels, ch[0])] + [conv3(ch[i - 1], ch[i], stride=2) for i in range(1, len(ch))]
        )
        self.stages = nn.ModuleList(
            nn.Sequential(*[ResidualBlock(c) for _ in range(cfg.blocks_per_stage)]) for c in ch
        )
        init_weights(self)

    def forward(self, x) -> list[torch.Tensor]:
        self.cfg.check_input(x.shape[2:])
        feats = []
        for entry, stage in zip(self.entries, self.stages):
            x = stage(entry(x))
            feats.append(x)
        return feats


class UNetDecoder(nn.Module):
    """Upsamples f_N stage by stage, concatenating the matching skip feature."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        ch = cfg.channels
        self.ups = nn.ModuleList(nn.ConvTranspose3d(ch[i + 1], ch[i], 2, stride=2) for i in range(len(ch) - 1))
        self.fuse = nn.ModuleList(
            nn.ModuleDict({"conv": conv3(2 * ch[i], ch[i]), "norm": InstanceNorm(ch[i])}) for i in range(len(ch) - 1)
        )
        self.head = nn.Conv3d(ch[0], cfg.n_seg_classes, 1)
        init_weights(self)

    def forward(self, feats):
        x = feats[-1]
        for i in reversed(range(len(feats) - 1)):
            x = torch.cat([self.ups[i](x), feats[i]], dim=1)
            x = F.gelu(self.fuse[i]["norm"](self.fuse[i]["conv"](x)))
        return self.head(x)


class SegmentationNet(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResEncoder(cfg)
        self.decoder = UNetDecoder(cfg)

    def forward(self, x):
        return self.decoder(self.encoder(x))


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            if isinstance(m, nn.Conv3d):
                fan_in = m.weight[0].numel()
            else:
                # each output voxel of a stride-s transposed conv sees k^3/s^3 taps per input channel
                fan_in = m.weight.shape[0] * m.weight[0, 0].numel() // math.prod(m.stride)
            nn.init.normal_(m.weight, std=math.sqrt(2.0 / fan_in))
            nn.init.zeros_(m.bias)


def as_batch(v) -> torch.Tensor:
    """Accept a (D,H,W) array/tensor or an already batched (B,1,D,H,W) tensor."""
    t = torch.as_tensor(v)
    if t.dim() == 3:
        t = t[None, None]
    elif t.dim() == 4:
        t = t[:, None]
    return t


def encode(volume, encoder: ResEncoder) -> list[torch.Tensor]:
    param = next(encoder.parameters())
    return encoder(as_batch(volume).to(param.dtype))


def standardize_positions(feature: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Standardize each channel of a (B, C, ...) feature over its positions, per sample.

    Pretrained deep features carry a large per-channel offset shared by every
    position; consumers of the pyramid remove it before projecting. A feature
    with a single position is returned unchanged.
    """
    if feature[0, 0].numel() < 2:
        return feature
    dims = tuple(range(2, feature.dim()))
    mean = feature.mean(dims, keepdim=True)
    var = feature.var(dims, unbiased=False, keepdim=True)
    return (feature - mean) / torch.sqrt(var + eps)


def segment(volume, net: SegmentationNet) -> torch.Tensor:
    param = next(net.parameters())
    return net(as_batch(volume).to(param.dtype))


def _check_labels(gt: torch.Tensor, n_classes: int) -> None:
    if gt.numel() and (int(gt.max()) >= n_classes or int(gt.min()) < 0):
        raise ValueError(f"segmentation label {int(gt.max())} outside [0, {n_classes})")


def soft_dice_loss(probs: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - mean over classes (background included) of smoothed soft Dice.

    Overlaps are summed over the whole batch and all voxels before the ratio.
    """
    n_classes = probs.shape[1]
    gt = gt.long()
    _check_labels(gt, n_classes)
    onehot = F.one_hot(gt, n_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0,) + tuple(range(2, probs.dim()))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def seg_loss(logits: torch.Tensor, gt, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss on the softmax plus mean per-voxel cross-entropy."""
    gt = torch.as_tensor(gt).long()
    if gt.dim() == logits.dim() - 2:
        gt = gt[None]
    if gt.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"mask shape {tuple(gt.shape)} does not match logits {tuple(logits.shape)}")
    _check_labels(gt, logits.shape[1])
    return soft_dice_loss(logits.softmax(1), gt, eps) + F.cross_entropy(logits, gt)
