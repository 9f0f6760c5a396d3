"""Tiny configurable 3D encoder-decoder with four prediction heads,
decoder feature taps, and EMA-coupled student/teacher/auxiliary networks.

The backbone halves resolution ``depth - 1`` times with strided
convolutions and restores it with transposed convolutions plus skip
concatenation. Heads are parallel 1x1x1 projections from the
full-resolution decoder features; each voxel distribution is a softmax.

Feature taps index decoder layers from the output side: ``k = 1`` is the
last, full-resolution decoder layer, ``k = depth`` the bottleneck.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidParam, ShapeMismatch, ShapeNotDivisible

HEAD_COUNT = 4


@dataclass
class SegNetConfig:
    depth: int = 3
    base_channels: int = 8
    classes: int = 2
    head_count: int = HEAD_COUNT
    feature_tap_k: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise InvalidParam("depth must be >= 1")
        if self.base_channels < 1:
            raise InvalidParam("base_channels must be >= 1")
        if self.classes < 2:
            raise InvalidParam("classes must be >= 2")
        if self.head_count != HEAD_COUNT:
            raise InvalidParam(f"head_count is fixed at {HEAD_COUNT}")
        if not (1 <= self.feature_tap_k <= self.depth):
            raise InvalidParam(f"feature_tap_k must be in [1, {self.depth}]")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * (2 ** i) for i in range(self.depth)]

    def tap_channels(self, k: int | None = None) -> int:
        k = self.feature_tap_k if k is None else k
        return self.channels[k - 1]


@dataclass
class NetworkOutputs:
    """Batched forward products: 4 per-head probability volumes, their
    renormalized mean, and the tapped decoder features (raw + upsampled)."""

    head_probs: list[torch.Tensor]        # each (B, C, H, W, D)
    mean_probs: torch.Tensor              # (B, C, H, W, D)
    tap_features: torch.Tensor            # (B, E, h, w, d)
    tap_features_upsampled: torch.Tensor  # (B, E, H, W, D)


def _norm_groups(channels: int) -> int:
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    """conv3x3x3 -> GroupNorm -> LeakyReLU, with a residual add when the
    channel count is preserved."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, kernel_size=3, padding=1, bias=False)
        self.norm = nn.GroupNorm(_norm_groups(cout), cout)
        self.residual = cin == cout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.leaky_relu(self.norm(self.conv(x)), 0.01)
        return x + y if self.residual else y


class SegNet(nn.Module):
    """Encoder-decoder segmentation network with multi-head voxel classifiers."""

    def __init__(self, config: SegNetConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        self.enc_blocks = nn.ModuleList([ConvBlock(1, ch[0])])
        self.downs = nn.ModuleList()
        for i in range(1, config.depth):
            self.downs.append(nn.Conv3d(ch[i - 1], ch[i], kernel_size=2, stride=2))
            self.enc_blocks.append(ConvBlock(ch[i], ch[i]))
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in range(config.depth - 2, -1, -1):
            self.ups.append(nn.ConvTranspose3d(ch[i + 1], ch[i], kernel_size=2, stride=2))
            self.dec_blocks.append(ConvBlock(2 * ch[i], ch[i]))
        self.heads = nn.ModuleList(
            [nn.Conv3d(ch[0], config.classes, kernel_size=1) for _ in range(config.head_count)]
        )

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 4:
            x = x.unsqueeze(1)
        if x.ndim != 5 or x.shape[1] != 1:
            raise InvalidParam(f"expected input (B, 1, H, W, D), got {tuple(x.shape)}")
        divisor = 2 ** (self.config.depth - 1)
        if any(s % divisor for s in x.shape[2:]):
            raise ShapeNotDivisible(
                f"spatial shape {tuple(x.shape[2:])} not divisible by {divisor}"
            )
        return x

    def _forward_impl(self, x: torch.Tensor, tap_k: int) -> NetworkOutputs:
        skips = []
        y = x
        for i, block in enumerate(self.enc_blocks):
            if i > 0:
                y = self.downs[i - 1](y)
            y = block(y)
            skips.append(y)
        # decoder features indexed by level: level depth-1 is the bottleneck
        dec_feats = {self.config.depth - 1: y}
        for j, (up, block) in enumerate(zip(self.ups, self.dec_blocks)):
            level = self.config.depth - 2 - j
            y = block(torch.cat([up(y), skips[level]], dim=1))
            dec_feats[level] = y
        logits = [head(y) for head in self.heads]
        head_probs = [F.softmax(lg, dim=1) for lg in logits]
        mean = torch.stack(head_probs, dim=0).mean(dim=0)
        mean = mean / mean.sum(dim=1, keepdim=True)
        tap = dec_feats[tap_k - 1]
        if tap.shape[2:] == x.shape[2:]:
            tap_up = tap
        else:
            tap_up = F.interpolate(tap, size=x.shape[2:], mode="trilinear",
                                   align_corners=True)
        return NetworkOutputs(head_probs=head_probs, mean_probs=mean,
                              tap_features=tap, tap_features_upsampled=tap_up)

    def forward(self, x: torch.Tensor, tap_k: int | None = None) -> NetworkOutputs:
        x = self._check_input(x)
        tap_k = self.config.feature_tap_k if tap_k is None else tap_k
        if not (1 <= tap_k <= self.config.depth):
            raise InvalidParam(f"tap_k must be in [1, {self.config.depth}]")
        if x.shape[0] == 1:
            # CPU conv3d kernels hit a slow path for singleton batches;
            # run the duplicated pair and keep the first sample.
            out = self._forward_impl(torch.cat([x, x], dim=0), tap_k)
            return NetworkOutputs(
                head_probs=[p[0:1] for p in out.head_probs],
                mean_probs=out.mean_probs[0:1],
                tap_features=out.tap_features[0:1],
                tap_features_upsampled=out.tap_features_upsampled[0:1],
            )
        return self._forward_impl(x, tap_k)


def trilinear_upsample(features: torch.Tensor, target: tuple[int, int, int]) -> torch.Tensor:
    """Trilinear interpolation to ``target`` spatial shape (align-corners:
    first and last samples along each axis map onto the volume corners).

    Accepts (E, h, w, d) or (B, E, h, w, d); never downsamples.
    """
    squeeze = features.ndim == 4
    if squeeze:
        features = features.unsqueeze(0)
    if features.ndim != 5:
        raise InvalidParam(f"expected 4D or 5D features, got {features.ndim}D")
    target = tuple(int(t) for t in target)
    if any(t < s for t, s in zip(target, features.shape[2:])):
        raise InvalidParam(f"target {target} smaller than source {tuple(features.shape[2:])}")
    if tuple(features.shape[2:]) == target:
        out = features
    else:
        out = F.interpolate(features, size=target, mode="trilinear", align_corners=True)
    return out.squeeze(0) if squeeze else out


def _param_tensors(obj) -> list[torch.Tensor]:
    if isinstance(obj, nn.Module):
        return list(obj.parameters())
    return list(obj)


@torch.no_grad()
def ema_update(teacher, student, decay: float):
    """teacher <- decay * teacher + (1 - decay) * student, elementwise.

    Accepts nn.Modules or sequences of tensors; mutates and returns the
    teacher parameters.
    """
    if not (0.0 <= decay <= 1.0):
        raise InvalidParam(f"decay must be in [0, 1], got {decay}")
    t_params = _param_tensors(teacher)
    s_params = _param_tensors(student)
    if len(t_params) != len(s_params):
        raise ShapeMismatch("parameter sets have different lengths")
    for tp, sp in zip(t_params, s_params):
        if tp.shape != sp.shape:
            raise ShapeMismatch(f"parameter shapes differ: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        tp.mul_(decay).add_(sp, alpha=1.0 - decay)
    return teacher


@dataclass
class NetworkTriple:
    """Student (gradient-trained), teacher (EMA of student), and an
    independently initialized, independently trained auxiliary network."""

    student: SegNet
    teacher: SegNet
    auxiliary: SegNet
    ema_decay: float = 0.99

    @classmethod
    def create(cls, config: SegNetConfig, ema_decay: float = 0.99) -> "NetworkTriple":
        student = SegNet(config)
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        auxiliary = SegNet(copy.deepcopy(config))
        return cls(student=student, teacher=teacher, auxiliary=auxiliary,
                   ema_decay=ema_decay)

    def ema_step(self) -> None:
        ema_update(self.teacher, self.student, self.ema_decay)
