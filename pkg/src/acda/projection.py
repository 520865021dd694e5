"""Per-layer, per-domain projectors to a common ``(c, h, w)`` feature shape.

Variants:

``pool-only``
    adaptive average pooling; no parameters, channel counts must already match.
``conv-1``
    a single 1x1 convolution, strided to reach the target spatial size.
``conv-3``
    three 3x3 convolutions with ReLUs between them, the first one strided.
``conv-3-pool``
    three stride-1 3x3 convolutions followed by adaptive average pooling.
``conv-3-residual``
    three residual blocks (conv, ReLU, conv, plus shortcut); the default.

Variants without pooling need each tap's spatial size to be an integer
multiple of the target size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import he_init

VARIANTS = ("pool-only", "conv-1", "conv-3", "conv-3-pool", "conv-3-residual")
DEFAULT_TARGET_SHAPE = (32, 4, 4)


class ProjectionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionSpec:
    variant: str = "conv-3-residual"
    target_shape: tuple[int, int, int] = DEFAULT_TARGET_SHAPE

    def __post_init__(self):
        object.__setattr__(self, "target_shape", tuple(int(v) for v in self.target_shape))
        if self.variant not in VARIANTS:
            raise ProjectionConfigError(f"unknown projection variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.target_shape) != 3 or min(self.target_shape) < 1:
            raise ProjectionConfigError(f"target_shape must be three positive ints, got {self.target_shape}")


class ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        if c_in != c_out or stride != 1:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        return self.conv2(F.relu(self.conv1(x))) + self.shortcut(x)


def _stride(in_shape, target_shape, variant):
    (_, h_in, w_in), (_, h, w) = in_shape, target_shape
    if h_in % h or w_in % w or h_in // h != w_in // w:
        raise ProjectionConfigError(
            f"{variant} cannot map spatial size {(h_in, w_in)} to {(h, w)} with an integer stride"
        )
    return h_in // h


def build_projector(in_shape: tuple[int, int, int], spec: ProjectionSpec) -> nn.Module:
    """One projector mapping ``in_shape`` features to ``spec.target_shape``."""
    c_in = in_shape[0]
    c, h, w = spec.target_shape
    v = spec.variant
    if v == "pool-only":
        if c_in != c:
            raise ProjectionConfigError(f"pool-only cannot change channels {c_in} -> {c}")
        return nn.AdaptiveAvgPool2d((h, w))
    if v == "conv-3-pool":
        return nn.Sequential(
            nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1),
            nn.AdaptiveAvgPool2d((h, w)),
        )
    s = _stride(in_shape, spec.target_shape, v)
    if v == "conv-1":
        return nn.Conv2d(c_in, c, 1, stride=s)
    if v == "conv-3":
        return nn.Sequential(
            nn.Conv2d(c_in, c, 3, stride=s, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1),
        )
    return nn.Sequential(ResidualBlock(c_in, c, s), ResidualBlock(c, c), ResidualBlock(c, c))


class ProjectionBank(nn.Module):
    """Independent source and target projectors for each of the ``m`` taps."""

    def __init__(self, tap_shapes, spec: ProjectionSpec):
        super().__init__()
        self.spec = spec
        self.tap_shapes = [tuple(int(v) for v in s) for s in tap_shapes]
        if not self.tap_shapes:
            raise ProjectionConfigError("need at least one tap shape")
        self.source = nn.ModuleList(build_projector(s, spec) for s in self.tap_shapes)
        self.target = nn.ModuleList(build_projector(s, spec) for s in self.tap_shapes)
        he_init(self)

    @property
    def m(self) -> int:
        return len(self.tap_shapes)

    def project(self, raw: torch.Tensor, layer: int, domain: str) -> torch.Tensor:
        if domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
        if not 0 <= layer < self.m:
            raise IndexError(f"layer {layer} out of range for m = {self.m}")
        if tuple(raw.shape[1:]) != self.tap_shapes[layer]:
            raise ValueError(f"layer {layer} expects {self.tap_shapes[layer]}, got {tuple(raw.shape[1:])}")
        return getattr(self, domain)[layer](raw)

    def forward(self, taps, domain: str) -> list[torch.Tensor]:
        return [self.project(t, i, domain) for i, t in enumerate(taps)]


def make_default_projection(tap_shapes, target_shape=DEFAULT_TARGET_SHAPE) -> ProjectionBank:
    return ProjectionBank(tap_shapes, ProjectionSpec("conv-3-residual", target_shape))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
