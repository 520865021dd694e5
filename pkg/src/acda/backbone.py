"""Small tapped feature extractor ``G`` and linear classifier ``C``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture of the tapped feature extractor.

    Attributes:
        conv_blocks: ``(out_channels, kernel_size, stride)`` per block. For
            ``kind="mlp"`` only the width is used; kernel and stride must be 1.
        tap_indices: block indices whose outputs are exported, increasing.
        embed_dim: width of the fully-connected embedding ``f``.
        num_classes: number of classes ``K``.
        input_shape: ``(channels, height, width)`` for conv, ``(features,)`` for mlp.
        kind: ``"conv"`` or ``"mlp"``.
    """

    conv_blocks: tuple[tuple[int, int, int], ...] = ((8, 3, 1), (16, 3, 2), (32, 3, 2), (32, 3, 1))
    tap_indices: tuple[int, ...] = (1, 2, 3)
    embed_dim: int = 64
    num_classes: int = 4
    input_shape: tuple[int, ...] = (1, 16, 16)
    kind: str = "conv"

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(tuple(int(v) for v in b) for b in self.conv_blocks))
        object.__setattr__(self, "tap_indices", tuple(int(i) for i in self.tap_indices))
        object.__setattr__(self, "input_shape", tuple(int(i) for i in self.input_shape))
        if self.kind not in ("conv", "mlp"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if not self.conv_blocks:
            raise ValueError("backbone needs at least one block")
        for out, k, s in self.conv_blocks:
            if out < 1 or k < 1 or s < 1:
                raise ValueError(f"invalid block {(out, k, s)}")
            if self.kind == "mlp" and (k, s) != (1, 1):
                raise ValueError("mlp blocks take kernel_size = stride = 1")
        taps = self.tap_indices
        if not taps:
            raise ValueError("need at least one tap")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"tap_indices must be strictly increasing: {taps}")
        if taps[0] < 0 or taps[-1] >= len(self.conv_blocks):
            raise ValueError(f"tap index out of range for {len(self.conv_blocks)} blocks: {taps}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        expected = 3 if self.kind == "conv" else 1
        if len(self.input_shape) != expected or min(self.input_shape) < 1:
            raise ValueError(f"input_shape {self.input_shape} invalid for kind {self.kind!r}")

    @property
    def m(self) -> int:
        return len(self.tap_indices)


class ForwardOutput(NamedTuple):
    taps: list[torch.Tensor]
    logits: torch.Tensor
    embedding: torch.Tensor


def he_init(module: nn.Module):
    """Kaiming-normal weights and zero biases for every conv/linear layer.

    PyTorch's default init attenuates the signal through this ReLU stack
    enough that SGD at lr 1e-3 stays at chance level.
    """
    for mod in module.modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)


class Backbone(nn.Module):
    """Conv (or MLP) stack with tapped block outputs, FC embedding and classifier.

    Taps are always 4-d ``(n, c, h, w)``; MLP block outputs are exported as
    ``(n, width, 1, 1)``.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        if spec.kind == "conv":
            c_in = spec.input_shape[0]
            for out, k, s in spec.conv_blocks:
                blocks.append(nn.Conv2d(c_in, out, k, stride=s, padding=k // 2))
                c_in = out
        else:
            d_in = spec.input_shape[0]
            for out, _, _ in spec.conv_blocks:
                blocks.append(nn.Linear(d_in, out))
                d_in = out
        self.blocks = nn.ModuleList(blocks)
        with torch.no_grad():
            flat = self._features(torch.zeros(1, *spec.input_shape))[-1].numel()
        self.embed = nn.Linear(flat, spec.embed_dim)
        self.classifier = nn.Linear(spec.embed_dim, spec.num_classes)
        he_init(self)

    def _features(self, x):
        outs = []
        for block in self.blocks:
            x = F.relu(block(x))
            outs.append(x)
        return outs

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ValueError(
                f"input shape {tuple(x.shape[1:])} does not match backbone {self.spec.input_shape}"
            )
        outs = self._features(x)
        taps = [outs[i] for i in self.spec.tap_indices]
        if self.spec.kind == "mlp":
            taps = [t[:, :, None, None] for t in taps]
        embedding = F.relu(self.embed(outs[-1].flatten(1)))
        return ForwardOutput(taps, self.classifier(embedding), embedding)

    def tap_shapes(self) -> list[tuple[int, int, int]]:
        p = next(self.parameters())
        with torch.no_grad():
            out = self(torch.zeros(1, *self.spec.input_shape, dtype=p.dtype))
        return [tuple(t.shape[1:]) for t in out.taps]


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax probability of the true class."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError(f"logits must be (n >= 1, K), got {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != logits.shape[:1]:
        raise ValueError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)
