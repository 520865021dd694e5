"""Similarity-driven attention over cross-layer feature pairs.

For target layer ``i`` and source layer ``j`` two scalar similarities are
formed from the reshaped ``c x (h*w)`` feature maps: the average entry of the
``c x c`` product ``r(t) r(s)^T`` and of the ``hw x hw`` product
``r(t)^T r(s)``. Each is softmax-normalised over ``j`` and the two are
averaged with weight one half.
"""

from __future__ import annotations

from typing import Sequence

import torch


def reshape_r(feat: torch.Tensor) -> torch.Tensor:
    """``(..., c, h, w) -> (..., c, h*w)``, channel planes flattened row-major."""
    if feat.ndim < 3:
        raise ValueError(f"expected (..., c, h, w), got shape {tuple(feat.shape)}")
    return feat.reshape(*feat.shape[:-2], feat.shape[-2] * feat.shape[-1])


def _check_pair(tgt: torch.Tensor, src: torch.Tensor):
    if tgt.ndim != 4 or src.ndim != 4:
        raise ValueError("projected features must be (batch, c, h, w)")
    if tgt.shape[1:] != src.shape[1:]:
        raise ValueError(f"shape mismatch: {tuple(tgt.shape[1:])} vs {tuple(src.shape[1:])}")


def pair_similarities(tgt_i: torch.Tensor, src_j: torch.Tensor) -> tuple[float, float]:
    """Average channel-Gram and spatial-Gram similarity of two feature batches.

    The products are averaged over every (target sample, source sample) pair;
    by bilinearity this equals the products of the two batch means, which is
    what gets computed. Batches may differ in size.
    """
    sim_a, sim_b = _similarities(tgt_i, src_j)
    return float(sim_a), float(sim_b)


def _similarities(tgt_i, src_j):
    _check_pair(tgt_i, src_j)
    rt = reshape_r(tgt_i.mean(0))
    rs = reshape_r(src_j.mean(0))
    return (rt @ rs.T).mean(), (rt.T @ rs).mean()


@torch.no_grad()
def similarity_matrices(
    tgt_feats: Sequence[torch.Tensor], src_feats: Sequence[torch.Tensor]
) -> tuple[torch.Tensor, torch.Tensor]:
    """``m x m`` tables of both similarities, row = target layer, column = source layer."""
    m = len(tgt_feats)
    if m == 0 or len(src_feats) != m:
        raise ValueError(f"need equal, nonzero layer counts (got {m} and {len(src_feats)})")
    sim_a = torch.empty(m, m, dtype=torch.float64)
    sim_b = torch.empty(m, m, dtype=torch.float64)
    for i in range(m):
        for j in range(m):
            a, b = _similarities(tgt_feats[i].detach(), src_feats[j].detach())
            sim_a[i, j], sim_b[i, j] = a.double(), b.double()
    return sim_a, sim_b


def weights_from_similarities(sim_a: torch.Tensor, sim_b: torch.Tensor) -> torch.Tensor:
    # torch.softmax subtracts the row max before exponentiating
    return 0.5 * torch.softmax(sim_a, dim=1) + 0.5 * torch.softmax(sim_b, dim=1)


def attention_weights(
    tgt_feats: Sequence[torch.Tensor], src_feats: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Row-stochastic ``m x m`` weight matrix ``w[i, j]`` (float64, no grad).

    Row ``i`` is a target layer, column ``j`` a source layer.
    """
    return weights_from_similarities(*similarity_matrices(tgt_feats, src_feats))


def uniform_attention(m: int) -> torch.Tensor:
    if m < 1:
        raise ValueError("m must be >= 1")
    return torch.full((m, m), 1.0 / m, dtype=torch.float64)


def check_attention(w: torch.Tensor, atol: float = 1e-6) -> torch.Tensor:
    """Validate the shape, range and row sums of an attention matrix."""
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
        raise ValueError(f"attention must be a nonempty square matrix, got {tuple(w.shape)}")
    if not torch.isfinite(w).all() or (w < 0).any():
        raise ValueError("attention entries must be finite and nonnegative")
    if not torch.allclose(w.sum(1), torch.ones(w.shape[0], dtype=w.dtype), atol=atol, rtol=0):
        raise ValueError(f"attention rows must sum to 1, got {w.sum(1).tolist()}")
    return w
