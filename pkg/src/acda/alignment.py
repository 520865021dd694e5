"""Alignment objectives: cross-layer, logit-level, their combination, and
label-conditioned cross-layer alignment driven by k-means pseudo-labels."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.cluster import KMeans, kmeans_plusplus

from .attention import check_attention
from .kernels import Kernel, mmd2_biased, mmd2_weights, pooled_kernel

log = logging.getLogger(__name__)

KMEANS_ITERS = 20


@dataclass(frozen=True)
class LossBreakdown:
    l_ce: float
    l_cross_ali: float
    l_same_ali: float
    l_ali: float
    l_all: float
    w: Optional[tuple[tuple[float, ...], ...]] = None

    def as_dict(self) -> dict:
        return {
            "l_ce": self.l_ce,
            "l_cross_ali": self.l_cross_ali,
            "l_same_ali": self.l_same_ali,
            "l_ali": self.l_ali,
            "l_all": self.l_all,
        }


def combine(l_cross, l_same, l_ce, delta: float, lam: float, w=None) -> LossBreakdown:
    """Blend the two alignment terms with ``delta`` and add ``lam`` of it to the CE loss."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if not lam >= 0.0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    l_cross, l_same, l_ce = float(l_cross), float(l_same), float(l_ce)
    l_ali = delta * l_cross + (1.0 - delta) * l_same
    if w is not None:
        w = tuple(tuple(float(v) for v in row) for row in torch.as_tensor(w).tolist())
    return LossBreakdown(l_ce, l_cross, l_same, l_ali, l_ce + lam * l_ali, w)


def _flat(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1)


def _check_layers(src_feats, tgt_feats, w):
    m = len(src_feats)
    if m == 0 or len(tgt_feats) != m:
        raise ValueError(f"need equal, nonzero layer counts (got {m} and {len(tgt_feats)})")
    w = check_attention(torch.as_tensor(w).detach())
    if w.shape[0] != m:
        raise ValueError(f"attention is {tuple(w.shape)} for {m} layers")
    shape = tuple(src_feats[0].shape[1:])
    for f in (*src_feats, *tgt_feats):
        if tuple(f.shape[1:]) != shape:
            raise ValueError(f"projected shapes differ: {tuple(f.shape[1:])} vs {shape}")
    return w


def _weighted_pair_mmd(src_feats, tgt_feats, w, kernel, v):
    """``sum_ij w[i, j] * v_g^T K_ij v_g`` for every row ``v_g`` of ``v``.

    ``K_ij`` is the pooled kernel over (source layer j, target layer i); each
    row of ``v`` selects and weights a sample subset, so one kernel matrix per
    layer pair serves every subset.
    """
    m = len(src_feats)
    total = None
    for i in range(m):
        for j in range(m):
            wij = float(w[i, j])
            if wij == 0.0:
                continue
            k = pooled_kernel(_flat(src_feats[j]), _flat(tgt_feats[i]), kernel)
            vv = v.to(k.dtype)
            term = wij * ((vv @ k) * vv).sum(1)
            total = term if total is None else total + term
    if total is None:
        return src_feats[0].new_zeros(v.shape[0])
    return total


def cross_layer_loss(
    src_feats: Sequence[torch.Tensor],
    tgt_feats: Sequence[torch.Tensor],
    w: torch.Tensor,
    kernel: Kernel,
) -> torch.Tensor:
    """``sum_ij w[i, j] * MMD^2(source layer j, target layer i)``.

    ``w`` is indexed (target layer, source layer), the orientation produced by
    :func:`acda.attention.attention_weights`, and is treated as a constant.
    Features are flattened per sample.
    """
    w = _check_layers(src_feats, tgt_feats, w)
    v = mmd2_weights(src_feats[0].shape[0], tgt_feats[0].shape[0])[None]
    return _weighted_pair_mmd(src_feats, tgt_feats, w, kernel, v)[0]


def same_layer_loss(f_src: torch.Tensor, f_tgt: torch.Tensor, kernel: Kernel) -> torch.Tensor:
    return mmd2_biased(f_src, f_tgt, kernel)


@dataclass(frozen=True)
class PseudoLabels:
    labels: np.ndarray
    # cluster index -> class index
    centroid_assignment: dict = field(default_factory=dict)
    centroids: Optional[np.ndarray] = None


def pseudo_label(
    tgt_embeddings,
    src_embeddings,
    src_labels,
    num_classes: int,
    seed: int = 0,
    n_iter: int = KMEANS_ITERS,
) -> PseudoLabels:
    """K-means pseudo-labels for target samples.

    Centroids start at the per-class source means, so cluster ``k`` inherits
    class ``k``. A class absent from the source set gets a k-means++ centroid
    drawn from the target embeddings instead.
    """
    tgt = np.asarray(torch.as_tensor(tgt_embeddings).detach().cpu(), dtype=np.float64)
    src = np.asarray(torch.as_tensor(src_embeddings).detach().cpu(), dtype=np.float64)
    y = np.asarray(torch.as_tensor(src_labels).cpu(), dtype=np.int64)
    if tgt.ndim != 2 or src.ndim != 2 or tgt.shape[1] != src.shape[1]:
        raise ValueError(f"embedding shapes incompatible: {tgt.shape} vs {src.shape}")
    if len(y) != len(src):
        raise ValueError("one source label per source embedding required")
    if len(tgt) < num_classes:
        raise ValueError(f"need at least {num_classes} target samples, got {len(tgt)}")

    init = np.empty((num_classes, tgt.shape[1]))
    missing = []
    for k in range(num_classes):
        members = src[y == k]
        if len(members):
            init[k] = members.mean(0)
        else:
            missing.append(k)
    if missing:
        log.warning("source classes %s empty; using k-means++ centroids", missing)
        extra, _ = kmeans_plusplus(tgt, n_clusters=len(missing), random_state=seed)
        init[missing] = extra

    km = KMeans(n_clusters=num_classes, init=init, n_init=1, max_iter=n_iter, random_state=seed)
    labels = km.fit_predict(tgt)
    return PseudoLabels(
        labels=labels.astype(np.int64),
        centroid_assignment={k: k for k in range(num_classes)},
        centroids=km.cluster_centers_,
    )


def conditioned_cross_layer_loss(
    src_feats: Sequence[torch.Tensor],
    src_labels,
    tgt_feats: Sequence[torch.Tensor],
    tgt_pseudo,
    w: torch.Tensor,
    kernel: Kernel,
    stats: Optional[Counter] = None,
) -> torch.Tensor:
    """Class-restricted cross-layer loss averaged over classes present in both batches.

    Args:
        tgt_pseudo: per-sample pseudo-labels of the target batch (a
            :class:`PseudoLabels` or an index array).
        stats: counter receiving ``"no_shared_class"`` when nothing overlaps.
    """
    if isinstance(tgt_pseudo, PseudoLabels):
        tgt_pseudo = tgt_pseudo.labels
    w = _check_layers(src_feats, tgt_feats, w)
    ys = torch.as_tensor(np.asarray(src_labels), dtype=torch.long)
    yt = torch.as_tensor(np.asarray(tgt_pseudo), dtype=torch.long)
    n_s, n_t = src_feats[0].shape[0], tgt_feats[0].shape[0]
    if len(ys) != n_s or len(yt) != n_t:
        raise ValueError("label count does not match batch size")
    shared = sorted(set(ys.tolist()) & set(yt.tolist()))
    if not shared:
        if stats is not None:
            stats["no_shared_class"] += 1
        log.debug("conditioned alignment: no class shared by both batches")
        return src_feats[0].new_zeros(())
    v = torch.zeros(len(shared), n_s + n_t, dtype=torch.float64)
    for g, k in enumerate(shared):
        s_mask, t_mask = ys == k, yt == k
        v[g, :n_s][s_mask] = 1.0 / int(s_mask.sum())
        v[g, n_s:][t_mask] = -1.0 / int(t_mask.sum())
    return _weighted_pair_mmd(src_feats, tgt_feats, w, kernel, v).mean()
