"""Gaussian multi-kernel machinery and the biased MMD^2 estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch

DEFAULT_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class KernelSpec:
    """Convex combination of RBF kernels.

    Attributes:
        bandwidths: RBF length-scales, one per component.
        beta: Mixture weights, nonnegative and summing to one.
    """

    bandwidths: tuple[float, ...]
    beta: tuple[float, ...]

    def __post_init__(self):
        bw = tuple(float(b) for b in self.bandwidths)
        beta = tuple(float(b) for b in self.beta)
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "beta", beta)
        if len(bw) < 1 or len(bw) != len(beta):
            raise ValueError(
                f"need matching, nonempty bandwidths and beta (got {len(bw)} and {len(beta)})"
            )
        if not all(math.isfinite(b) and b > 0 for b in bw):
            raise ValueError(f"bandwidths must be positive and finite: {bw}")
        if not all(math.isfinite(b) and b >= 0 for b in beta):
            raise ValueError(f"beta must be nonnegative: {beta}")
        if abs(sum(beta) - 1.0) > 1e-9:
            raise ValueError(f"beta must sum to 1, sums to {sum(beta)!r}")

    @property
    def o(self) -> int:
        return len(self.bandwidths)

    @classmethod
    def single(cls, bandwidth: float) -> "KernelSpec":
        return cls((bandwidth,), (1.0,))

    @classmethod
    def around(cls, sigma: float, factors: Sequence[float] = DEFAULT_FACTORS) -> "KernelSpec":
        """Geometric family ``sigma * factors`` with uniform weights."""
        return cls(tuple(sigma * f for f in factors), tuple(1.0 / len(factors) for _ in factors))


@dataclass(frozen=True)
class MedianHeuristic:
    """Kernel family whose base bandwidth is re-estimated for every batch pair.

    The base bandwidth is the median pairwise distance of the pooled batch
    (see :func:`median_bandwidth`); components are ``factors`` multiples of it.
    """

    factors: tuple[float, ...] = DEFAULT_FACTORS

    def resolve(self, src: torch.Tensor, tgt: torch.Tensor) -> KernelSpec:
        return KernelSpec.around(median_bandwidth(src, tgt), self.factors)


Kernel = Union[KernelSpec, MedianHeuristic]


def _check_vector_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise ValueError("non-finite input to kernel")


def rbf_kernel(a, b, bandwidth: float) -> torch.Tensor:
    """exp(-||a - b||^2 / (2 bandwidth^2)) for two vectors."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    _check_vector_pair(a, b)
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    sq = ((a - b) ** 2).sum()
    return torch.exp(-sq / (2.0 * bandwidth**2))


def multi_kernel(a, b, spec: KernelSpec) -> torch.Tensor:
    return sum(beta * rbf_kernel(a, b, bw) for bw, beta in zip(spec.bandwidths, spec.beta))


def _as_batch(x: torch.Tensor, name: str) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.ndim == 1:
        x = x.unsqueeze(1)
    elif x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"{name} batch is empty: shape {tuple(x.shape)}")
    return x


def pairwise_sq_dists(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distances between the rows of ``x`` and ``y``."""
    sq = (x * x).sum(1, keepdim=True) + (y * y).sum(1).unsqueeze(0) - 2.0 * (x @ y.T)
    return sq.clamp_min(0.0)


@torch.no_grad()
def median_bandwidth(batch_a, batch_b) -> float:
    """Median pairwise distance over the pooled samples of both batches.

    Falls back to 1.0 when every pooled sample is identical.
    """
    a = _as_batch(batch_a, "first")
    b = _as_batch(batch_b, "second")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    z = torch.cat([a, b]).to(torch.float64)
    n = z.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least two pooled samples")
    med = float(torch.quantile(torch.pdist(z), 0.5))
    if not med > 0:
        return 1.0
    return med


def _mixture(sq: torch.Tensor, spec: KernelSpec) -> torch.Tensor:
    out = torch.zeros_like(sq)
    for bw, beta in zip(spec.bandwidths, spec.beta):
        if beta:
            out = out + beta * torch.exp(sq / (-2.0 * bw * bw))
    return out


def kernel_matrix(x, y, spec: KernelSpec) -> torch.Tensor:
    return _mixture(pairwise_sq_dists(x, y), spec)


def _flat_pair(src, tgt):
    x = _as_batch(src, "source")
    y = _as_batch(tgt, "target")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    return x, y


def pooled_kernel(src, tgt, kernel: Kernel) -> torch.Tensor:
    """Kernel matrix over ``[src; tgt]``, with the bandwidth resolved for this pair."""
    x, y = _flat_pair(src, tgt)
    z = torch.cat([x, y])
    sq = pairwise_sq_dists(z, z)
    if isinstance(kernel, MedianHeuristic):
        kernel = KernelSpec.around(_median_from_sq(sq.detach()), kernel.factors)
    return _mixture(sq, kernel)


def _median_from_sq(sq: torch.Tensor) -> float:
    n = sq.shape[0]
    iu = torch.triu_indices(n, n, offset=1)
    med = float(torch.quantile(sq[iu[0], iu[1]].double(), 0.5).sqrt())
    return med if med > 0 else 1.0


def mmd2_weights(n_s: int, n_t: int, dtype=torch.float64) -> torch.Tensor:
    """Signed weight vector ``v`` with ``MMD^2 = v^T K v`` for a pooled kernel ``K``."""
    return torch.cat([torch.full((n_s,), 1.0 / n_s, dtype=dtype), torch.full((n_t,), -1.0 / n_t, dtype=dtype)])


def mmd2_biased(src, tgt, kernel: Kernel) -> torch.Tensor:
    """Biased (V-statistic) MMD^2 between two sample batches.

    Inputs of rank > 2 are flattened per sample. Differentiable in both
    batches; a :class:`MedianHeuristic` bandwidth is treated as a constant.

    Args:
        src: ``n_s x d`` source samples.
        tgt: ``n_t x d`` target samples.
        kernel: fixed :class:`KernelSpec` or a :class:`MedianHeuristic`.

    Returns:
        0-dim tensor.
    """
    k = pooled_kernel(src, tgt, kernel)
    n = _as_batch(src, "source").shape[0]
    return k[:n, :n].mean() + k[n:, n:].mean() - 2.0 * k[:n, n:].mean()
