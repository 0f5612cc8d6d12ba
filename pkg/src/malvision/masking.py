"""Additive attention masks and masking-ratio token selection.

Masks are N x N arrays over {0, -inf}: entry (i, j) is 0 when position i
may attend to position j.  The causal content mask allows j <= i; the
cluster-block mask generalizes it so attention is unrestricted inside a
cluster and causal across clusters, never admitting a future cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MaskError, SelectionError
from .serialize import ClusterPlan

GRANULARITIES = ("pixel", "patch", "cluster")


@dataclass(frozen=True)
class AttnMask:
    """Additive mask with entries in {0, -inf}; diagonal always 0."""

    m: np.ndarray

    def __post_init__(self):
        m = self.m
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise MaskError(f"mask must be square, got {m.shape}")
        finite = m == 0.0
        if not (finite | np.isneginf(m)).all():
            raise MaskError("mask entries must be 0 or -inf")
        if not finite.diagonal().all():
            raise MaskError("every token must attend to itself")
        if not finite.any(axis=1).all():
            raise MaskError("a row masks every position")

    @property
    def n(self) -> int:
        return self.m.shape[0]

    def zero_count(self) -> int:
        return int((self.m == 0.0).sum())


@dataclass(frozen=True)
class MaskSelection:
    """Boolean per serialized position: True means the content is hidden."""

    masked: np.ndarray  # (N,) bool
    ratio: float
    granularity: str

    @property
    def count(self) -> int:
        return int(self.masked.sum())

    def visible(self) -> np.ndarray:
        return ~self.masked


def causal_content_mask(n: int, dtype=np.float32) -> AttnMask:
    """Lower-triangular content mask: i attends to itself and predecessors."""
    if n < 1:
        raise MaskError("empty sequence has no mask")
    m = np.full((n, n), -np.inf, dtype=dtype)
    m[np.tril_indices(n)] = 0.0
    return AttnMask(m=m)


def cluster_block_mask(plan: ClusterPlan, dtype=np.float32) -> AttnMask:
    """Block-causal mask over serialized positions.

    Position i attends to position j iff j's cluster comes no later than
    i's in the prediction order: full attention within a cluster, causal
    across clusters.  With 1x1 clusters this is exactly the causal content
    mask.
    """
    n = plan.n
    cid = np.arange(n, dtype=np.int64) // plan.cluster_size
    allowed = cid[None, :] <= cid[:, None]
    m = np.where(allowed, 0.0, -np.inf).astype(dtype)
    return AttnMask(m=m)


def ratio_selection(plan: ClusterPlan, ratio: float, granularity: str = "patch",
                    rng_seed: int | None = 0) -> MaskSelection:
    """Uniformly select positions (or whole clusters) to hide.

    At patch/pixel granularity exactly floor(ratio * N) positions are
    masked (the token counts of the published masking-ratio sweep, e.g.
    28 of 144 at 20%).  At cluster granularity floor(ratio * K) whole
    clusters are masked, so masked positions always cover complete
    prediction units.  Deterministic given the seed.
    """
    if granularity not in GRANULARITIES:
        raise SelectionError(f"unknown granularity {granularity!r}")
    if not 0.0 < ratio <= 1.0:
        raise SelectionError(f"ratio must be in (0, 1], got {ratio}")
    n = plan.n
    rng = np.random.default_rng(rng_seed)
    masked = np.zeros(n, dtype=bool)
    if granularity == "cluster":
        k = plan.num_clusters
        count = int(ratio * k)
        if count == 0:
            raise SelectionError(
                f"ratio {ratio} selects no clusters out of {k}")
        chosen = rng.choice(k, size=count, replace=False)
        size = plan.cluster_size
        for c in chosen:
            masked[c * size:(c + 1) * size] = True
    else:
        count = int(ratio * n)
        if count == 0:
            raise SelectionError(f"ratio {ratio} selects no tokens out of {n}")
        chosen = rng.choice(n, size=count, replace=False)
        masked[chosen] = True
    return MaskSelection(masked=masked, ratio=ratio, granularity=granularity)


def full_visibility(n: int) -> MaskSelection:
    """Selection that hides nothing (next-unit mode and fine-tuning)."""
    return MaskSelection(masked=np.zeros(n, dtype=bool), ratio=0.0,
                         granularity="patch")
