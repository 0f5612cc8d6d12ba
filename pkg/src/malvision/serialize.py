"""Image serialization: patch grids, cluster plans, and token embedding.

Images are dense (C, H, W) arrays.  A patch is a non-overlapping P x P
pixel block flattened to a vector of length P*P*C (pixel raster order,
channels last).  Clusters group spatially adjacent patches into one
autoregressive prediction unit; a ClusterPlan fixes how the 2D cluster
grid is flattened into a 1D visual sentence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GeometryError

ORDERS = ("row_forward", "row_backward", "col_forward", "col_backward", "random")


@dataclass(frozen=True)
class PatchGrid:
    """Flattened patches of one image plus the grid geometry."""

    patches: np.ndarray  # (N, P*P*C)
    grid_h: int
    grid_w: int
    patch: int
    channels: int

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class ClusterPlan:
    """Cluster geometry plus the serialization permutation.

    ``perm[i]`` is the raster patch index occupying serialized position i.
    Patches of one cluster form a contiguous run of length ``cluster_size``
    in ``perm``; ``cluster_of[r]`` maps a raster patch index to the
    serialized cluster id (0-based in prediction order).
    """

    grid_h: int
    grid_w: int
    cluster_h: int
    cluster_w: int
    order: str
    perm: np.ndarray       # (N,) int64
    cluster_of: np.ndarray  # (N,) int64, indexed by raster patch id
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def num_clusters(self) -> int:
        return (self.grid_h // self.cluster_h) * (self.grid_w // self.cluster_w)

    @property
    def cluster_size(self) -> int:
        return self.cluster_h * self.cluster_w

    def positions_of_cluster(self, k: int) -> np.ndarray:
        """Serialized positions belonging to cluster k (a contiguous run)."""
        s = self.cluster_size
        return np.arange(k * s, (k + 1) * s, dtype=np.int64)

    def cluster_of_position(self, i: int) -> int:
        return i // self.cluster_size


def patchify(img: np.ndarray, patch: int) -> PatchGrid:
    """Split a (C, H, W) image into flattened non-overlapping patches."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise DimensionError(f"expected (C, H, W) image, got shape {img.shape}")
    c, h, w = img.shape
    if patch < 1 or h % patch or w % patch:
        raise GeometryError(
            f"image extents {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    # (C, gh, P, gw, P) -> (gh, gw, P, P, C) -> (N, P*P*C)
    blocks = img.reshape(c, gh, patch, gw, patch)
    patches = blocks.transpose(1, 3, 2, 4, 0).reshape(gh * gw, patch * patch * c)
    return PatchGrid(patches=np.ascontiguousarray(patches), grid_h=gh,
                     grid_w=gw, patch=patch, channels=c)


def unpatchify(grid: PatchGrid, patch: int, channels: int, height: int,
               width: int) -> np.ndarray:
    """Inverse of patchify; exact for any input that patchify produced."""
    if patch != grid.patch or channels != grid.channels:
        raise GeometryError("patch/channel geometry does not match the grid")
    if height != grid.grid_h * patch or width != grid.grid_w * patch:
        raise GeometryError(
            f"target extents {height}x{width} do not match grid "
            f"{grid.grid_h}x{grid.grid_w} of {patch}px patches")
    return tokens_to_image(grid.patches, grid.grid_h, grid.grid_w, patch, channels)


def tokens_to_image(tokens: np.ndarray, grid_h: int, grid_w: int, patch: int,
                    channels: int) -> np.ndarray:
    """Reassemble per-patch vectors in raster order into a (C, H, W) image."""
    tokens = np.asarray(tokens)
    if tokens.shape != (grid_h * grid_w, patch * patch * channels):
        raise GeometryError(
            f"token array {tokens.shape} does not match "
            f"{grid_h}x{grid_w} patches of {patch}px x {channels}ch")
    blocks = tokens.reshape(grid_h, grid_w, patch, patch, channels)
    return np.ascontiguousarray(blocks.transpose(4, 0, 2, 1, 3).reshape(
        channels, grid_h * patch, grid_w * patch))


def build_cluster_plan(grid_h: int, grid_w: int, cluster_h: int, cluster_w: int,
                       order: str, seed: int | None = None) -> ClusterPlan:
    """Sequence the cluster grid per ``order`` and derive the patch permutation.

    Within each cluster, patches keep raster order.  ``seed`` is required
    for (and only for) the random order; the resulting permutation is a
    fixed property of the plan, reproducible from the seed.
    """
    if order not in ORDERS:
        raise GeometryError(f"unknown prediction order {order!r}")
    if cluster_h < 1 or cluster_w < 1 or grid_h % cluster_h or grid_w % cluster_w:
        raise GeometryError(
            f"grid {grid_h}x{grid_w} not divisible by cluster {cluster_h}x{cluster_w}")
    if order == "random" and seed is None:
        raise GeometryError("random order requires a seed")
    if order != "random":
        seed = None

    rows = grid_h // cluster_h
    cols = grid_w // cluster_w
    if order == "row_forward":
        coords = [(cy, cx) for cy in range(rows) for cx in range(cols)]
    elif order == "row_backward":
        coords = [(cy, cx) for cy in range(rows) for cx in reversed(range(cols))]
    elif order == "col_forward":
        coords = [(cy, cx) for cx in range(cols) for cy in range(rows)]
    elif order == "col_backward":
        coords = [(cy, cx) for cx in range(cols) for cy in reversed(range(rows))]
    else:
        base = [(cy, cx) for cy in range(rows) for cx in range(cols)]
        rng = np.random.default_rng(seed)
        coords = [base[i] for i in rng.permutation(len(base))]

    n = grid_h * grid_w
    perm = np.empty(n, dtype=np.int64)
    cluster_of = np.empty(n, dtype=np.int64)
    pos = 0
    for cid, (cy, cx) in enumerate(coords):
        for py in range(cluster_h):
            for px in range(cluster_w):
                raster = (cy * cluster_h + py) * grid_w + (cx * cluster_w + px)
                perm[pos] = raster
                cluster_of[raster] = cid
                pos += 1
    return ClusterPlan(grid_h=grid_h, grid_w=grid_w, cluster_h=cluster_h,
                       cluster_w=cluster_w, order=order, perm=perm,
                       cluster_of=cluster_of, seed=seed)


def embed(grid: PatchGrid, plan: ClusterPlan, w: np.ndarray,
          pos: np.ndarray) -> np.ndarray:
    """Project patches and add positional embeddings, in serialized order.

    Token i is ``w @ patches[perm[i]] + pos[perm[i]]``: the positional
    embedding follows the patch's raster location, so reordering the
    prediction sequence never changes a patch's positional code.
    """
    if plan.n != grid.n or plan.grid_h != grid.grid_h or plan.grid_w != grid.grid_w:
        raise GeometryError("cluster plan does not match the patch grid")
    w = np.asarray(w)
    pos = np.asarray(pos)
    if w.shape[1] != grid.patches.shape[1]:
        raise DimensionError(
            f"projection expects patch dim {grid.patches.shape[1]}, got {w.shape}")
    if pos.shape != (grid.n, w.shape[0]):
        raise DimensionError(
            f"positional table must be ({grid.n}, {w.shape[0]}), got {pos.shape}")
    return grid.patches[plan.perm] @ w.T + pos[plan.perm]


def cluster_targets(grid: PatchGrid, plan: ClusterPlan) -> np.ndarray:
    """Raw regression targets: concatenated pixels of each cluster.

    Returns (K, cluster_size * P*P*C) with clusters in serialized order and
    patches in raster order inside each cluster.
    """
    if plan.n != grid.n:
        raise GeometryError("cluster plan does not match the patch grid")
    ordered = grid.patches[plan.perm]
    k = plan.num_clusters
    return ordered.reshape(k, plan.cluster_size * grid.patches.shape[1])


def normalize_patches(patches: np.ndarray, mode: str = "patch",
                      eps: float = 1e-6) -> np.ndarray:
    """Standardize each patch vector to zero mean / unit variance.

    ``mode='raw'`` returns the input unchanged; the l2 regression loss is
    agnostic to target scaling, so both modes are valid configurations.
    """
    if mode == "raw":
        return patches
    if mode != "patch":
        raise GeometryError(f"unknown target normalization {mode!r}")
    mu = patches.mean(axis=-1, keepdims=True)
    sd = patches.std(axis=-1, keepdims=True)
    return (patches - mu) / (sd + eps)
