"""Voxelization, BEV scatter, axis-aligned IoU and anchor box coding."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .synthdata import Box3D, Frame, in_range


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Occupied voxels of one frame.

    ``coords`` holds the (ix, iy, iz) of each occupied voxel in ascending
    linear order; ``point_rows``/``point_voxel`` list the kept point rows
    (sorted by voxel) and their voxel index.
    """

    global_range: tuple
    voxel_size: tuple
    dims: tuple
    coords: np.ndarray
    point_rows: np.ndarray
    point_voxel: np.ndarray

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    @property
    def assignments(self) -> dict:
        starts = np.searchsorted(self.point_voxel, np.arange(self.num_voxels + 1))
        return {tuple(int(v) for v in self.coords[g]): self.point_rows[starts[g]:starts[g + 1]].tolist()
                for g in range(self.num_voxels)}

    def voxel_bounds(self, g: int):
        lo = np.asarray(self.global_range[:3]) + self.coords[g] * np.asarray(self.voxel_size)
        return lo, lo + np.asarray(self.voxel_size)


def grid_dims(global_range, voxel_size) -> tuple:
    r = np.asarray(global_range, dtype=np.float64)
    ext = (r[3:] - r[:3]) / np.asarray(voxel_size, dtype=np.float64)
    # snap 187.99999999999997 style quotients before ceil
    return tuple(int(math.ceil(round(e, 9))) for e in ext)


def voxelize(frame: Frame, global_range, voxel_size, max_points_per_voxel: int = 16) -> VoxelGrid:
    """Assign in-range points to voxels, keeping the first ``max_points_per_voxel`` per voxel."""
    global_range = tuple(float(v) for v in global_range)
    voxel_size = tuple(float(v) for v in voxel_size)
    if min(voxel_size) <= 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    dims = grid_dims(global_range, voxel_size)
    pts = frame.points
    rows = np.flatnonzero(in_range(pts, global_range))
    idx = np.floor((pts[rows, :3] - np.asarray(global_range[:3])) / np.asarray(voxel_size)).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(dims) - 1)
    lin = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    order = np.lexsort((rows, lin))
    lin, rows, idx = lin[order], rows[order], idx[order]
    starts = np.r_[True, lin[1:] != lin[:-1]] if len(lin) else np.zeros(0, dtype=bool)
    group = np.cumsum(starts) - 1
    first = np.flatnonzero(starts)
    rank = np.arange(len(lin)) - first[group] if len(lin) else np.zeros(0, dtype=np.int64)
    keep = rank < max_points_per_voxel
    coords = idx[starts]
    return VoxelGrid(global_range, voxel_size, dims, coords, rows[keep], group[keep])


def bev_cell_index(grid: VoxelGrid) -> np.ndarray:
    """Flat (ix * W + iy) BEV cell per occupied voxel."""
    return grid.coords[:, 0] * grid.dims[1] + grid.coords[:, 1]


@dataclass(eq=False)
class BEVGrid:
    """Features on the H x W plane; ``features`` is a [1, C, H, W] tensor."""

    H: int
    W: int
    features: dn.Tensor

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def values(self) -> np.ndarray:
        """H x W x C view for inspection."""
        return self.features.value[0].transpose(1, 2, 0)


def bev_scatter(grid: VoxelGrid, voxel_features: dn.Tensor) -> BEVGrid:
    """Collapse voxel features over z by elementwise max and place them on the BEV plane."""
    if voxel_features.shape[0] != grid.num_voxels:
        raise ValueError(f"bev_scatter: {voxel_features.shape[0]} feature rows for {grid.num_voxels} voxels")
    H, W = grid.dims[0], grid.dims[1]
    C = voxel_features.shape[1]
    cells = bev_cell_index(grid)
    if grid.dims[2] == 1:
        uniq, pooled = cells, voxel_features
    else:
        order = np.argsort(cells, kind="stable")
        sc = cells[order]
        uniq, seg = np.unique(sc, return_inverse=True)
        pooled = dn.segment_max(voxel_features, order, seg, len(uniq))
    flat = dn.scatter_rows(pooled, uniq, H * W)
    feats = dn.reshape(dn.transpose(dn.reshape(flat, (H, W, C)), (2, 0, 1)), (1, C, H, W))
    return BEVGrid(H, W, feats)


# ---------------------------------------------------------------- IoU

def _overlap(ac, al, bc, bl):
    return np.maximum(0.0, np.minimum(ac + al / 2, bc + bl / 2) - np.maximum(ac - al / 2, bc - bl / 2))


def iou_bev(a: Box3D, b: Box3D) -> float:
    ix = _overlap(a.center[0], a.size[0], b.center[0], b.size[0])
    iy = _overlap(a.center[1], a.size[1], b.center[1], b.size[1])
    inter = ix * iy
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    return float(inter / union) if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    ix = _overlap(a.center[0], a.size[0], b.center[0], b.size[0])
    iy = _overlap(a.center[1], a.size[1], b.center[1], b.size[1])
    iz = _overlap(a.center[2], a.size[2], b.center[2], b.size[2])
    inter = ix * iy * iz
    union = np.prod(a.size) + np.prod(b.size) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a, b, mode: str = "bev") -> np.ndarray:
    """Pairwise IoU of [M, >=6] and [K, >=6] box arrays (cx, cy, cz, l, w, h, ...)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((len(a), len(b)))
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    axes = (0, 1) if mode == "bev" else (0, 1, 2)
    inter = np.ones((len(a), len(b)))
    for ax in axes:
        inter *= _overlap(a[:, None, ax], a[:, None, ax + 3], b[None, :, ax], b[None, :, ax + 3])
    vol_a = np.prod(a[:, [ax + 3 for ax in axes]], axis=1)
    vol_b = np.prod(b[:, [ax + 3 for ax in axes]], axis=1)
    union = vol_a[:, None] + vol_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


# ---------------------------------------------------------------- box coding

def encode_array(gt, anchors) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    an = np.asarray(anchors, dtype=np.float64)
    if np.any(gt[..., 3:6] <= 0) or np.any(an[..., 3:6] <= 0):
        raise ValueError("box sizes must be positive for encoding")
    d = np.empty(np.broadcast_shapes(gt[..., :6].shape, an[..., :6].shape))
    d[..., :3] = (gt[..., :3] - an[..., :3]) / an[..., 3:6]
    d[..., 3:6] = np.log(gt[..., 3:6] / an[..., 3:6])
    return d


def decode_array(deltas, anchors) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64)
    an = np.asarray(anchors, dtype=np.float64)
    if np.any(an[..., 3:6] <= 0):
        raise ValueError("anchor sizes must be positive for decoding")
    out = np.empty(np.broadcast_shapes(d[..., :6].shape, an[..., :6].shape))
    out[..., :3] = d[..., :3] * an[..., 3:6] + an[..., :3]
    out[..., 3:6] = np.exp(np.clip(d[..., 3:6], -10, 10)) * an[..., 3:6]
    return out


def box_encode(gt: Box3D, anchor: Box3D) -> tuple:
    return tuple(float(v) for v in encode_array(gt.as_array(), anchor.as_array()))


def box_decode(deltas, anchor: Box3D) -> Box3D:
    arr = decode_array(np.asarray(deltas), anchor.as_array())
    return Box3D(tuple(arr[:3]), tuple(arr[3:6]), anchor.class_id)
