"""Part-disentanglement and cluster-quality metrics.

Voxel occupancy IoU quantifies geometric overlap between parts on a shared
grid over the canonical cube [-1, 1]^3 (lower is better disentanglement);
the adjusted Rand index scores cluster assignments against ground truth.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass
class VoxelOccupancy:
    """Binary occupancy of one part on a resolution^3 grid."""

    resolution: int
    bits: np.ndarray
    clamped: int = 0

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass
class IoUReport:
    pairwise: list[tuple[int, int, float]]
    iou_max: float
    iou_mean_top20: float
    degenerate_pairs: int = 0

    def write_csv(self, fh) -> None:
        fh.write("part_a,part_b,iou\n")
        for a, b, v in self.pairwise:
            fh.write(f"{a},{b},{format(v, '.17g')}\n")
        fh.write(
            f"iou_max,iou_mean_top20,{format(self.iou_max, '.17g')},"
            f"{format(self.iou_mean_top20, '.17g')}\n"
        )


def voxelize(points, resolution: int = 64) -> VoxelOccupancy:
    """Bin 3-D points from [-1, 1]^3 into a binary occupancy grid.

    Cell index = floor((coord + 1) / 2 * resolution), clamped into range;
    points outside the cube are clamped and counted on the result.
    """
    if resolution < 1:
        raise ParameterError(f"resolution must be >= 1, got {resolution}")
    pts = np.asarray(points, dtype=np.float64)
    bits = np.zeros((resolution,) * 3, dtype=bool)
    if pts.size == 0:
        warnings.warn("voxelize: empty point set", UserWarning, stacklevel=2)
        return VoxelOccupancy(resolution, bits, 0)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"points must be (n, 3), got {pts.shape}")
    outside = int(np.any((pts < -1.0) | (pts > 1.0), axis=1).sum())
    idx = np.floor((np.clip(pts, -1.0, 1.0) + 1.0) / 2.0 * resolution).astype(int)
    idx = np.clip(idx, 0, resolution - 1)
    bits[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelOccupancy(resolution, bits, outside)


def voxel_iou(a: VoxelOccupancy, b: VoxelOccupancy) -> float:
    """|a and b| / |a or b|, with the both-empty 0/0 case defined as 0."""
    if a.resolution != b.resolution:
        raise DimensionError(
            f"resolution mismatch: {a.resolution} vs {b.resolution}"
        )
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 0.0
    inter = int(np.logical_and(a.bits, b.bits).sum())
    return inter / union


def pairwise_iou(parts: list[VoxelOccupancy]) -> IoUReport:
    """All N(N-1)/2 pairwise IoUs plus max and top-20 mean summaries."""
    pairwise: list[tuple[int, int, float]] = []
    degenerate = 0
    for a in range(len(parts)):
        for b in range(a + 1, len(parts)):
            if parts[a].count() == 0 and parts[b].count() == 0:
                degenerate += 1
            pairwise.append((a, b, voxel_iou(parts[a], parts[b])))
    values = sorted((v for _, _, v in pairwise), reverse=True)
    iou_max = values[0] if values else 0.0
    top = values[: min(20, len(values))]
    mean_top = float(np.mean(top)) if top else 0.0
    return IoUReport(pairwise, iou_max, mean_top, degenerate)


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected partition agreement from the contingency table."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"label lengths differ: {a.shape[0]} vs {b.shape[0]}")
    n = a.shape[0]
    if n < 2:
        raise DimensionError("need at least 2 samples")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table.astype(np.float64)).sum()
    sum_rows = comb2(table.sum(axis=1).astype(np.float64)).sum()
    sum_cols = comb2(table.sum(axis=0).astype(np.float64)).sum()
    total = comb2(float(n))
    expected = sum_rows * sum_cols / total
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0  # both partitions trivial (single cluster each)
    return float((sum_cells - expected) / (max_index - expected))
