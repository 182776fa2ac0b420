"""Cutting volumes into flattened P x P x C patches and putting them back."""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mrdenoise.errors import CoverageError, DimensionError


@dataclass
class PatchSet:
    """Flattened patches with the (row, col) origin of each one.

    ``patches`` has shape (K, P*P*C), each row the row-major flattening of
    ``volume[r:r+P, c:c+P, :]``.
    """

    patches: np.ndarray
    origins: np.ndarray
    source_shape: tuple
    P: int

    def __len__(self):
        return len(self.patches)

    def with_patches(self, patches):
        patches = np.asarray(patches)
        if patches.shape != self.patches.shape:
            raise DimensionError(f"replacement patches {patches.shape} != {self.patches.shape}")
        return PatchSet(patches, self.origins, self.source_shape, self.P)


def grid_starts(dim, P, stride, cover_edges=False):
    """Start offsets ``0, stride, 2*stride, ...`` with ``start + P <= dim``.

    With ``cover_edges`` a final start at ``dim - P`` is appended when the
    regular grid stops short of the border.
    """
    if dim < P:
        raise DimensionError(f"axis of size {dim} is smaller than patch size {P}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    starts = list(range(0, dim - P + 1, stride))
    if cover_edges and starts[-1] != dim - P:
        starts.append(dim - P)
    return starts


def patchify(volume, P, stride, cover_edges=False):
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise DimensionError(f"volume must be (H, W, C), got {volume.shape}")
    H, W, C = volume.shape
    rows = grid_starts(H, P, stride, cover_edges)
    cols = grid_starts(W, P, stride, cover_edges)
    windows = sliding_window_view(volume, (P, P), axis=(0, 1))  # (H-P+1, W-P+1, C, P, P)
    block = windows[np.ix_(rows, cols)]  # (nr, nc, C, P, P)
    patches = np.ascontiguousarray(block.transpose(0, 1, 3, 4, 2)).reshape(len(rows) * len(cols), P * P * C)
    origins = np.array([(r, c) for r in rows for c in cols], dtype=np.int64)
    return PatchSet(patches, origins, (H, W, C), P)


def assemble(patchset):
    """Average overlapping patches back into a volume.

    Sums and counts are accumulated in float64 in patch order, then divided.
    """
    H, W, C = patchset.source_shape
    P = patchset.P
    acc = np.zeros((H, W, C), dtype=np.float64)
    count = np.zeros((H, W), dtype=np.int64)
    blocks = np.asarray(patchset.patches).reshape(-1, P, P, C)
    for (r, c), blk in zip(patchset.origins, blocks):
        acc[r:r + P, c:c + P] += blk
        count[r:r + P, c:c + P] += 1
    if np.any(count == 0):
        r, c = np.argwhere(count == 0)[0]
        raise CoverageError(f"voxel ({r}, {c}) is not covered by any patch")
    return (acc / count[:, :, None]).astype(np.float32)
