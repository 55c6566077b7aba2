"""Procedural voxel anatomy for the demo cholecystectomy scene.

Organs are labelled voxel sets on a regular grid, each voxel split into six
tets. The gallbladder rests on the liver and is joined to it only through a
layer of fat: every liver voxel sharing a vertex with a gallbladder voxel is
relabelled fat, so removing the fat separates the two organs. Cystic duct and
artery run forward from the gallbladder neck with their far ends pinned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .labels import LABELS
from .tetmesh import TetMesh, _hex_cells_to_tets

H = 0.006  # voxel edge, m


@dataclass
class Anatomy:
    mesh: TetMesh
    pinned: np.ndarray  # (n,) bool
    voxel_size: float
    grid_shape: tuple[int, int, int]


def _label_grid(shape=(15, 16, 4)) -> np.ndarray:
    nx, ny, nz = shape
    g = np.zeros(shape, np.int16)
    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ci = (nx - 1) / 2.0
    # Liver: two-layer slab with rounded corners, behind the duct region (j >= 4).
    liver = ((i - ci) / (ci + 0.6)) ** 2 + ((j - 9.5) / 6.6) ** 2 <= 1.0
    g[liver & (k <= 1) & (j >= 4)] = LABELS["liver"]
    # Gallbladder: two-layer ellipsoid resting on the liver.
    gb = ((i - ci) / 2.3) ** 2 + ((j - 9.0) / 4.6) ** 2 <= 1.0
    g[gb & (k >= 2) & (k <= 3)] = LABELS["gallbladder"]
    # Duct and artery leave the neck at k = 3 (one layer clear of the liver top).
    ci_int = int(round(ci))
    g[ci_int - 1, 0:5, 3] = LABELS["cystic_duct"]
    g[ci_int + 2, 1:6, 3] = LABELS["cystic_artery"]
    # Fat: liver voxels touching the gallbladder.
    gbm = g == LABELS["gallbladder"]
    touch = ndimage.binary_dilation(gbm, structure=np.ones((3, 3, 3), bool))
    g[touch & (g == LABELS["liver"])] = LABELS["fat"]
    return g


def cholecystectomy_anatomy(shape=(15, 16, 4), voxel: float = H) -> Anatomy:
    grid = _label_grid(shape)
    cells = np.argwhere(grid > 0)
    vshape = tuple(s + 1 for s in shape)
    tets = _hex_cells_to_tets(cells, vshape)
    labels = np.repeat(grid[tuple(cells.T)], 6).astype(np.int16)
    used, inverse = np.unique(tets.ravel(), return_inverse=True)
    tets = inverse.reshape(-1, 4)
    vi, vj, vk = np.unravel_index(used, vshape)
    ci = shape[0] / 2.0
    verts = np.stack([(vi - ci) * voxel, vj * voxel, vk * voxel], axis=1)
    mesh = TetMesh(verts, tets, labels)

    pinned = np.zeros(len(verts), bool)
    # Liver base rests on the retroperitoneum.
    on_liver = np.zeros(len(verts), bool)
    on_liver[tets[labels == LABELS["liver"]].ravel()] = True
    pinned |= on_liver & (vk == 0)
    # Far ends of the duct and artery (toward the common bile duct / hepatic artery).
    for name in ("cystic_duct", "cystic_artery"):
        sel = tets[labels == LABELS[name]].ravel()
        jmin = vj[sel].min()
        pinned[sel[vj[sel] == jmin]] = True
    return Anatomy(mesh, pinned, voxel, shape)
