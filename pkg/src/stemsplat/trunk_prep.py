"""Split a scored cloud into per-tree trunks and convert to height above ground."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .opacity_integral import ScoredPointCloud
from .scene_io import GroundLookupError, TerrainModel, TrunkLabelSet


@dataclass(frozen=True, eq=False)
class TrunkInstance:
    tree_id: int
    points: np.ndarray        # (N, 3) world coordinates
    reliability: np.ndarray   # (N,)
    ground: Optional[float] = None

    def __len__(self):
        return len(self.points)

    @property
    def heights(self):
        if self.ground is None:
            raise ValueError(f"tree {self.tree_id}: ground elevation not attached")
        return self.points[:, 2] - self.ground

    @property
    def centroid_xy(self):
        return self.points[:, :2].mean(axis=0)


def split_instances(cloud: ScoredPointCloud, labels: TrunkLabelSet) -> list[TrunkInstance]:
    """One instance per tree id, in ascending id order; unlabeled points dropped."""
    labels.check(len(cloud))
    if len(labels) == 0:
        return []
    order = np.argsort(labels.indices, kind="stable")
    idx, tid = labels.indices[order], labels.tree_ids[order]
    out = []
    for t in np.unique(tid):
        sel = idx[tid == t]
        if len(sel):
            out.append(TrunkInstance(int(t), cloud.points[sel], cloud.reliability[sel]))
    return out


def attach_ground(instance: TrunkInstance, terrain: TerrainModel, method="nearest") -> TrunkInstance:
    """Look up ground elevation at the mean trunk (x, y)."""
    x, y = instance.centroid_xy
    z = terrain.nearest(x, y) if method == "nearest" else terrain.bilinear(x, y)
    if z is None:
        raise GroundLookupError(
            f"tree {instance.tree_id}: no terrain value at ({x:.3f}, {y:.3f})", tree_id=instance.tree_id)
    return replace(instance, ground=z)


def write_instance_ply(instance: TrunkInstance, path):
    """Per-tree PLY (x, y, z, reliability, height) for inspection."""
    from plyfile import PlyData, PlyElement
    arr = np.empty(len(instance), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8"),
                                         ("reliability", "f4"), ("height", "f4")])
    arr["x"], arr["y"], arr["z"] = instance.points.T
    arr["reliability"] = instance.reliability
    arr["height"] = instance.heights if instance.ground is not None else np.nan
    PlyData([PlyElement.describe(arr, "vertex")], byte_order="<").write(str(path))
