"""Per-object binary mask projection.

Masks use the same per-pixel ray geometry as the renderer: a pixel
belongs to an object's mask iff the ray through its center has positive
interior path length.  Masks from different objects overlap freely, as
transmissive imaging demands.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anatomy_io import SurfaceMesh
from .carm_geometry import CArmCamera
from .drr_renderer import tool_path_image


@dataclass
class MaskEntry:
    key: str
    class_id: int
    name: str
    kind: str  # organ | tool | group
    mask: np.ndarray  # (H, W) bool

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class MaskSet:
    entries: list
    image_dims: tuple  # (W, H)

    def by_key(self, key: str) -> MaskEntry:
        for e in self.entries:
            if e.key == key:
                return e
        raise KeyError(key)

    def keys(self) -> list:
        return [e.key for e in self.entries]


def project_mask(mesh: SurfaceMesh, cam: CArmCamera) -> np.ndarray:
    """(H, W) silhouette of the mesh interior under the camera.

    Membership is decided by the ray through each pixel center; no
    anti-aliasing.  Independent of any other scene content.
    """
    return tool_path_image(mesh, cam) > 0.0


def project_all(meshes, cam: CArmCamera, min_area_px: int = 0) -> MaskSet:
    """Project every mesh independently, keeping masks with area >= min_area_px.

    ``meshes`` is a sequence of SurfaceMesh; entries keep input order and
    get unique keys ``kind:class_id`` (suffixed on repeats).
    """
    if min_area_px < 0:
        raise ValueError("min_area_px must be >= 0")
    entries = []
    seen = {}
    for mesh in meshes:
        mask = project_mask(mesh, cam)
        if mask.sum() < min_area_px:
            continue
        base = f"{mesh.kind}:{mesh.class_id}"
        n = seen.get(base, 0)
        seen[base] = n + 1
        key = base if n == 0 else f"{base}:{n}"
        entries.append(MaskEntry(key=key, class_id=mesh.class_id,
                                 name=mesh.name, kind=mesh.kind, mask=mask))
    return MaskSet(entries=entries, image_dims=tuple(cam.image_dims))
