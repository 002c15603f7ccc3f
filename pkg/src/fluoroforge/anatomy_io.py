"""CT volume, label volume, surface mesh, and object catalog I/O.

Volumes use a plain JSON header (``<name>.volhdr``) next to raw
little-endian int16 arrays stored x-fastest.  Meshes are binary STL or a
restricted OBJ subset (``v``/``f`` lines, triangular 1-based faces).
Loaded objects are immutable by convention and safe to share across
worker threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CatalogError, MeshFormatError, VolumeFormatError, WatertightnessError

HU_MIN = -1024
HU_MAX = 3071

# Vertices closer than this are merged on load (mm).
VERTEX_MERGE_TOL_MM = 1e-6

# Label regions below this voxel count cannot be surfaced meaningfully.
MIN_SURFACE_VOXELS = 8


@dataclass(frozen=True)
class CtVolume:
    """3D Hounsfield field with spacing/origin and optional labels.

    ``hu`` is indexed ``[x, y, z]``; voxel ``(i, j, k)`` is centered at
    ``origin + (i, j, k) * spacing`` in world millimeters.
    """

    hu: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    labels: Optional[np.ndarray] = None

    @property
    def dims(self) -> tuple:
        return self.hu.shape

    def __post_init__(self):
        if self.hu.ndim != 3:
            raise VolumeFormatError(f"hu must be 3-D, got shape {self.hu.shape}")
        if np.any(np.asarray(self.spacing) <= 0):
            raise VolumeFormatError(f"non-positive spacing {self.spacing}")
        if self.labels is not None and self.labels.shape != self.hu.shape:
            raise VolumeFormatError(
                f"label dims {self.labels.shape} != hu dims {self.hu.shape}"
            )

    def support_box(self) -> tuple:
        """World-space box spanned by the outermost voxel centers."""
        lo = np.asarray(self.origin, dtype=float)
        hi = lo + (np.array(self.hu.shape) - 1) * np.asarray(self.spacing, dtype=float)
        return lo, hi

    def present_class_ids(self) -> list:
        if self.labels is None:
            return []
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != 0]


@dataclass(frozen=True)
class SurfaceMesh:
    """Watertight triangle mesh in world millimeters."""

    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    kind: str = "organ"  # organ | tool
    class_id: int = 0
    description: str = ""
    material: Optional[str] = None

    def __post_init__(self):
        if len(self.triangles) == 0:
            raise MeshFormatError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshFormatError("triangle index out of range")

    @property
    def name(self) -> str:
        return self.description or f"{self.kind}_{self.class_id}"

    def bounds(self) -> tuple:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def translated(self, offset) -> "SurfaceMesh":
        return SurfaceMesh(
            vertices=self.vertices + np.asarray(offset, dtype=float),
            triangles=self.triangles,
            kind=self.kind,
            class_id=self.class_id,
            description=self.description,
            material=self.material,
        )

    def transformed(self, rotation, translation) -> "SurfaceMesh":
        """Rotate about the vertex centroid, then translate the centroid."""
        c = self.vertices.mean(axis=0)
        verts = (self.vertices - c) @ np.asarray(rotation, dtype=float).T
        verts = verts + np.asarray(translation, dtype=float)
        return SurfaceMesh(
            vertices=verts,
            triangles=self.triangles,
            kind=self.kind,
            class_id=self.class_id,
            description=self.description,
            material=self.material,
        )


@dataclass(frozen=True)
class ObjectCatalog:
    """Organ taxonomy, tool table, and named organ groups."""

    organs: dict  # class_id -> {"name": str, "description": str}
    tools: dict  # tool_id -> {"name", "description", "mesh", "material"}
    groups: dict  # group name -> list of organ class ids

    def __post_init__(self):
        for gname, members in self.groups.items():
            for cid in members:
                if cid not in self.organs:
                    raise CatalogError(f"group {gname!r} references unknown organ id {cid}")

    def organ_description(self, class_id: int) -> str:
        try:
            return self.organs[class_id]["description"]
        except KeyError:
            raise CatalogError(f"unknown organ class id {class_id}") from None

    def groups_with_members(self, present_ids) -> dict:
        """Groups restricted to members present in ``present_ids`` (non-empty only)."""
        present = set(present_ids)
        out = {}
        for gname, members in self.groups.items():
            hit = [cid for cid in members if cid in present]
            if hit:
                out[gname] = hit
        return out


# ---------------------------------------------------------------------------
# Volume I/O
# ---------------------------------------------------------------------------


def _canonical_header(vol: CtVolume, name: str) -> bytes:
    hdr = {
        "dims": [int(d) for d in vol.hu.shape],
        "spacing_mm": [float(s) for s in vol.spacing],
        "origin_mm": [float(o) for o in vol.origin],
        "dtype": "int16",
        "data": f"{name}.raw",
    }
    if vol.labels is not None:
        hdr["labels"] = f"{name}.lbl.raw"
    return (json.dumps(hdr, sort_keys=True, separators=(",", ":")) + "\n").encode("ascii")


def volume_to_bytes(vol: CtVolume, name: str) -> dict:
    """Serialize to the on-disk byte layout: header, raw HU, optional labels."""
    out = {
        "header": _canonical_header(vol, name),
        "raw": np.ascontiguousarray(vol.hu.astype("<i2"), dtype="<i2").tobytes(order="F"),
    }
    if vol.labels is not None:
        out["labels"] = np.ascontiguousarray(vol.labels.astype("<i2"), dtype="<i2").tobytes(order="F")
    return out


def volume_from_bytes(header: bytes, raw: bytes, labels: Optional[bytes] = None) -> CtVolume:
    try:
        hdr = json.loads(header.decode("ascii"))
        dims = [int(d) for d in hdr["dims"]]
        spacing = np.array([float(s) for s in hdr["spacing_mm"]], dtype=float)
        origin = np.array([float(o) for o in hdr["origin_mm"]], dtype=float)
        dtype = hdr["dtype"]
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"malformed volume header: {e}") from e
    if dtype != "int16":
        raise VolumeFormatError(f"unknown element type {dtype!r}")
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeFormatError(f"bad dims {dims}")
    if np.any(spacing <= 0):
        raise VolumeFormatError(f"non-positive spacing {spacing.tolist()}")
    n = dims[0] * dims[1] * dims[2]
    if len(raw) != 2 * n:
        raise VolumeFormatError(
            f"raw size mismatch: header declares {n} int16 values, file holds {len(raw) // 2}"
        )
    hu = np.frombuffer(raw, dtype="<i2").reshape(dims, order="F")
    hu = np.clip(hu, HU_MIN, HU_MAX)
    lbl = None
    if labels is not None:
        if len(labels) != 2 * n:
            raise VolumeFormatError(
                f"label size mismatch: expected {n} int16 values, file holds {len(labels) // 2}"
            )
        lbl = np.frombuffer(labels, dtype="<i2").reshape(dims, order="F").astype(np.int16)
    return CtVolume(hu=hu.astype(np.int16), spacing=spacing, origin=origin, labels=lbl)


def load_volume(path, catalog: Optional[ObjectCatalog] = None) -> CtVolume:
    """Load a ``.volhdr`` volume; HU are clamped to [-1024, 3071] on load.

    When ``catalog`` is given, every nonzero label id must appear in its
    organ table.
    """
    path = Path(path)
    if not path.exists():
        raise VolumeFormatError(f"missing volume header {path}")
    header = path.read_bytes()
    try:
        hdr = json.loads(header.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"malformed volume header {path}: {e}") from e
    raw_path = path.parent / hdr.get("data", "")
    if not raw_path.exists():
        raise VolumeFormatError(f"missing raw file {raw_path}")
    labels = None
    if "labels" in hdr:
        lbl_path = path.parent / hdr["labels"]
        if not lbl_path.exists():
            raise VolumeFormatError(f"missing label file {lbl_path}")
        labels = lbl_path.read_bytes()
    vol = volume_from_bytes(header, raw_path.read_bytes(), labels)
    if catalog is not None and vol.labels is not None:
        unknown = [cid for cid in vol.present_class_ids() if cid not in catalog.organs]
        if unknown:
            raise VolumeFormatError(f"label ids {unknown} missing from organ table")
    return vol


def write_volume(vol: CtVolume, header_path) -> Path:
    """Write canonical ``.volhdr`` + raw files; returns the header path.

    Writing is canonical: loading a file and re-writing it reproduces the
    canonicalized original bit for bit.
    """
    header_path = Path(header_path)
    if header_path.suffix != ".volhdr":
        header_path = header_path.with_suffix(".volhdr")
    name = header_path.stem
    blobs = volume_to_bytes(vol, name)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_bytes(blobs["header"])
    (header_path.parent / f"{name}.raw").write_bytes(blobs["raw"])
    if "labels" in blobs:
        (header_path.parent / f"{name}.lbl.raw").write_bytes(blobs["labels"])
    return header_path


# ---------------------------------------------------------------------------
# Mesh construction and validation
# ---------------------------------------------------------------------------


def _dedup_vertices(vertices: np.ndarray, triangles: np.ndarray, tol: float):
    """Merge vertices closer than ``tol`` and drop collapsed triangles."""
    keys = np.round(vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    merged = vertices[np.sort(first)]
    # re-map unique rows to the order of their first occurrence
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    tris = rank[inverse][triangles]
    keep = (
        (tris[:, 0] != tris[:, 1])
        & (tris[:, 1] != tris[:, 2])
        & (tris[:, 0] != tris[:, 2])
    )
    tris = tris[keep]
    return merged, tris


def _drop_degenerate(vertices: np.ndarray, triangles: np.ndarray):
    v0 = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - v0
    e2 = vertices[triangles[:, 2]] - v0
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    return triangles[area2 > 1e-12]


def check_watertight(triangles: np.ndarray, name: str = "mesh") -> None:
    """Every undirected edge must be shared by exactly two triangles with
    opposite winding (each directed edge appears exactly once)."""
    directed = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    d_keys = directed[:, 0] * (triangles.max() + 1) + directed[:, 1]
    if len(np.unique(d_keys)) != len(d_keys):
        raise WatertightnessError(f"{name}: an edge is traversed twice in the same direction")
    und = np.sort(directed, axis=1)
    u_keys = und[:, 0] * (triangles.max() + 1) + und[:, 1]
    _, counts = np.unique(u_keys, return_counts=True)
    if np.any(counts != 2):
        bad = int(np.sum(counts != 2))
        raise WatertightnessError(f"{name}: {bad} edges not shared by exactly two triangles")


def signed_volume(vertices: np.ndarray, triangles: np.ndarray) -> float:
    """Signed enclosed volume via the divergence theorem (mm^3)."""
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def mesh_volume(mesh: SurfaceMesh) -> float:
    return abs(signed_volume(mesh.vertices, mesh.triangles))


def mesh_centroid(mesh: SurfaceMesh) -> np.ndarray:
    """Volume centroid of a watertight mesh (tetrahedron decomposition)."""
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    v1 = mesh.vertices[mesh.triangles[:, 1]]
    v2 = mesh.vertices[mesh.triangles[:, 2]]
    vols = np.einsum("ij,ij->i", v0, np.cross(v1, v2)) / 6.0
    total = vols.sum()
    if abs(total) < 1e-12:
        return mesh.vertices.mean(axis=0)
    centroids = (v0 + v1 + v2) / 4.0
    return (centroids * vols[:, None]).sum(axis=0) / total


def mesh_from_arrays(
    vertices,
    triangles,
    kind: str = "organ",
    class_id: int = 0,
    description: str = "",
    material: Optional[str] = None,
    name: str = "mesh",
) -> SurfaceMesh:
    """Build a validated mesh: dedup, drop degenerates, check watertightness,
    and flip orientation outward (positive signed volume)."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(triangles) == 0 or len(vertices) == 0:
        raise MeshFormatError(f"{name}: empty mesh")
    if triangles.min() < 0 or triangles.max() >= len(vertices):
        raise MeshFormatError(f"{name}: triangle index out of range")
    vertices, triangles = _dedup_vertices(vertices, triangles, VERTEX_MERGE_TOL_MM)
    triangles = _drop_degenerate(vertices, triangles)
    if len(triangles) == 0:
        raise MeshFormatError(f"{name}: all triangles degenerate")
    check_watertight(triangles, name)
    if signed_volume(vertices, triangles) < 0:
        triangles = triangles[:, [0, 2, 1]]
    return SurfaceMesh(
        vertices=vertices,
        triangles=triangles,
        kind=kind,
        class_id=class_id,
        description=description,
        material=material,
    )


# ---------------------------------------------------------------------------
# Mesh file I/O
# ---------------------------------------------------------------------------


def _load_stl_arrays(path: Path):
    blob = path.read_bytes()
    if len(blob) < 84:
        raise MeshFormatError(f"{path}: truncated STL")
    (count,) = struct.unpack_from("<I", blob, 80)
    expected = 84 + 50 * count
    if len(blob) < expected:
        raise MeshFormatError(f"{path}: STL declares {count} triangles but file is short")
    rec = np.dtype(
        [("normal", "<f4", 3), ("verts", "<f4", (3, 3)), ("attr", "<u2")]
    )
    body = np.frombuffer(blob, dtype=rec, count=count, offset=84)
    verts = body["verts"].reshape(-1, 3).astype(np.float64)
    tris = np.arange(3 * count, dtype=np.int64).reshape(-1, 3)
    return verts, tris


def _load_obj_arrays(path: Path):
    verts = []
    tris = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshFormatError(f"{path}:{ln}: malformed vertex line")
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeshFormatError(f"{path}:{ln}: only triangular faces supported")
            idx = []
            for tok in parts[1:4]:
                head = tok.split("/")[0]
                idx.append(int(head) - 1)
            tris.append(idx)
    if not verts or not tris:
        raise MeshFormatError(f"{path}: no vertices or faces")
    return np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64)


def load_mesh(
    path,
    kind: str = "organ",
    class_id: int = 0,
    description: str = "",
    material: Optional[str] = None,
) -> SurfaceMesh:
    """Load a binary STL or restricted OBJ file into a validated mesh."""
    path = Path(path)
    if not path.exists():
        raise MeshFormatError(f"missing mesh file {path}")
    if path.suffix.lower() == ".obj":
        verts, tris = _load_obj_arrays(path)
    else:
        verts, tris = _load_stl_arrays(path)
    return mesh_from_arrays(
        verts, tris, kind=kind, class_id=class_id,
        description=description or path.stem, material=material, name=str(path),
    )


def write_stl(vertices, triangles, path) -> Path:
    """Write a binary STL (normals recomputed from winding)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    path = Path(path)
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    n = np.cross(v1 - v0, v2 - v0)
    norms = np.linalg.norm(n, axis=1)
    norms[norms == 0] = 1.0
    n = n / norms[:, None]
    rec = np.zeros(len(triangles), dtype=[("normal", "<f4", 3), ("verts", "<f4", (3, 3)), ("attr", "<u2")])
    rec["normal"] = n
    rec["verts"][:, 0] = v0
    rec["verts"][:, 1] = v1
    rec["verts"][:, 2] = v2
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"\0" * 80)
        f.write(struct.pack("<I", len(triangles)))
        f.write(rec.tobytes())
    return path


# ---------------------------------------------------------------------------
# Label surfacing
# ---------------------------------------------------------------------------


def voxelize_labels_to_meshes(vol: CtVolume, class_id: int) -> SurfaceMesh:
    """Surface one labeled class with marching cubes at iso-level 0.5.

    The label field is zero-padded before surfacing so the result is a
    closed surface; vertices land halfway between inside and outside
    voxel centers.
    """
    from skimage import measure

    if vol.labels is None:
        raise VolumeFormatError("volume has no label field")
    field = vol.labels == class_id
    count = int(field.sum())
    if count == 0:
        raise CatalogError(f"class id {class_id} absent from labels")
    if count < MIN_SURFACE_VOXELS:
        raise MeshFormatError(
            f"class id {class_id} region too small to surface ({count} voxels)"
        )
    padded = np.pad(field, 1).astype(np.float32)
    spacing = tuple(float(s) for s in vol.spacing)
    verts, faces, _, _ = measure.marching_cubes(padded, level=0.5, spacing=spacing)
    world = verts - np.asarray(spacing) + np.asarray(vol.origin, dtype=float)
    return mesh_from_arrays(
        world, faces, kind="organ", class_id=class_id,
        description=f"class_{class_id}", name=f"class_{class_id}",
    )


# ---------------------------------------------------------------------------
# Catalog I/O
# ---------------------------------------------------------------------------


def load_catalog(path) -> ObjectCatalog:
    """Load an object catalog JSON file."""
    path = Path(path)
    if not path.exists():
        raise CatalogError(f"missing catalog file {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CatalogError(f"malformed catalog {path}: {e}") from e
    return catalog_from_dict(doc)


def catalog_from_dict(doc: dict) -> ObjectCatalog:
    try:
        organs = {int(k): dict(v) for k, v in doc.get("organs", {}).items()}
        tools = {int(k): dict(v) for k, v in doc.get("tools", {}).items()}
        groups = {str(k): [int(c) for c in v] for k, v in doc.get("groups", {}).items()}
    except (TypeError, ValueError) as e:
        raise CatalogError(f"malformed catalog: {e}") from e
    return ObjectCatalog(organs=organs, tools=tools, groups=groups)


def default_catalog_path() -> Path:
    return Path(__file__).parent / "data" / "object_catalog.json"


def load_default_catalog() -> ObjectCatalog:
    return load_catalog(default_catalog_path())
