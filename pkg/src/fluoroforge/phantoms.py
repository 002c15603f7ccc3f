"""Synthetic phantom volumes and primitive meshes.

These back the test oracles (water cube, smooth blobs) and the shipped
desk-scale phantom dataset that the CLI can materialize on demand.
"""

from __future__ import annotations

import numpy as np

from .anatomy_io import CtVolume, SurfaceMesh, mesh_from_arrays


def water_cube_volume(edge_mm: float = 100.0, spacing_mm: float = 1.0, hu: int = 0) -> CtVolume:
    """Cube of uniform HU whose interpolation support spans exactly ``edge_mm``.

    The support box runs between outermost voxel centers, so n voxels at
    spacing s span (n - 1) * s mm; the cube is centered on the origin.
    """
    n = int(round(edge_mm / spacing_mm)) + 1
    hu_arr = np.full((n, n, n), hu, dtype=np.int16)
    origin = np.array([-edge_mm / 2.0] * 3)
    return CtVolume(hu=hu_arr, spacing=np.array([spacing_mm] * 3), origin=origin)


def smooth_random_volume(rng: np.random.Generator, n: int = 32, spacing_mm: float = 2.0,
                         n_blobs: int = 4) -> CtVolume:
    """Sum of 3-D Gaussian bumps; smooth enough for refinement oracles."""
    coords = np.arange(n, dtype=float)
    x, y, z = np.meshgrid(coords, coords, coords, indexing="ij")
    field = np.zeros((n, n, n))
    for _ in range(n_blobs):
        c = rng.uniform(0.25 * n, 0.75 * n, size=3)
        s = rng.uniform(0.12 * n, 0.3 * n)
        a = rng.uniform(200.0, 900.0)
        field += a * np.exp(-(((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) / (2 * s * s)))
    hu = np.clip(field - 1000.0, -1024, 3071).astype(np.int16)
    extent = (n - 1) * spacing_mm
    origin = np.array([-extent / 2.0] * 3)
    return CtVolume(hu=hu, spacing=np.array([spacing_mm] * 3), origin=origin)


def ellipsoid_labels(dims, spacing_mm, blobs) -> np.ndarray:
    """Label volume with axis-aligned ellipsoid blobs.

    ``blobs`` is a list of (class_id, center_voxel, semi_axes_voxel).
    Later blobs overwrite earlier ones.
    """
    labels = np.zeros(dims, dtype=np.int16)
    idx = np.indices(dims).astype(float)
    for class_id, center, semi in blobs:
        c = np.asarray(center, dtype=float)
        s = np.asarray(semi, dtype=float)
        d = (((idx[0] - c[0]) / s[0]) ** 2
             + ((idx[1] - c[1]) / s[1]) ** 2
             + ((idx[2] - c[2]) / s[2]) ** 2)
        labels[d <= 1.0] = class_id
    return labels


def labeled_body_volume(rng: np.random.Generator, n: int = 48, spacing_mm: float = 2.0,
                        organ_specs=None) -> CtVolume:
    """Soft-tissue body ellipsoid with labeled organ blobs inside.

    ``organ_specs`` is a list of (class_id, approx_center_frac, radius_frac,
    hu_value); defaults give a small thorax-like phantom.
    """
    if organ_specs is None:
        organ_specs = [
            (13, (0.36, 0.42, 0.58), 0.16, -780),   # left upper lung lobe
            (15, (0.64, 0.42, 0.58), 0.16, -780),   # right upper lung lobe
            (44, (0.50, 0.55, 0.45), 0.12, 40),     # heart muscle
        ]
    dims = (n, n, n)
    idx = np.indices(dims).astype(float)
    center = (n - 1) / 2.0
    body = (((idx[0] - center) / (0.42 * n)) ** 2
            + ((idx[1] - center) / (0.34 * n)) ** 2
            + ((idx[2] - center) / (0.46 * n)) ** 2) <= 1.0
    hu = np.full(dims, -1000, dtype=np.int16)
    hu[body] = 30
    blobs = []
    for class_id, cf, rf, hu_val in organ_specs:
        c = np.array(cf) * (n - 1) + rng.uniform(-0.02 * n, 0.02 * n, size=3)
        r = rf * n * rng.uniform(0.9, 1.1)
        blobs.append((class_id, c, (r, r, r)))
        d = (((idx[0] - c[0]) / r) ** 2 + ((idx[1] - c[1]) / r) ** 2
             + ((idx[2] - c[2]) / r) ** 2)
        hu[(d <= 1.0) & body] = hu_val
    labels = ellipsoid_labels(dims, spacing_mm, blobs)
    labels[~body] = 0
    extent = (n - 1) * spacing_mm
    origin = np.array([-extent / 2.0] * 3)
    return CtVolume(hu=hu, spacing=np.array([spacing_mm] * 3), origin=origin,
                    labels=labels)


# ---------------------------------------------------------------------------
# Primitive meshes
# ---------------------------------------------------------------------------

_CUBE_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=float)

# 12 triangles, outward-facing winding
_CUBE_TRIS = np.array([
    [0, 2, 1], [0, 3, 2],       # z = 0
    [4, 5, 6], [4, 6, 7],       # z = 1
    [0, 1, 5], [0, 5, 4],       # y = 0
    [2, 3, 7], [2, 7, 6],       # y = 1
    [1, 2, 6], [1, 6, 5],       # x = 1
    [0, 4, 7], [0, 7, 3],       # x = 0
], dtype=np.int64)


def cube_mesh(edge_mm: float = 10.0, center=(0.0, 0.0, 0.0), **meta) -> SurfaceMesh:
    verts = (_CUBE_CORNERS - 0.5) * edge_mm + np.asarray(center, dtype=float)
    return mesh_from_arrays(verts, _CUBE_TRIS, name="cube", **meta)


def box_mesh(size_mm, center=(0.0, 0.0, 0.0), **meta) -> SurfaceMesh:
    size = np.asarray(size_mm, dtype=float)
    verts = (_CUBE_CORNERS - 0.5) * size + np.asarray(center, dtype=float)
    return mesh_from_arrays(verts, _CUBE_TRIS, name="box", **meta)


def cube_arrays(edge_mm: float = 10.0, center=(0.0, 0.0, 0.0)):
    """Raw (vertices, triangles) for fixture files, pre-dedup: 36 vertices."""
    verts = (_CUBE_CORNERS - 0.5) * edge_mm + np.asarray(center, dtype=float)
    tri_verts = verts[_CUBE_TRIS].reshape(-1, 3)
    tris = np.arange(36, dtype=np.int64).reshape(-1, 3)
    return tri_verts, tris


def open_quad_arrays(edge_mm: float = 10.0):
    """Two triangles forming an open square: not watertight by design."""
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float) * edge_mm
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return verts, tris


def icosphere(radius_mm: float = 20.0, center=(0.0, 0.0, 0.0), subdivisions: int = 3,
              **meta) -> SurfaceMesh:
    """Subdivided icosahedron with vertices exactly on the sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    verts = list(map(tuple, verts))
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key in cache:
            return cache[key]
        m = (np.array(verts[i]) + np.array(verts[j])) / 2.0
        m /= np.linalg.norm(m)
        verts.append(tuple(m))
        cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
    v = np.array(verts, dtype=float) * radius_mm + np.asarray(center, dtype=float)
    return mesh_from_arrays(v, faces, name="icosphere", **meta)


def write_phantom_dataset(out_dir, seed: int = 7, n_cts: int = 2,
                          ct_size: int = 48, spacing_mm: float = 2.0,
                          random_views_per_ct: int = 48,
                          resolution: int = 96) -> "Path":
    """Materialize the shipped desk-scale phantom dataset inputs.

    Writes ``n_cts`` labeled thorax-like phantom volumes, two tool meshes,
    a catalog extending the default organ table with those tools, and a
    ready-to-run generation config.  Returns the config path.
    """
    import json
    import shutil
    from pathlib import Path

    from .anatomy_io import default_catalog_path, write_volume
    from .dataset_pipeline import GenerationConfig

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))

    ct_paths = []
    for i in range(n_cts):
        vol = labeled_body_volume(rng, n=ct_size, spacing_mm=spacing_mm)
        ct_paths.append(write_volume(vol, out_dir / f"phantom_{i:02d}.volhdr"))

    screw = cylinder_mesh(2.0, 40.0, kind="tool")
    from .anatomy_io import write_stl

    write_stl(screw.vertices, screw.triangles, out_dir / "tool_screw.stl")
    plate = box_mesh((50.0, 10.0, 3.0), kind="tool")
    write_stl(plate.vertices, plate.triangles, out_dir / "tool_plate.stl")

    catalog = json.loads(default_catalog_path().read_text())
    catalog["tools"] = {
        "1": {"name": "cannulated_screw", "description": "cannulated 40mm screw",
              "mesh": "tool_screw.stl", "material": "titanium"},
        "2": {"name": "fixation_plate", "description": "small fixation plate",
              "mesh": "tool_plate.stl", "material": "steel"},
    }
    catalog_path = out_dir / "phantom_catalog.json"
    catalog_path.write_text(json.dumps(catalog, indent=1, sort_keys=True) + "\n")

    views_src = Path(__file__).parent / "data" / "standard_views.json"
    shutil.copy(views_src, out_dir / "standard_views.json")

    config = GenerationConfig(
        ct_paths=[p.name for p in ct_paths],
        catalog_path="phantom_catalog.json",
        view_catalog_path="standard_views.json",
        output_root="dataset",
        seed=seed,
        resolution=resolution,
        pixel_size_mm=2.0,
        random_views_per_ct=random_views_per_ct,
        tool_count_range=(0, 2),
        step_mm=2.0,
        random_view_sid_mm=1000.0,
        random_view_sad_mm=700.0,
    )
    config_path = out_dir / "phantom_config.json"
    config.to_json(config_path)
    return config_path


def cylinder_mesh(radius_mm: float = 2.0, length_mm: float = 40.0, segments: int = 16,
                  center=(0.0, 0.0, 0.0), **meta) -> SurfaceMesh:
    """Closed cylinder along z, capped with triangle fans."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius_mm * np.cos(ang), radius_mm * np.sin(ang)], axis=1)
    lo = np.column_stack([ring, np.full(segments, -length_mm / 2.0)])
    hi = np.column_stack([ring, np.full(segments, length_mm / 2.0)])
    verts = np.vstack([lo, hi, [[0, 0, -length_mm / 2.0]], [[0, 0, length_mm / 2.0]]])
    c_lo = 2 * segments
    c_hi = 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris.append([i, j, segments + i])          # side
        tris.append([j, segments + j, segments + i])
        tris.append([c_lo, j, i])                  # bottom cap (faces -z)
        tris.append([c_hi, segments + i, segments + j])  # top cap (faces +z)
    verts = verts + np.asarray(center, dtype=float)
    return mesh_from_arrays(verts, np.array(tris, dtype=np.int64), name="cylinder", **meta)
