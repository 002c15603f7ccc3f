"""C-arm camera model and standard/random view sampling.

Conventions (recorded in every sample manifest): the patient anatomical
frame coincides with the volume frame with anterior = -y, superior = +z,
left = +x.  Pixel centers sit at integer coordinates and the principal
point is the image center ((W-1)/2, (H-1)/2).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anatomy_io import SurfaceMesh, mesh_centroid
from .errors import ProjectionError, ViewUnavailableError

ANTERIOR_AXIS = np.array([0.0, -1.0, 0.0])
SUPERIOR_AXIS = np.array([0.0, 0.0, 1.0])
LEFT_AXIS = np.array([1.0, 0.0, 0.0])

FRAME_CONVENTION = {"anterior": [0, -1, 0], "superior": [0, 0, 1], "left": [1, 0, 0]}

_ORTHO_TOL = 1e-9
_SID_TOL = 1e-6


@dataclass(frozen=True)
class CArmCamera:
    """Cone-beam source/detector pair.

    ``detector_u``/``detector_v`` span the detector plane; the principal
    ray runs from ``source`` through ``detector_center``.
    """

    source: np.ndarray
    detector_center: np.ndarray
    detector_u: np.ndarray
    detector_v: np.ndarray
    sid: float
    pixel_size: float
    image_dims: tuple  # (W, H)

    def __post_init__(self):
        u, v = self.detector_u, self.detector_v
        w = self.principal_ray
        for a, b, label in ((u, v, "u.v"), (u, w, "u.w"), (v, w, "v.w")):
            if abs(float(np.dot(a, b))) > _ORTHO_TOL:
                raise ValueError(f"detector axes not orthogonal ({label})")
        for a, label in ((u, "u"), (v, "v")):
            if abs(float(np.linalg.norm(a)) - 1.0) > _ORTHO_TOL:
                raise ValueError(f"detector axis {label} not unit length")
        d = float(np.linalg.norm(self.detector_center - self.source))
        if abs(d - self.sid) > _SID_TOL:
            raise ValueError(f"|detector_center - source| = {d} != sid = {self.sid}")

    @property
    def principal_ray(self) -> np.ndarray:
        d = self.detector_center - self.source
        return d / np.linalg.norm(d)

    @property
    def principal_point(self) -> tuple:
        w, h = self.image_dims
        return ((w - 1) / 2.0, (h - 1) / 2.0)

    def to_dict(self) -> dict:
        return {
            "source": [float(x) for x in self.source],
            "detector_center": [float(x) for x in self.detector_center],
            "detector_u": [float(x) for x in self.detector_u],
            "detector_v": [float(x) for x in self.detector_v],
            "sid": float(self.sid),
            "pixel_size": float(self.pixel_size),
            "image_dims": [int(x) for x in self.image_dims],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CArmCamera":
        return cls(
            source=np.array(d["source"], dtype=float),
            detector_center=np.array(d["detector_center"], dtype=float),
            detector_u=np.array(d["detector_u"], dtype=float),
            detector_v=np.array(d["detector_v"], dtype=float),
            sid=float(d["sid"]),
            pixel_size=float(d["pixel_size"]),
            image_dims=tuple(int(x) for x in d["image_dims"]),
        )


@dataclass(frozen=True)
class StandardViewSpec:
    """One entry of the standard-view catalog."""

    name: str
    target_group: str
    direction: np.ndarray  # unit vector, anatomical frame
    sid_mm: float
    sad_mm: float
    rot_jitter_deg: float = 10.0
    iso_jitter_mm: float = 25.0
    sid_jitter_frac: float = 0.05

    def __post_init__(self):
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"view {self.name!r}: direction not unit length")
        if not self.sad_mm < self.sid_mm:
            raise ValueError(f"view {self.name!r}: sad must be < sid")


@dataclass(frozen=True)
class ViewBounds:
    """Sampling bounds for fully random views."""

    sid_mm: float = 1000.0
    sad_mm: float = 700.0
    cap_deg: float = 60.0
    iso_jitter_mm: float = 25.0
    pixel_size: float = 0.75
    image_dims: tuple = (512, 512)


def _orthonormal_pair(direction: np.ndarray) -> tuple:
    """Deterministic detector basis perpendicular to ``direction``."""
    d = direction / np.linalg.norm(direction)
    up = SUPERIOR_AXIS if abs(float(np.dot(d, SUPERIOR_AXIS))) < 0.999 else LEFT_AXIS
    u = np.cross(up, d)
    u = u / np.linalg.norm(u)
    v = np.cross(d, u)
    v = v / np.linalg.norm(v)
    return u, v


def camera_from_view(isocenter, direction, sad_mm, sid_mm, pixel_size,
                     image_dims) -> CArmCamera:
    """Camera whose principal ray passes through ``isocenter`` along ``direction``."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    iso = np.asarray(isocenter, dtype=float)
    source = iso - sad_mm * d
    detector_center = source + sid_mm * d
    u, v = _orthonormal_pair(d)
    return CArmCamera(
        source=source, detector_center=detector_center,
        detector_u=u, detector_v=v, sid=float(sid_mm),
        pixel_size=float(pixel_size), image_dims=tuple(image_dims),
    )


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project_points(cam: CArmCamera, pts: np.ndarray) -> np.ndarray:
    """Vectorized cone-beam projection of (N, 3) world points to (N, 2) pixels.

    Raises for points at or behind the source plane.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    rel = pts - cam.source
    w = cam.principal_ray
    depth = rel @ w
    if np.any(depth <= 0):
        raise ProjectionError("point at or behind the source plane")
    cx, cy = cam.principal_point
    scale = cam.sid / (depth * cam.pixel_size)
    u = cx + scale * (rel @ cam.detector_u)
    v = cy + scale * (rel @ cam.detector_v)
    return np.stack([u, v], axis=1)


def project_point(cam: CArmCamera, p) -> tuple:
    """Project one world point; returns fractional pixel coordinates (u, v)."""
    uv = project_points(cam, np.asarray(p, dtype=float).reshape(1, 3))[0]
    return float(uv[0]), float(uv[1])


def rays_through_pixels(cam: CArmCamera, uv: np.ndarray) -> np.ndarray:
    """Unit ray directions from the source through (N, 2) pixel coordinates."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    w_px, h_px = cam.image_dims
    if np.any(uv[:, 0] < 0) or np.any(uv[:, 0] >= w_px) or \
       np.any(uv[:, 1] < 0) or np.any(uv[:, 1] >= h_px):
        raise ProjectionError("pixel coordinate outside the image")
    cx, cy = cam.principal_point
    du = (uv[:, 0] - cx) * cam.pixel_size
    dv = (uv[:, 1] - cy) * cam.pixel_size
    pts = (cam.detector_center[None, :]
           + du[:, None] * cam.detector_u[None, :]
           + dv[:, None] * cam.detector_v[None, :])
    dirs = pts - cam.source
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs


def ray_through_pixel(cam: CArmCamera, u: float, v: float) -> tuple:
    """Ray (origin, unit direction) through a pixel; inverse of project_point."""
    d = rays_through_pixels(cam, np.array([[u, v]], dtype=float))[0]
    return cam.source.copy(), d


# ---------------------------------------------------------------------------
# View sampling
# ---------------------------------------------------------------------------


def sample_cap_directions(rng: np.random.Generator, axis, cap_deg: float,
                          n: int = 1) -> np.ndarray:
    """Directions uniform over the spherical cap of half-angle ``cap_deg``.

    Inverse-CDF on cos(angle): cos(theta) ~ U[cos(cap), 1], azimuth uniform.
    Deterministic across platforms for a given generator state.
    """
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    cos_min = float(np.cos(np.radians(cap_deg)))
    cos_t = rng.uniform(cos_min, 1.0, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, 1.0))
    e1, e2 = _orthonormal_pair(axis)
    dirs = (cos_t[:, None] * axis[None, :]
            + (sin_t * np.cos(phi))[:, None] * e1[None, :]
            + (sin_t * np.sin(phi))[:, None] * e2[None, :])
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def sample_random_view(rng: np.random.Generator, focus_mesh: SurfaceMesh,
                       bounds: ViewBounds) -> CArmCamera:
    """Random view: isocenter near the focus centroid, direction in the
    anterior cone (half-angle ``bounds.cap_deg``)."""
    d = sample_cap_directions(rng, ANTERIOR_AXIS, bounds.cap_deg, 1)[0]
    jitter = rng.uniform(-bounds.iso_jitter_mm, bounds.iso_jitter_mm, size=3)
    iso = mesh_centroid(focus_mesh) + jitter
    return camera_from_view(iso, d, bounds.sad_mm, bounds.sid_mm,
                            bounds.pixel_size, bounds.image_dims)


def group_isocenter(meshes) -> np.ndarray:
    """Center of the union of the meshes' axis-aligned bounding boxes."""
    los, his = zip(*(m.bounds() for m in meshes))
    lo = np.min(np.stack(los), axis=0)
    hi = np.max(np.stack(his), axis=0)
    return (lo + hi) / 2.0


def sample_standard_view(spec: StandardViewSpec, meshes, rng: np.random.Generator,
                         pixel_size: float, image_dims) -> CArmCamera:
    """Standard view with minor random variations around the catalog entry.

    ``meshes`` holds the target group's meshes present in this anatomy;
    empty means the view does not apply (caller skips the series).
    """
    meshes = list(meshes)
    if not meshes:
        raise ViewUnavailableError(f"no meshes present for group {spec.target_group!r}")
    d = sample_cap_directions(rng, spec.direction, spec.rot_jitter_deg, 1)[0]
    jitter = rng.uniform(-spec.iso_jitter_mm, spec.iso_jitter_mm, size=3)
    iso = group_isocenter(meshes) + jitter
    f = spec.sid_jitter_frac
    sid = spec.sid_mm * (1.0 + rng.uniform(-f, f))
    sad = spec.sad_mm * (1.0 + rng.uniform(-f, f))
    sad = min(sad, 0.95 * sid)
    return camera_from_view(iso, d, sad, sid, pixel_size, image_dims)


# ---------------------------------------------------------------------------
# View catalog I/O
# ---------------------------------------------------------------------------


def load_view_catalog(path) -> list:
    """Load the standard-view catalog JSON (a list of view entries)."""
    doc = json.loads(Path(path).read_text())
    specs = []
    for e in doc:
        direction = np.asarray(e["direction"], dtype=float)
        direction = direction / np.linalg.norm(direction)
        specs.append(StandardViewSpec(
            name=e["name"],
            target_group=e["target_group"],
            direction=direction,
            sid_mm=float(e["sid_mm"]),
            sad_mm=float(e["sad_mm"]),
            rot_jitter_deg=float(e.get("rot_jitter_deg", 10.0)),
            iso_jitter_mm=float(e.get("iso_jitter_mm", 25.0)),
            sid_jitter_frac=float(e.get("sid_jitter_frac", 0.05)),
        ))
    return specs


def default_view_catalog_path() -> Path:
    return Path(__file__).parent / "data" / "standard_views.json"
