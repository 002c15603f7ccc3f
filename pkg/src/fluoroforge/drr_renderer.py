"""Radiograph rendering: attenuation line integrals plus mesh tool overlays.

Physics is monoenergetic Beer-Lambert.  The volume contributes a
trapezoidal line integral of trilinearly interpolated attenuation; each
tool mesh contributes mu_material * interior_path_length.  Summation
order per pixel is fixed, so output is bit-identical across runs and
across worker counts.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anatomy_io import CtVolume, SurfaceMesh
from .carm_geometry import CArmCamera, rays_through_pixels
from .errors import GeometryError
from .raycast import path_length_image, path_lengths, ray_mesh_path_length

# Linear attenuation (1/cm) used for tool materials.
MATERIAL_MU_PER_CM = {"titanium": 1.0, "steel": 2.4, "pmma": 0.22}

DEFAULT_STEP_MM = 1.0


@dataclass(frozen=True)
class Spectrum:
    """Monoenergetic beam: energy and water attenuation at that energy."""

    energy_kev: float = 60.0
    mu_water_per_cm: float = 0.2

    def __post_init__(self):
        if self.energy_kev <= 0 or self.mu_water_per_cm <= 0:
            raise ValueError("spectrum values must be positive")

    def to_dict(self) -> dict:
        return {"energy_kev": self.energy_kev, "mu_water_per_cm": self.mu_water_per_cm}


@dataclass
class Radiograph:
    """Rendered image with its photometric interpretation and provenance."""

    pixels: np.ndarray  # (H, W)
    photometric: str  # attenuation_line_integral | transmitted_fraction | negative_log_normalized
    camera: CArmCamera
    provenance: dict = field(default_factory=dict)


def hu_to_mu(hu, spectrum: Spectrum):
    """Linear attenuation (1/cm) from Hounsfield units, floored at zero."""
    mu = spectrum.mu_water_per_cm * (1.0 + np.asarray(hu, dtype=np.float64) / 1000.0)
    return np.maximum(mu, 0.0)


def material_mu(material: str, table=None) -> float:
    table = MATERIAL_MU_PER_CM if table is None else table
    try:
        return float(table[material])
    except KeyError:
        raise GeometryError(f"unknown tool material {material!r}") from None


# ---------------------------------------------------------------------------
# Line integration
# ---------------------------------------------------------------------------


def _slab_clip(origin, dirs, lo, hi):
    """Entry/exit parameters of rays against the volume support box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (lo[None, :] - origin[None, :]) * inv
        t_hi = (hi[None, :] - origin[None, :]) * inv
    # where a direction component is 0, the ray hits the slab iff origin inside
    para = dirs == 0.0
    inside = (origin[None, :] >= lo[None, :]) & (origin[None, :] <= hi[None, :])
    t_near = np.where(para, np.where(inside, -np.inf, np.inf), np.minimum(t_lo, t_hi))
    t_far = np.where(para, np.where(inside, np.inf, -np.inf), np.maximum(t_lo, t_hi))
    t0 = np.maximum(t_near.max(axis=1), 0.0)
    t1 = t_far.min(axis=1)
    return t0, t1


def _trilinear(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Trilinear sample of a 3-D array at fractional index coordinates."""
    shape = np.array(values.shape)
    pos = np.clip(idx, 0.0, (shape - 1).astype(float))
    i0 = np.minimum(pos.astype(np.int64), shape - 2)
    f = pos - i0
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    c00 = values[x0, y0, z0] * (1 - fx) + values[x0 + 1, y0, z0] * fx
    c10 = values[x0, y0 + 1, z0] * (1 - fx) + values[x0 + 1, y0 + 1, z0] * fx
    c01 = values[x0, y0, z0 + 1] * (1 - fx) + values[x0 + 1, y0, z0 + 1] * fx
    c11 = values[x0, y0 + 1, z0 + 1] * (1 - fx) + values[x0 + 1, y0 + 1, z0 + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def _integrate_rays(mu: np.ndarray, spacing, origin_world, ray_origin, dirs,
                    step_mm: float) -> np.ndarray:
    """Trapezoidal line integrals (dimensionless) for a batch of unit rays.

    The per-ray sample count depends only on that ray's chord, so results
    do not change with batching.
    """
    lo = np.asarray(origin_world, dtype=float)
    hi = lo + (np.array(mu.shape) - 1) * np.asarray(spacing, dtype=float)
    t0, t1 = _slab_clip(np.asarray(ray_origin, dtype=float), dirs, lo, hi)
    chord = t1 - t0
    miss = ~np.isfinite(chord) | (chord <= 0.0)
    chord = np.where(miss, 0.0, chord)
    t0 = np.where(miss, 0.0, t0)  # keep sample positions finite for misses
    n = np.maximum(np.ceil(chord / step_mm).astype(np.int64), 1)
    n_max = int(n.max())
    h = chord / n
    j = np.arange(n_max + 1)
    ts = t0[:, None] + h[:, None] * j[None, :]
    pts = ray_origin[None, None, :] + ts[:, :, None] * dirs[:, None, :]
    idx = (pts - lo[None, None, :]) / np.asarray(spacing, dtype=float)[None, None, :]
    f = _trilinear(mu, idx)
    w = np.where(j[None, :] <= n[:, None], 1.0, 0.0)
    w[:, 0] = 0.5
    w[np.arange(len(n)), n] = 0.5
    w *= j[None, :] <= n[:, None]
    integral = (f * w).sum(axis=1) * h / 10.0  # mm -> cm
    return np.where(miss, 0.0, integral)


def mu_volume(vol: CtVolume, spectrum: Spectrum) -> np.ndarray:
    """Precomputed attenuation field for repeated integration."""
    return hu_to_mu(vol.hu, spectrum)


def line_integral(vol: CtVolume, ray, spectrum: Spectrum,
                  step_mm: float = DEFAULT_STEP_MM, mu: np.ndarray = None) -> float:
    """Integral of mu along the ray segment inside the volume (dimensionless).

    Returns exactly 0 when the ray misses the volume support box.
    """
    if step_mm <= 0:
        raise ValueError("step_mm must be positive")
    origin = np.asarray(ray[0], dtype=float)
    direction = np.asarray(ray[1], dtype=float)
    direction = direction / np.linalg.norm(direction)
    if mu is None:
        mu = mu_volume(vol, spectrum)
    out = _integrate_rays(mu, vol.spacing, vol.origin, origin,
                          direction.reshape(1, 3), step_mm)
    return float(out[0])


# ---------------------------------------------------------------------------
# Full-image queries
# ---------------------------------------------------------------------------


def _pixel_grid(cam: CArmCamera):
    w, h = cam.image_dims
    us = np.arange(w, dtype=float)
    return us, h, w


def tool_path_image(mesh: SurfaceMesh, cam: CArmCamera) -> np.ndarray:
    """(H, W) interior path lengths of pixel-center rays through one mesh."""
    return path_length_image(mesh, cam)


def render(vol: CtVolume, tool_meshes, cam: CArmCamera, spectrum: Spectrum = None,
           step_mm: float = DEFAULT_STEP_MM, workers: int = 1,
           material_table=None) -> Radiograph:
    """Render a transmitted-fraction radiograph of the volume plus tools.

    Per pixel: total = line_integral(volume) + sum(mu_tool * path_mm / 10);
    pixel value = exp(-total).  Rows are distributed across ``workers``
    threads; each row is computed independently so the result does not
    depend on the worker count.
    """
    if step_mm <= 0:
        raise ValueError("step_mm must be positive")
    spectrum = spectrum or Spectrum()
    w, h = cam.image_dims
    mu = mu_volume(vol, spectrum)
    total = np.zeros((h, w))

    us = np.arange(w, dtype=float)

    def row_integral(v):
        uv = np.stack([us, np.full(w, float(v))], axis=1)
        dirs = rays_through_pixels(cam, uv)
        return _integrate_rays(mu, vol.spacing, vol.origin, cam.source, dirs, step_mm)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for v, row in zip(range(h), pool.map(row_integral, range(h))):
                total[v] = row
    else:
        for v in range(h):
            total[v] = row_integral(v)

    for mesh in tool_meshes:
        mu_tool = material_mu(mesh.material or "titanium", material_table)
        total += mu_tool * tool_path_image(mesh, cam) / 10.0

    return Radiograph(
        pixels=np.exp(-total),
        photometric="transmitted_fraction",
        camera=cam,
        provenance={"spectrum": spectrum.to_dict(), "step_mm": step_mm},
    )


def negative_log_normalize(r: Radiograph) -> Radiograph:
    """Map transmitted fractions to display range: -log then min-max to [0, 1]."""
    if r.photometric != "transmitted_fraction":
        raise ValueError(f"expected transmitted_fraction input, got {r.photometric}")
    y = -np.log(r.pixels)
    y_min, y_max = float(y.min()), float(y.max())
    if y_max - y_min <= 0.0:
        out = np.zeros_like(y)
    else:
        out = (y - y_min) / (y_max - y_min)
    return Radiograph(pixels=out, photometric="negative_log_normalized",
                      camera=r.camera, provenance=dict(r.provenance))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def png_bytes_16bit(img: np.ndarray) -> bytes:
    """Deterministic 16-bit grayscale PNG encoding of a [0, 1] image."""
    from io import BytesIO

    from PIL import Image

    arr = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    buf = BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")  # uint16 -> mode I;16
    return buf.getvalue()


def load_png_16bit(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint16).astype(np.float64) / 65535.0


def save_radiograph(r: Radiograph, path, seed=None) -> Path:
    """Write the PNG plus a sidecar JSON describing how it was made."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes_16bit(r.pixels))
    sidecar = {
        "photometric": r.photometric,
        "camera": r.camera.to_dict(),
        "provenance": r.provenance,
        "seed": seed,
    }
    path.with_suffix(".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=1) + "\n"
    )
    return path
