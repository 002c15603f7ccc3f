"""End-to-end sample generation: scene, render, masks, prompts, serialize.

Every sample is a pure function of its derived seed, so output bytes do
not depend on worker count, scheduling, or completion order.  Writes are
crash-consistent (temp file + rename, manifest last), which makes any
interrupted run resumable to a byte-identical result.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import augmentation as aug
from . import prompt_factory as pf
from .anatomy_io import (
    CtVolume, ObjectCatalog, SurfaceMesh, load_catalog, load_mesh, load_volume,
    voxelize_labels_to_meshes,
)
from .carm_geometry import (
    FRAME_CONVENTION, CArmCamera, ViewBounds, load_view_catalog,
    sample_random_view, sample_standard_view,
)
from .drr_renderer import Spectrum, negative_log_normalize, png_bytes_16bit, render
from .errors import FluoroforgeError, ViewUnavailableError
from .mask_projector import MaskEntry, MaskSet, project_all

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class GenerationConfig:
    ct_paths: list
    catalog_path: str
    view_catalog_path: str
    output_root: str
    seed: int = 0
    resolution: int = 512
    pixel_size_mm: float = 0.75
    random_views_per_ct: int = 20
    include_standard_views: bool = True
    tool_count_range: tuple = (0, 3)
    step_mm: float = 1.0
    workers: int = 1
    offline: bool = False
    negative_prompt_p: float = 0.05
    max_prompt_variants: int = 30
    random_view_sid_mm: float = 1000.0
    random_view_sad_mm: float = 700.0
    plan_path: Optional[str] = None
    split_frac: float = 0.9

    def __post_init__(self):
        if self.resolution < 64:
            raise ValueError("resolution must be >= 64")
        if self.workers < 1:
            raise ValueError("worker count must be >= 1")
        lo, hi = self.tool_count_range
        if lo < 0 or hi < lo:
            raise ValueError("bad tool count range")

    @classmethod
    def from_json(cls, path) -> "GenerationConfig":
        path = Path(path)
        doc = json.loads(path.read_text())
        doc["tool_count_range"] = tuple(doc.get("tool_count_range", (0, 3)))
        # resolve relative paths against the config file location
        for key in ("catalog_path", "view_catalog_path", "output_root", "plan_path"):
            if doc.get(key):
                doc[key] = str((path.parent / doc[key]).resolve())
        doc["ct_paths"] = [str((path.parent / p).resolve()) for p in doc["ct_paths"]]
        return cls(**doc)

    def to_json(self, path) -> None:
        doc = dict(self.__dict__)
        doc["tool_count_range"] = list(self.tool_count_range)
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


@dataclass(frozen=True)
class SampleSpec:
    sample_id: str
    ct_id: str
    kind: str  # standard | random
    view_name: str
    seed: int
    index: int


@dataclass(frozen=True)
class CtEntry:
    ct_id: str
    volume_path: str
    present_class_ids: tuple


def derive_seed(master_seed: int, ct_id: str, index: int) -> int:
    """Stable 64-bit per-sample seed; insertion order of other CTs is irrelevant."""
    digest = hashlib.sha256(f"{master_seed}/{ct_id}/{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


def build_inventory(config: GenerationConfig, catalog: ObjectCatalog) -> list:
    entries = []
    for p in config.ct_paths:
        vol = load_volume(p, catalog)
        ct_id = Path(p).stem
        entries.append(CtEntry(ct_id=ct_id, volume_path=str(p),
                               present_class_ids=tuple(vol.present_class_ids())))
    return entries


def applicable_views(view_specs, catalog: ObjectCatalog, present_ids) -> list:
    present = set(present_ids)
    out = []
    for spec in view_specs:
        members = catalog.groups.get(spec.target_group, [])
        if any(m in present for m in members):
            out.append(spec)
    return out


def plan_samples(config: GenerationConfig, inventory, catalog: ObjectCatalog,
                 view_specs) -> list:
    """One spec per applicable standard view plus the configured random views.

    Each spec carries a seed derived from (master seed, CT id, index).
    """
    if not inventory:
        raise FluoroforgeError("empty CT inventory")
    specs = []
    for ct in inventory:
        index = 0
        if config.include_standard_views:
            for vs in applicable_views(view_specs, catalog, ct.present_class_ids):
                specs.append(SampleSpec(
                    sample_id=f"{ct.ct_id}_{index:05d}",
                    ct_id=ct.ct_id, kind="standard", view_name=vs.name,
                    seed=derive_seed(config.seed, ct.ct_id, index), index=index,
                ))
                index += 1
        for _ in range(config.random_views_per_ct):
            specs.append(SampleSpec(
                sample_id=f"{ct.ct_id}_{index:05d}",
                ct_id=ct.ct_id, kind="random", view_name="random",
                seed=derive_seed(config.seed, ct.ct_id, index), index=index,
            ))
            index += 1
    return specs


# ---------------------------------------------------------------------------
# Scene assets
# ---------------------------------------------------------------------------


@dataclass
class SceneAssets:
    volume: CtVolume
    organ_meshes: dict  # class_id -> SurfaceMesh
    catalog: ObjectCatalog
    view_specs: list
    template_bank: dict
    plan: aug.AugmentationPlan
    spectrum: Spectrum
    tool_meshes: dict  # tool_id -> SurfaceMesh


def load_assets(config: GenerationConfig, ct: CtEntry,
                catalog: Optional[ObjectCatalog] = None) -> SceneAssets:
    catalog = catalog or load_catalog(config.catalog_path)
    vol = load_volume(ct.volume_path, catalog)
    organ_meshes = {}
    for cid in vol.present_class_ids():
        try:
            mesh = voxelize_labels_to_meshes(vol, cid)
        except FluoroforgeError as e:
            log.warning("skipping organ %d in %s: %s", cid, ct.ct_id, e)
            continue
        organ_meshes[cid] = replace_mesh_meta(mesh, catalog, cid)
    tool_meshes = {}
    base = Path(config.catalog_path).parent
    for tid, rec in catalog.tools.items():
        tool_meshes[tid] = load_mesh(
            base / rec["mesh"], kind="tool", class_id=int(tid),
            description=rec.get("description", rec.get("name", f"tool {tid}")),
            material=rec.get("material", "titanium"),
        )
    plan_path = config.plan_path or aug.default_plan_path()
    return SceneAssets(
        volume=vol,
        organ_meshes=organ_meshes,
        catalog=catalog,
        view_specs=load_view_catalog(config.view_catalog_path),
        template_bank=pf.load_template_bank(pf.default_template_bank_path()),
        plan=aug.load_plan(plan_path),
        spectrum=Spectrum(),
        tool_meshes=tool_meshes,
    )


def replace_mesh_meta(mesh: SurfaceMesh, catalog: ObjectCatalog, cid: int) -> SurfaceMesh:
    return SurfaceMesh(
        vertices=mesh.vertices, triangles=mesh.triangles, kind="organ",
        class_id=cid, description=catalog.organ_description(cid),
    )


# ---------------------------------------------------------------------------
# Tool placement
# ---------------------------------------------------------------------------


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def place_tools(rng: np.random.Generator, catalog: ObjectCatalog, cam: CArmCamera,
                count_range, tool_meshes: dict, sad_mm: float) -> list:
    """Pose a random subset of catalog tools inside the view frustum.

    Each instance gets a uniform random rotation and a centroid on the ray
    through a uniformly chosen pixel, at depth in [0.5, 1.5] * sad.
    """
    lo, hi = count_range
    if hi > len(tool_meshes):
        hi = len(tool_meshes)
        lo = min(lo, hi)
    if hi == 0:
        return []
    count = int(rng.integers(lo, hi + 1))
    placed = []
    ids = sorted(tool_meshes)
    w, h = cam.image_dims
    from .carm_geometry import rays_through_pixels

    for _ in range(count):
        tid = ids[int(rng.integers(0, len(ids)))]
        u = rng.uniform(0.1 * w, 0.9 * w)
        v = rng.uniform(0.1 * h, 0.9 * h)
        depth = sad_mm * rng.uniform(0.5, 1.5)
        d = rays_through_pixels(cam, np.array([[u, v]]))[0]
        # place the centroid at the chosen depth along the pixel ray
        cosine = float(np.dot(d, cam.principal_ray))
        target = cam.source + d * (depth / cosine)
        rot = _random_rotation(rng)
        placed.append(tool_meshes[tid].transformed(rot, target))
    return placed


# ---------------------------------------------------------------------------
# RLE
# ---------------------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> list:
    """Column-major run lengths, zero-run first (COCO-style)."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if len(flat) == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], changes, [len(flat)]])
    runs = np.diff(starts).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, dims) -> np.ndarray:
    """Inverse of rle_encode; ``dims`` is (W, H)."""
    w, h = dims
    total = int(np.sum(runs)) if len(runs) else 0
    if total != w * h:
        raise ValueError(f"run sum {total} != {w}*{h}")
    flat = np.zeros(w * h, dtype=bool)
    pos = 0
    val = False
    for r in runs:
        if val:
            flat[pos:pos + r] = True
        pos += int(r)
        val = not val
    return flat.reshape((h, w), order="F")


# ---------------------------------------------------------------------------
# Manifest schema
# ---------------------------------------------------------------------------

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema", "sample_id", "ct_id", "view", "image", "masks",
                 "prompts", "augmentation", "seed", "frame"],
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "sample_id": {"type": "string"},
        "ct_id": {"type": "string"},
        "view": {
            "type": "object",
            "required": ["name", "kind", "camera"],
            "properties": {
                "name": {"type": "string"},
                "kind": {"enum": ["standard", "random"]},
                "camera": {"type": "object"},
            },
        },
        "image": {"type": "string"},
        "masks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["key", "name", "kind", "rle", "dims"],
                "properties": {
                    "key": {"type": "string"},
                    "name": {"type": "string"},
                    "kind": {"enum": ["organ", "tool", "group"]},
                    "rle": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "dims": {"type": "array", "minItems": 2, "maxItems": 2},
                },
            },
        },
        "prompts": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["target", "text", "variants", "kind"],
                "properties": {
                    "kind": {"enum": ["comprehensive", "noncomprehensive", "negative"]},
                },
            },
        },
        "augmentation": {"type": "object", "required": ["plan", "seed"]},
        "seed": {"type": "integer"},
        "frame": {"type": "object"},
    },
}


def validate_manifest(manifest: dict) -> None:
    """Schema check plus referential integrity of prompts, masks, and RLE."""
    import jsonschema

    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    keys = {m["key"] for m in manifest["masks"]}
    for m in manifest["masks"]:
        w, h = m["dims"]
        rle_decode(m["rle"], (w, h))  # raises on run-sum mismatch
    for p in manifest["prompts"]:
        if p["kind"] == "negative":
            if p["target"] is not None:
                raise ValueError("negative prompt with a target")
        elif p["target"] not in keys:
            raise ValueError(f"prompt target {p['target']!r} has no mask entry")


# ---------------------------------------------------------------------------
# Sample generation
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp.{os.getpid()}.{threading.get_ident()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _build_prompts(mask_set: MaskSet, group_entries, assets: SceneAssets,
                   rng: np.random.Generator, config: GenerationConfig) -> list:
    records = []
    n_comp = (config.max_prompt_variants + 1) // 2
    n_noncomp = config.max_prompt_variants - n_comp
    for entry in list(mask_set.entries) + list(group_entries):
        canonical = entry.name
        comp = pf.augment_description(
            canonical, assets.template_bank, rng, max_variants=n_comp,
            families=("synonym", "laterality", "ordinal", "instruction"),
        )
        records.append(pf.PromptRecord(target=entry.key, text=canonical,
                                       variants=tuple(comp), kind="comprehensive"))
        if n_noncomp >= 1:
            noncomp = pf.augment_description(
                canonical, assets.template_bank, rng, max_variants=n_noncomp,
                families=("colloquial", "terse"),
            )
            noncomp = [v for v in noncomp if v != canonical]
            if noncomp:
                records.append(pf.PromptRecord(
                    target=entry.key, text=noncomp[0],
                    variants=tuple(noncomp), kind="noncomprehensive"))
    present = {e.class_id for e in mask_set.entries if e.kind == "organ"}
    neg = pf.sample_negative_prompt(present, assets.catalog, rng,
                                    config.negative_prompt_p)
    if neg is not None:
        records.append(neg)
    return records


def generate_sample(spec: SampleSpec, assets: SceneAssets,
                    config: GenerationConfig, out_root) -> dict:
    """Render one sample and write ``images/<id>.png`` + ``manifests/<id>.json``.

    The manifest is written last and atomically; its presence marks the
    sample complete.  Returns the manifest dict.
    """
    out_root = Path(out_root)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    res = (config.resolution, config.resolution)

    if spec.kind == "standard":
        view = next(v for v in assets.view_specs if v.name == spec.view_name)
        members = assets.catalog.groups.get(view.target_group, [])
        meshes = [assets.organ_meshes[m] for m in members if m in assets.organ_meshes]
        cam = sample_standard_view(view, meshes, rng, config.pixel_size_mm, res)
        sad = view.sad_mm
    else:
        present = sorted(assets.organ_meshes)
        if not present:
            raise ViewUnavailableError(f"{spec.ct_id}: no organ meshes to focus on")
        focus = assets.organ_meshes[present[int(rng.integers(0, len(present)))]]
        bounds = ViewBounds(sid_mm=config.random_view_sid_mm,
                            sad_mm=config.random_view_sad_mm,
                            pixel_size=config.pixel_size_mm, image_dims=res)
        cam = sample_random_view(rng, focus, bounds)
        sad = bounds.sad_mm

    tools = place_tools(rng, assets.catalog, cam, config.tool_count_range,
                        assets.tool_meshes, sad)

    radiograph = render(assets.volume, tools, cam, assets.spectrum, config.step_mm)
    display = negative_log_normalize(radiograph)

    scene_meshes = [assets.organ_meshes[cid] for cid in sorted(assets.organ_meshes)]
    mask_set = project_all(scene_meshes + tools, cam, min_area_px=0)

    group_entries = []
    present_ids = [e.class_id for e in mask_set.entries if e.kind == "organ"]
    for gname in sorted(assets.catalog.groups_with_members(present_ids)):
        gmask = pf.group_mask(mask_set, gname, assets.catalog)
        group_entries.append(MaskEntry(key=f"group:{gname}", class_id=0,
                                       name=f"the {gname}", kind="group", mask=gmask))

    prompts = _build_prompts(mask_set, group_entries, assets, rng, config)

    plan = assets.plan.with_seed(derive_seed(spec.seed, "augmentation", 0))
    final_img = aug.apply_plan(display.pixels, plan)

    image_rel = f"images/{spec.sample_id}.png"
    manifest = {
        "schema": SCHEMA_VERSION,
        "sample_id": spec.sample_id,
        "ct_id": spec.ct_id,
        "view": {"name": spec.view_name, "kind": spec.kind, "camera": cam.to_dict()},
        "image": image_rel,
        "masks": [
            {"key": e.key, "class_id": e.class_id, "name": e.name, "kind": e.kind,
             "rle": rle_encode(e.mask), "dims": [int(res[0]), int(res[1])]}
            for e in list(mask_set.entries) + group_entries
        ],
        "prompts": [p.to_dict() for p in prompts],
        "augmentation": {"plan": plan.name, "seed": plan.seed,
                         "order": "augment_then_window"},
        "seed": spec.seed,
        "spectrum": assets.spectrum.to_dict(),
        "frame": FRAME_CONVENTION,
        "tools": [t.description for t in tools],
    }

    (out_root / "images").mkdir(parents=True, exist_ok=True)
    (out_root / "manifests").mkdir(parents=True, exist_ok=True)
    _atomic_write(out_root / image_rel, png_bytes_16bit(final_img))
    if os.environ.get("_FLUOROFORGE_CRASH_BEFORE_MANIFEST") == spec.sample_id:
        raise RuntimeError(f"injected crash before manifest for {spec.sample_id}")
    manifest_bytes = (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode()
    _atomic_write(out_root / "manifests" / f"{spec.sample_id}.json", manifest_bytes)
    return manifest


# ---------------------------------------------------------------------------
# Split
# ---------------------------------------------------------------------------


def split_dataset(manifests, frac: float, seed: int):
    """CT-level train/val split of sample ids; no CT appears in both sides."""
    if not 0.0 < frac < 1.0:
        raise ValueError("frac must lie in (0, 1)")
    ct_ids = sorted({m["ct_id"] for m in manifests})
    if len(ct_ids) < 2:
        raise ValueError("need at least 2 CTs to split")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = list(rng.permutation(len(ct_ids)))
    n_val = max(1, int(round((1.0 - frac) * len(ct_ids))))
    val_cts = {ct_ids[i] for i in order[:n_val]}
    train_ids = sorted(m["sample_id"] for m in manifests if m["ct_id"] not in val_cts)
    val_ids = sorted(m["sample_id"] for m in manifests if m["ct_id"] in val_cts)
    return train_ids, val_ids


# ---------------------------------------------------------------------------
# Run orchestration
# ---------------------------------------------------------------------------


def _manifest_valid(out_root: Path, sample_id: str) -> bool:
    mpath = out_root / "manifests" / f"{sample_id}.json"
    if not mpath.exists():
        return False
    try:
        manifest = json.loads(mpath.read_text())
        validate_manifest(manifest)
    except Exception:
        return False
    return (out_root / manifest["image"]).exists()


def _clean_temp_files(out_root: Path) -> None:
    for sub in ("images", "manifests"):
        d = out_root / sub
        if d.exists():
            for tmp in d.glob("*.tmp.*"):
                tmp.unlink()


def run_generation(config: GenerationConfig) -> dict:
    """Execute the full plan over a thread pool; resumable and deterministic.

    Dataset content (images, manifests, index.json, splits.json) is a pure
    function of (config, input files); report.json additionally carries
    wall-clock timing and is excluded from that guarantee.
    """
    out_root = Path(config.output_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        probe = out_root / f".write_probe.{os.getpid()}"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise FluoroforgeError(f"output root {out_root} is not writable: {e}") from e
    _clean_temp_files(out_root)

    catalog = load_catalog(config.catalog_path)
    view_specs = load_view_catalog(config.view_catalog_path)
    inventory = build_inventory(config, catalog)
    specs = plan_samples(config, inventory, catalog, view_specs)

    if config.offline:
        os.environ[pf.OFFLINE_ENV] = "1"

    pending = [s for s in specs if not _manifest_valid(out_root, s.sample_id)]
    skipped = len(specs) - len(pending)

    assets_cache: dict = {}
    ct_by_id = {ct.ct_id: ct for ct in inventory}
    cache_lock = threading.Lock()

    def get_assets(ct_id: str) -> SceneAssets:
        with cache_lock:
            if ct_id not in assets_cache:
                assets_cache[ct_id] = load_assets(config, ct_by_id[ct_id], catalog)
            return assets_cache[ct_id]

    failures = []
    timings = []  # (kind, seconds)

    def work(spec: SampleSpec):
        t0 = time.perf_counter()
        assets = get_assets(spec.ct_id)
        generate_sample(spec, assets, config, out_root)
        return spec, time.perf_counter() - t0

    t_start = time.perf_counter()
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = {pool.submit(work, s): s for s in pending}
            for fut in as_completed(futures):
                s = futures[fut]
                try:
                    spec, dt = fut.result()
                    timings.append((spec.kind, dt))
                except Exception as e:  # noqa: BLE001 - per-sample isolation
                    log.error("sample %s failed: %s", s.sample_id, e)
                    failures.append({"sample_id": s.sample_id, "error": str(e)})
    else:
        for s in pending:
            try:
                spec, dt = work(s)
                timings.append((spec.kind, dt))
            except Exception as e:  # noqa: BLE001
                log.error("sample %s failed: %s", s.sample_id, e)
                failures.append({"sample_id": s.sample_id, "error": str(e)})
    wall = time.perf_counter() - t_start

    if pending and len(failures) == len(pending):
        raise FluoroforgeError("all samples failed; see log")

    manifests = []
    for mpath in sorted((out_root / "manifests").glob("*.json")):
        manifests.append(json.loads(mpath.read_text()))

    index = {
        "schema": SCHEMA_VERSION,
        "samples": [
            {"sample_id": m["sample_id"], "ct_id": m["ct_id"],
             "kind": m["view"]["kind"], "view": m["view"]["name"],
             "manifest": f"manifests/{m['sample_id']}.json", "image": m["image"]}
            for m in sorted(manifests, key=lambda m: m["sample_id"])
        ],
    }
    _atomic_write(out_root / "index.json",
                  (json.dumps(index, sort_keys=True, indent=1) + "\n").encode())

    if len({m["ct_id"] for m in manifests}) >= 2:
        train_ids, val_ids = split_dataset(manifests, config.split_frac, config.seed)
        ct_ids = sorted({m["ct_id"] for m in manifests})
        val_cts = sorted({m["ct_id"] for m in manifests if m["sample_id"] in set(val_ids)})
        splits = {
            "train": train_ids, "val": val_ids,
            "train_cts": [c for c in ct_ids if c not in val_cts],
            "val_cts": val_cts, "frac": config.split_frac, "seed": config.seed,
        }
        _atomic_write(out_root / "splits.json",
                      (json.dumps(splits, sort_keys=True, indent=1) + "\n").encode())

    report = {
        "generated": len(pending) - len(failures),
        "skipped_existing": skipped,
        "failures": sorted(failures, key=lambda f: f["sample_id"]),
        "total_samples": len(specs),
        "wall_time_s": wall,
        "workers": config.workers,
        "resumed_complete": bool(skipped == len(specs)),
        "throughput": throughput_summary(timings),
    }
    _atomic_write(out_root / "report.json",
                  (json.dumps(report, sort_keys=True, indent=1) + "\n").encode())
    return report


def throughput_summary(timings) -> dict:
    """Images/second mean and spread per view kind, plus display strings."""
    out = {}
    kinds = sorted({k for k, _ in timings})
    for kind in kinds + ["all"]:
        ts = [dt for k, dt in timings if kind == "all" or k == kind]
        if not ts:
            continue
        rates = [1.0 / dt if dt > 0 else float("inf") for dt in ts]
        mean = float(np.mean(rates))
        std = float(np.std(rates))
        out[kind] = {
            "n": len(ts),
            "mean_images_per_s": mean,
            "std_images_per_s": std,
            "display": f"{mean:.1f} ± {std:.1f} images per second",
        }
    return out


# ---------------------------------------------------------------------------
# Dataset statistics
# ---------------------------------------------------------------------------


def dataset_stats(root) -> dict:
    """Counts over a generated dataset, cross-checkable against its report."""
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FluoroforgeError(f"missing index {index_path}")
    index = json.loads(index_path.read_text())
    per_kind: dict = {}
    masks_per_image = []
    prompts_per_mask = []
    tool_freq: dict = {}
    for s in index["samples"]:
        mpath = root / s["manifest"]
        if not mpath.exists():
            raise FluoroforgeError(f"index references missing manifest {s['manifest']}")
        m = json.loads(mpath.read_text())
        if m["sample_id"] != s["sample_id"]:
            raise FluoroforgeError(f"index/manifest id mismatch for {s['sample_id']}")
        per_kind[s["kind"]] = per_kind.get(s["kind"], 0) + 1
        masks_per_image.append(len(m["masks"]))
        targeted = [p for p in m["prompts"] if p["target"] is not None]
        if m["masks"]:
            prompts_per_mask.append(len(targeted) / len(m["masks"]))
        for t in m.get("tools", []):
            tool_freq[t] = tool_freq.get(t, 0) + 1
    splits_path = root / "splits.json"
    splits = json.loads(splits_path.read_text()) if splits_path.exists() else None
    return {
        "n_samples": len(index["samples"]),
        "per_kind": per_kind,
        "masks_per_image_mean": float(np.mean(masks_per_image)) if masks_per_image else 0.0,
        "prompts_per_mask_mean": float(np.mean(prompts_per_mask)) if prompts_per_mask else 0.0,
        "tool_frequency": dict(sorted(tool_freq.items())),
        "split_sizes": {"train": len(splits["train"]), "val": len(splits["val"])}
        if splits else None,
    }
