"""Text and point prompt generation.

Template-driven description augmentation is the deterministic baseline;
an optional external endpoint can contribute extra variants and silently
falls back to templates on any failure.  Point prompts follow the
interactive-segmentation convention: a center-weighted first click, then
clicks inside the prediction error region.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .anatomy_io import ObjectCatalog
from .errors import CatalogError

log = logging.getLogger(__name__)

MAX_VARIANTS = 30
MAX_POINT_PROMPTS = 8

OFFLINE_ENV = "FLUOROFORGE_OFFLINE"
LLM_URL_ENV = "FLUOROFORGE_LLM_URL"
LLM_KEY_ENV = "FLUOROFORGE_LLM_KEY"

_COMPREHENSIVE_FAMILIES = ("synonym", "laterality", "ordinal", "instruction")
_NONCOMPREHENSIVE_FAMILIES = ("colloquial", "terse")


@dataclass(frozen=True)
class PromptRecord:
    """One prompt target with its text variants.

    ``target`` is None exactly for negative prompts (the named object is
    absent and the paired ground truth is the empty mask).
    """

    target: Optional[str]
    text: str
    variants: tuple
    kind: str  # comprehensive | noncomprehensive | negative

    def __post_init__(self):
        if (self.target is None) != (self.kind == "negative"):
            raise ValueError("target must be None exactly for negative prompts")
        if self.kind != "negative" and len(self.variants) == 0:
            raise ValueError("non-negative prompts need at least one variant")
        if len(self.variants) > MAX_VARIANTS:
            raise ValueError(f"more than {MAX_VARIANTS} variants")

    def to_dict(self) -> dict:
        return {"target": self.target, "text": self.text,
                "variants": list(self.variants), "kind": self.kind}


@dataclass(frozen=True)
class PointPrompt:
    u: int
    v: int
    positive: bool

    def to_dict(self) -> dict:
        return {"u": self.u, "v": self.v,
                "polarity": "positive" if self.positive else "negative"}


@dataclass(frozen=True)
class PointPrompts:
    points: tuple

    def __post_init__(self):
        if len(self.points) > MAX_POINT_PROMPTS:
            raise ValueError(f"more than {MAX_POINT_PROMPTS} point prompts")


# ---------------------------------------------------------------------------
# Group masks
# ---------------------------------------------------------------------------


def group_mask(mask_set, group: str, catalog: ObjectCatalog) -> np.ndarray:
    """Pixelwise OR of the group's member masks present in the set."""
    if group not in catalog.groups:
        raise CatalogError(f"unknown group {group!r}")
    members = set(catalog.groups[group])
    w, h = mask_set.image_dims
    out = np.zeros((h, w), dtype=bool)
    for entry in mask_set.entries:
        if entry.kind == "organ" and entry.class_id in members:
            out |= entry.mask
    return out


# ---------------------------------------------------------------------------
# Template augmentation
# ---------------------------------------------------------------------------


def load_template_bank(path) -> dict:
    return json.loads(Path(path).read_text())


def default_template_bank_path() -> Path:
    return Path(__file__).parent / "data" / "prompt_templates.json"


def _apply_slots(text: str, table: dict) -> list:
    """All single-substitution rewrites of ``text`` using a phrase table."""
    out = []
    for src, alts in table.items():
        if src in text:
            for alt in alts:
                out.append(text.replace(src, alt))
    return out


def _candidate_variants(canonical: str, bank: dict, families) -> list:
    """Deduplicated candidates for the given template families, in a
    deterministic order."""
    bare = canonical
    for prefix in ("the ", "a ", "an "):
        if bare.startswith(prefix):
            bare = bare[len(prefix):]
            break
    bases = [canonical, bare]
    for table_name in ("synonyms", "laterality", "ordinals"):
        fam = {"synonyms": "synonym", "laterality": "laterality",
               "ordinals": "ordinal"}[table_name]
        if fam not in families:
            continue
        table = bank.get(table_name, {})
        for b in list(bases):
            bases.extend(_apply_slots(b, table))
    seen = set()
    bases = [b for b in bases if not (b in seen or seen.add(b))]
    out = []
    templates = bank.get("templates", {})
    for family in families:
        for tpl in templates.get(family, []):
            strip_article = "the {d}" in tpl or "'s {d}" in tpl
            for b in bases:
                d = b
                if strip_article:
                    for prefix in ("the ", "a ", "an "):
                        if d.startswith(prefix):
                            d = d[len(prefix):]
                            break
                out.append(tpl.format(d=d))
    if "colloquial" in families:
        for b in bases:
            out.extend(_apply_slots(b, bank.get("colloquial", {})))
    seen = set()
    return [v.strip() for v in out
            if v.strip() and not (v in seen or seen.add(v))]


def augment_description(canonical: str, templates: dict, rng: np.random.Generator,
                        max_variants: int = MAX_VARIANTS,
                        families=None) -> list:
    """Up to ``max_variants`` deduplicated rewrites, always containing the
    canonical string first.  A pure function of (inputs, generator state)."""
    if max_variants < 1:
        raise ValueError("max_variants must be >= 1")
    families = families or (_COMPREHENSIVE_FAMILIES + _NONCOMPREHENSIVE_FAMILIES)
    candidates = [c for c in _candidate_variants(canonical, templates, families)
                  if c != canonical]
    picked = [canonical]
    if candidates and max_variants > 1:
        order = rng.permutation(len(candidates))
        for i in order[:max_variants - 1]:
            picked.append(candidates[int(i)])
    return picked


# ---------------------------------------------------------------------------
# External endpoint client
# ---------------------------------------------------------------------------


@dataclass
class EndpointConfig:
    url: Optional[str] = None
    api_key: Optional[str] = None
    timeout_s: float = 20.0
    offline: bool = False
    max_in_flight: int = 4

    @classmethod
    def from_env(cls) -> "EndpointConfig":
        return cls(
            url=os.environ.get(LLM_URL_ENV) or None,
            api_key=os.environ.get(LLM_KEY_ENV) or None,
            offline=os.environ.get(OFFLINE_ENV, "") == "1",
        )


# Pool-wide in-flight budget for endpoint calls (generation workers are
# threads sharing this process).
_inflight_lock = threading.Lock()
_inflight_sem: Optional[threading.BoundedSemaphore] = None
_inflight_size = 0


def _semaphore(size: int) -> threading.BoundedSemaphore:
    global _inflight_sem, _inflight_size
    with _inflight_lock:
        if _inflight_sem is None or _inflight_size != size:
            _inflight_sem = threading.BoundedSemaphore(size)
            _inflight_size = size
        return _inflight_sem


def fetch_llm_variants(canonical: str, cfg: EndpointConfig, count: int,
                       post=None) -> list:
    """Ask the configured endpoint for extra variants; never raises.

    Returns at most ``count`` cleaned strings; any failure (or offline
    mode, or no configured URL) yields the empty list so callers fall
    back to templates.
    """
    if cfg.offline or os.environ.get(OFFLINE_ENV, "") == "1":
        return []
    if not cfg.url:
        return []
    if post is None:
        import requests

        post = requests.post
    sem = _semaphore(cfg.max_in_flight)
    try:
        with sem:
            headers = {}
            if cfg.api_key:
                headers["Authorization"] = f"Bearer {cfg.api_key}"
            resp = post(cfg.url, json={"description": canonical, "count": count},
                        headers=headers, timeout=cfg.timeout_s)
            payload = resp.json()
            raw = payload.get("variants", [])
    except Exception as e:  # noqa: BLE001 - contract: failures degrade to []
        log.warning("variant endpoint failed for %r: %s", canonical, e)
        return []
    seen = set()
    out = []
    for v in raw:
        if not isinstance(v, str):
            continue
        v = v.strip()
        if v and v not in seen:
            seen.add(v)
            out.append(v)
        if len(out) >= count:
            break
    return out


# ---------------------------------------------------------------------------
# Negative and point prompts
# ---------------------------------------------------------------------------


def sample_negative_prompt(present, catalog: ObjectCatalog, rng: np.random.Generator,
                           p: float) -> Optional[PromptRecord]:
    """With probability ``p``, name an organ absent from the image.

    The caller pairs the record with an all-zero ground-truth mask.
    Returns None when the coin does not fire or everything is present.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if rng.random() >= p:
        return None
    absent = sorted(set(catalog.organs) - set(present))
    if not absent:
        return None
    cid = int(absent[int(rng.integers(0, len(absent)))])
    text = catalog.organ_description(cid)
    return PromptRecord(target=None, text=text, variants=(), kind="negative")


def sample_point_prompts(gt: np.ndarray, pred: Optional[np.ndarray], n: int,
                         rng: np.random.Generator) -> PointPrompts:
    """Simulated interactive clicks.

    The first point is positive, drawn from the ground truth weighted by
    squared distance-transform depth (away from boundaries).  Follow-up
    points are drawn uniformly without replacement from the error region
    gt XOR pred: positive in gt-minus-pred, negative in pred-minus-gt.
    Sampling stops early when the error region is exhausted.
    """
    if not 0 <= n <= MAX_POINT_PROMPTS:
        raise ValueError(f"n must lie in [0, {MAX_POINT_PROMPTS}]")
    if n == 0:
        return PointPrompts(points=())
    gt = gt.astype(bool)
    if not gt.any():
        raise ValueError("cannot sample point prompts for an empty ground truth")
    pred_b = np.zeros_like(gt) if pred is None else pred.astype(bool)

    depth = ndimage.distance_transform_edt(gt)
    w = depth.ravel() ** 2
    w = w / w.sum()
    flat = int(rng.choice(len(w), p=w))
    v0, u0 = np.unravel_index(flat, gt.shape)
    points = [PointPrompt(u=int(u0), v=int(v0), positive=True)]

    error = gt ^ pred_b
    err_idx = np.flatnonzero(error.ravel())
    n_follow = min(n - 1, len(err_idx))
    if n_follow > 0:
        chosen = rng.choice(len(err_idx), size=n_follow, replace=False)
        for ci in np.asarray(chosen).ravel():
            v, u = np.unravel_index(int(err_idx[int(ci)]), gt.shape)
            points.append(PointPrompt(u=int(u), v=int(v), positive=bool(gt[v, u])))
    return PointPrompts(points=tuple(points))
