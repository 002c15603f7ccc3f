"""Domain-randomization image ops and k-means intensity windowing.

All ops map [0, 1] images to [0, 1] images and are deterministic given
(input, parameters, seed).  The default randomization plan applies, in
order: coarse dropout, blur, gamma contrast, windowing, CLAHE, and
inversion, each fired independently with its configured probability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

FULL_RANGE_WINDOW = (0.5, 1.0)
_MIN_WINDOW_WIDTH = 1e-3


def coarse_dropout(img: np.ndarray, rng: np.random.Generator, n_holes: int,
                   hole_frac: float) -> np.ndarray:
    """Fill random axis-aligned rectangles with the (original) image mean."""
    if n_holes < 0:
        raise ValueError("n_holes must be >= 0")
    if not 0.0 < hole_frac <= 0.5:
        raise ValueError("hole_frac must lie in (0, 0.5]")
    out = img.copy()
    if n_holes == 0:
        return out
    h, w = img.shape
    hh = max(1, int(round(hole_frac * h)))
    hw = max(1, int(round(hole_frac * w)))
    fill = float(img.mean())
    for _ in range(n_holes):
        y = int(rng.integers(0, h - hh + 1))
        x = int(rng.integers(0, w - hw + 1))
        out[y:y + hh, x:x + hw] = fill
    return out


def invert(img: np.ndarray) -> np.ndarray:
    return 1.0 - img


def gaussian_blur(img: np.ndarray, sigma_px: float) -> np.ndarray:
    """Separable Gaussian convolution with reflect padding; sigma 0 is identity."""
    if sigma_px < 0:
        raise ValueError("sigma_px must be >= 0")
    if sigma_px == 0:
        return img.copy()
    radius = max(1, int(np.ceil(3.0 * sigma_px)))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma_px) ** 2)
    k /= k.sum()
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return out


def gamma_contrast(img: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return np.power(img, gamma)


def window(img: np.ndarray, center: float, width: float) -> np.ndarray:
    """Linear intensity ramp centered on ``center`` over ``width``, clamped."""
    if width <= 0:
        raise ValueError("width must be positive")
    return np.clip((img - center) / width + 0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# CLAHE
# ---------------------------------------------------------------------------

_BINS = 256


def _tile_mapping(values: np.ndarray, clip_limit: float) -> np.ndarray:
    """Per-tile histogram -> clipped CDF lookup table of length 256."""
    hist = np.bincount(values, minlength=_BINS).astype(float)
    n = hist.sum()
    if n == 0:
        return np.linspace(0.0, 1.0, _BINS)
    if np.isfinite(clip_limit):
        limit = max(clip_limit * n / _BINS, 1.0)
        clipped = np.minimum(hist, limit)
        excess = n - clipped.sum()
        clipped += excess / _BINS
        hist = clipped
    return np.cumsum(hist) / n


def clahe(img: np.ndarray, tiles: int = 8, clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization, 256 bins.

    Tile mappings are blended bilinearly between tile centers; with
    ``tiles=1`` and an infinite clip limit this reduces to global
    histogram equalization (output = CDF of the input value).
    """
    if tiles < 1:
        raise ValueError("tiles must be >= 1")
    if clip_limit < 1:
        raise ValueError("clip_limit must be >= 1")
    h, w = img.shape
    bins = np.minimum((np.clip(img, 0.0, 1.0) * _BINS).astype(np.int64), _BINS - 1)

    ty_edges = np.linspace(0, h, tiles + 1).astype(int)
    tx_edges = np.linspace(0, w, tiles + 1).astype(int)
    maps = np.zeros((tiles, tiles, _BINS))
    centers_y = np.zeros(tiles)
    centers_x = np.zeros(tiles)
    for i in range(tiles):
        for j in range(tiles):
            tile = bins[ty_edges[i]:ty_edges[i + 1], tx_edges[j]:tx_edges[j + 1]]
            maps[i, j] = _tile_mapping(tile.ravel(), clip_limit)
        centers_y[i] = (ty_edges[i] + ty_edges[i + 1] - 1) / 2.0
        centers_x[i] = (tx_edges[i] + tx_edges[i + 1] - 1) / 2.0

    if tiles == 1:
        return maps[0, 0][bins]

    ys = np.arange(h, dtype=float)
    xs = np.arange(w, dtype=float)
    # fractional tile coordinates, clamped so border pixels use edge tiles
    fy = np.interp(ys, centers_y, np.arange(tiles, dtype=float))
    fx = np.interp(xs, centers_x, np.arange(tiles, dtype=float))
    y0 = np.minimum(fy.astype(int), tiles - 2)
    x0 = np.minimum(fx.astype(int), tiles - 2)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    y0 = y0[:, None]
    x0 = x0[None, :]
    y0b = np.broadcast_to(y0, (h, w))
    x0b = np.broadcast_to(x0, (h, w))
    m00 = maps[y0b, x0b, bins]
    m01 = maps[y0b, x0b + 1, bins]
    m10 = maps[y0b + 1, x0b, bins]
    m11 = maps[y0b + 1, x0b + 1, bins]
    top = m00 * (1 - wx) + m01 * wx
    bot = m10 * (1 - wx) + m11 * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# K-means windowing
# ---------------------------------------------------------------------------


def kmeans_1d(values: np.ndarray, k: int, max_iters: int = 100,
              tol: float = 1e-6, objective_trace: list = None):
    """Lloyd's algorithm on scalars with deterministic quantile init.

    Returns (centers, labels); empty clusters keep their previous center.
    When given, ``objective_trace`` collects the within-cluster SSE after
    each assignment step.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    values = np.asarray(values, dtype=float).ravel()
    # run on sorted values so every reduction sees a canonical order and the
    # result is exactly invariant to input permutation
    order_in = np.argsort(values, kind="stable")
    sv = values[order_in]
    centers = np.quantile(sv, (np.arange(k) + 0.5) / k)
    labels_sv = np.zeros(len(sv), dtype=np.int64)
    for _ in range(max_iters):
        order = np.argsort(centers, kind="stable")
        sorted_centers = centers[order]
        mids = (sorted_centers[1:] + sorted_centers[:-1]) / 2.0
        labels_sv = order[np.searchsorted(mids, sv)]
        if objective_trace is not None:
            objective_trace.append(float(np.sum((sv - centers[labels_sv]) ** 2)))
        new_centers = centers.copy()
        for c in range(k):
            sel = sv[labels_sv == c]
            if len(sel):
                new_centers[c] = sel.mean()
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if shift < tol:
            break
    labels = np.empty(len(values), dtype=np.int64)
    labels[order_in] = labels_sv
    return centers, labels


def kmeans_windows(img: np.ndarray, k: int = 4) -> list:
    """Three display windows: full range plus two k-means-derived windows.

    Channel 1 is always the identity window.  Channels 2 and 3 come from
    the two most populated clusters that contain neither the global
    minimum nor maximum value (skipping air background and saturation);
    missing interior clusters fall back to the full-range window.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    values = np.sort(img.ravel())  # canonical order: pure multiset function
    windows = [FULL_RANGE_WINDOW]
    if float(values[-1] - values[0]) < 1e-12:
        return [FULL_RANGE_WINDOW] * 3
    centers, labels = kmeans_1d(values, k)
    lo_label = labels[0]
    hi_label = labels[-1]
    stats = []
    for c in range(k):
        if c == lo_label or c == hi_label:
            continue
        sel = values[labels == c]
        if len(sel) == 0:
            continue
        stats.append((len(sel), float(sel.mean()), float(sel.std())))
    stats.sort(key=lambda s: (-s[0], s[1]))
    for _, mean, std in stats[:2]:
        windows.append((mean, max(4.0 * std, _MIN_WINDOW_WIDTH)))
    while len(windows) < 3:
        windows.append(FULL_RANGE_WINDOW)
    return windows


def to_three_channel(img: np.ndarray, k: int = 4) -> np.ndarray:
    """(H, W, 3) stack of windowed views; channel 1 equals the input."""
    ws = kmeans_windows(img, k)
    return np.stack([window(img, c, w) for c, w in ws], axis=-1)


# ---------------------------------------------------------------------------
# Augmentation plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanStep:
    op: str
    params: dict
    probability: float


@dataclass(frozen=True)
class AugmentationPlan:
    steps: tuple
    seed: int = 0
    name: str = "plan"

    def with_seed(self, seed: int) -> "AugmentationPlan":
        return AugmentationPlan(steps=self.steps, seed=seed, name=self.name)


# name -> (callable, takes_rng)
_OP_REGISTRY = {
    "coarse_dropout": (coarse_dropout, True),
    "invert": (lambda img: invert(img), False),
    "gaussian_blur": (gaussian_blur, False),
    "gamma_contrast": (gamma_contrast, False),
    "window": (window, False),
    "clahe": (clahe, False),
}


def _resolve_param(value, rng: np.random.Generator):
    """Fixed scalar, [lo, hi] uniform range, or {"log_sigma": s} log-normal."""
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return float(rng.uniform(float(value[0]), float(value[1])))
    if isinstance(value, dict) and "log_sigma" in value:
        return float(np.exp(rng.normal(0.0, float(value["log_sigma"]))))
    return value


def validate_plan(plan: AugmentationPlan) -> None:
    for step in plan.steps:
        if step.op not in _OP_REGISTRY:
            raise ValueError(f"unknown augmentation op {step.op!r}")
        if not 0.0 <= step.probability <= 1.0:
            raise ValueError(f"op {step.op!r}: probability outside [0, 1]")


def apply_plan(img: np.ndarray, plan: AugmentationPlan) -> np.ndarray:
    """Apply plan ops in order, each fired with its own probability.

    The random stream is a pure function of the plan seed, so the same
    (image, plan) pair always yields bit-identical output.
    """
    validate_plan(plan)
    rng = np.random.Generator(np.random.PCG64(plan.seed))
    out = img.copy()
    for step in plan.steps:
        fire = bool(rng.random() < step.probability)
        params = {kk: _resolve_param(vv, rng) for kk, vv in sorted(step.params.items())}
        if not fire:
            continue
        fn, takes_rng = _OP_REGISTRY[step.op]
        if takes_rng:
            out = fn(out, rng, **{k: _int_if_count(k, v) for k, v in params.items()})
        else:
            out = fn(out, **{k: _int_if_count(k, v) for k, v in params.items()})
    return out


def _int_if_count(key: str, value):
    if key in ("n_holes", "tiles"):
        return int(round(value))
    return value


def load_plan(path, seed: int = 0) -> AugmentationPlan:
    doc = json.loads(Path(path).read_text())
    steps = tuple(
        PlanStep(op=e["op"], params=dict(e.get("params", {})),
                 probability=float(e.get("probability", 1.0)))
        for e in doc["steps"]
    )
    plan = AugmentationPlan(steps=steps, seed=seed, name=doc.get("name", Path(path).stem))
    validate_plan(plan)
    return plan


def default_plan_path() -> Path:
    return Path(__file__).parent / "data" / "plans" / "domain_randomization.json"
