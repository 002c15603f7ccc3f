"""Command-line interface.

Exit codes: 0 success, 1 partial/quality failure (report still written),
2 fatal configuration or input error.  Every subcommand honors --seed
and is replay-deterministic; FLUOROFORGE_OFFLINE=1 disables all network
use globally.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import augmentation as aug
from . import dataset_pipeline as dp
from . import phantoms
from . import prompt_factory as pf
from . import seg_losses_metrics as slm
from . import vq_prompt_encoder as vqe
from .errors import FluoroforgeError

_PALETTE = [
    (230, 60, 60), (60, 160, 230), (90, 200, 90), (235, 190, 60),
    (180, 90, 220), (80, 220, 210), (240, 130, 40), (160, 160, 160),
]


def _fail(ctx, code: int, message: str) -> None:
    if ctx.obj and ctx.obj.get("json_errors"):
        sys.stderr.write(json.dumps({"error": message, "code": code}) + "\n")
    else:
        sys.stderr.write(f"error: {message}\n")
    ctx.exit(code)


@click.group()
@click.option("--json-errors", is_flag=True, help="Emit machine-readable errors on stderr.")
@click.pass_context
def main(ctx, json_errors):
    """Synthetic X-ray dataset generation and evaluation tools."""
    ctx.ensure_object(dict)
    ctx.obj["json_errors"] = json_errors


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="Generation config JSON.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--workers", type=int, default=None, help="Override the worker count.")
@click.option("--offline", is_flag=True, help="Disable all network use.")
@click.option("--out", "out_root", type=click.Path(), default=None,
              help="Override the output root.")
@click.pass_context
def generate(ctx, config_path, seed, workers, offline, out_root):
    """Generate a dataset from a config file."""
    if not Path(config_path).exists():
        _fail(ctx, 2, f"missing config file {config_path}")
    try:
        config = dp.GenerationConfig.from_json(config_path)
    except (FluoroforgeError, ValueError, KeyError, json.JSONDecodeError) as e:
        _fail(ctx, 2, f"bad config {config_path}: {e}")
    if seed is not None:
        config.seed = seed
    if workers is not None:
        config.workers = workers
    if offline or os.environ.get(pf.OFFLINE_ENV) == "1":
        config.offline = True
    if out_root is not None:
        config.output_root = str(Path(out_root).resolve())
    try:
        report = dp.run_generation(config)
    except FluoroforgeError as e:
        _fail(ctx, 2, str(e))
    click.echo(f"generated {report['generated']} samples "
               f"({report['skipped_existing']} already present)")
    for kind, t in report["throughput"].items():
        click.echo(f"  {kind}: {t['display']} (n={t['n']})")
    if report["failures"]:
        click.echo(f"{len(report['failures'])} samples failed; see report.json",
                   err=True)
        ctx.exit(1)
    ctx.exit(0)


@main.command()
@click.argument("sample_id")
@click.option("--dataset", "dataset_root", required=True, type=click.Path(),
              help="Generated dataset root.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Output PNG path.")
@click.option("--mask", "mask_name", default=None,
              help="Only overlay the mask entry or group with this name.")
@click.pass_context
def preview(ctx, sample_id, dataset_root, out_path, mask_name):
    """Render an overlay figure: image + mask contours + prompt captions."""
    from PIL import Image, ImageDraw
    from scipy import ndimage

    root = Path(dataset_root)
    mpath = root / "manifests" / f"{sample_id}.json"
    if not mpath.exists():
        _fail(ctx, 2, f"unknown sample id {sample_id!r}")
    manifest = json.loads(mpath.read_text())
    from .drr_renderer import load_png_16bit

    img = load_png_16bit(root / manifest["image"])
    rgb = np.stack([np.round(img * 255).astype(np.uint8)] * 3, axis=-1)

    entries = manifest["masks"]
    if mask_name is not None:
        matched = [e for e in entries if e["name"] == mask_name or e["key"] == mask_name]
        if not matched:
            names = sorted({e["name"] for e in entries})
            _fail(ctx, 2, f"unknown mask name {mask_name!r}; available: {names}")
        entries = matched

    for i, e in enumerate(entries):
        mask = dp.rle_decode(e["rle"], tuple(e["dims"]))
        if not mask.any():
            continue
        er = ndimage.binary_erosion(mask, border_value=0)
        contour = mask & ~er
        rgb[contour] = _PALETTE[i % len(_PALETTE)]

    im = Image.fromarray(rgb)
    draw = ImageDraw.Draw(im)
    y = 2
    for i, e in enumerate(entries[:8]):
        draw.text((3, y), e["name"], fill=_PALETTE[i % len(_PALETTE)])
        y += 11
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    im.save(out_path, format="PNG")
    click.echo(f"wrote {out_path}")
    ctx.exit(0)


@main.command("eval")
@click.argument("pred_dir", type=click.Path())
@click.argument("gt_dir", type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), default=".",
              help="Directory for report JSON/CSV.")
@click.option("--min-mask-frac", type=float, default=0.025,
              help="Drop ground-truth masks below this fraction of the image.")
@click.option("--spacing", type=float, default=1.0, help="Pixel spacing for HDD.")
@click.option("--hdd-unit", default="px", help="Unit label for HDD values.")
@click.pass_context
def eval_cmd(ctx, pred_dir, gt_dir, out_dir, min_mask_frac, spacing, hdd_unit):
    """Evaluate a prediction archive against a ground-truth archive."""
    try:
        pred = slm.load_archive(pred_dir)
        gt = slm.load_archive(gt_dir)
        config = slm.EvalConfig(min_mask_frac=min_mask_frac, spacing=spacing,
                                hdd_unit=hdd_unit)
        report = slm.evaluate_run(pred, gt, config)
    except FluoroforgeError as e:
        _fail(ctx, 2, str(e))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slm.write_report(report, out_dir / "metrics.json", out_dir / "metrics.csv")
    if report["n_evaluated"] == 0:
        click.echo("warning: every ground-truth mask was filtered out", err=True)
    for cond, block in sorted(report["conditions"].items()):
        m = block["mean"]
        hdd = "n/a" if m["hdd_mean"] is None else f"{m['hdd_mean']:.3f}"
        click.echo(f"{cond}: n={m['n']} iou={m['iou_mean']:.3f} "
                   f"dice={m['dice_mean']:.3f} hdd={hdd} {report['hdd_unit']}")
    ctx.exit(0)


@main.command("vq-demo")
@click.argument("embeddings_path", type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), default=".",
              help="Directory for the loss trace CSV and codebook stats.")
@click.option("--lr", type=float, default=0.05)
@click.option("--epochs", type=int, default=60)
@click.option("--k", type=int, default=2, help="Codebook size.")
@click.option("--beta", type=float, default=0.25, help="Commitment weight.")
@click.option("--seed", type=int, default=0)
@click.pass_context
def vq_demo(ctx, embeddings_path, out_dir, lr, epochs, k, beta, seed):
    """Train the toy VQ prompt encoder on an embedding file."""
    path = Path(embeddings_path)
    if not path.exists():
        _fail(ctx, 2, f"missing embedding file {path}")
    try:
        embeddings = vqe.load_embeddings(path)
    except (ValueError, json.JSONDecodeError) as e:
        _fail(ctx, 2, f"bad embedding file {path}: {e}")
    # targets: one token per distinct text prefix "cluster <i>", else per text
    cluster_of = {}
    for emb in embeddings:
        key = emb.source_text.split(" prompt")[0]
        cluster_of.setdefault(key, len(cluster_of))
    rng = np.random.Generator(np.random.PCG64(seed))
    tokens = {c: rng.normal(size=8) for c in sorted(cluster_of.values())}
    samples = [(emb, tokens[cluster_of[emb.source_text.split(' prompt')[0]]])
               for emb in embeddings]
    cluster_ids = [cluster_of[emb.source_text.split(" prompt")[0]] for emb in embeddings]
    config = vqe.ToyTrainConfig(lr=lr, epochs=epochs, k=max(k, len(tokens)),
                                beta=beta, seed=seed)
    try:
        params, codebook, trace = vqe.train_toy_encoder(samples, config)
    except vqe.TrainingDiverged as e:
        _fail(ctx, 1, f"training diverged at iteration {e.iteration}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "loss_trace.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "loss"])
        for i, loss in enumerate(trace):
            wr.writerow([i, f"{loss:.10f}"])
    purity = vqe.assignment_purity(codebook, params, samples, cluster_ids)
    stats = {
        "initial_loss": trace[0],
        "final_loss": trace[-1],
        "purity": purity,
        "codebook_size": int(len(codebook.entries)),
        "usage_counts": codebook.usage_counts.tolist(),
    }
    (out_dir / "codebook_stats.json").write_text(
        json.dumps(stats, indent=1, sort_keys=True) + "\n")
    click.echo(f"initial loss {trace[0]:.4f} -> final {trace[-1]:.4f}; "
               f"purity {purity:.3f}")
    if not trace[-1] < 0.5 * trace[0]:
        click.echo("final loss did not drop below half of the initial loss", err=True)
        ctx.exit(1)
    ctx.exit(0)


@main.command()
@click.argument("dataset_root", type=click.Path())
@click.pass_context
def stats(ctx, dataset_root):
    """Print dataset statistics from a generated output root."""
    try:
        s = dp.dataset_stats(dataset_root)
    except (FluoroforgeError, json.JSONDecodeError) as e:
        _fail(ctx, 2, str(e))
    click.echo(f"samples: {s['n_samples']}")
    for kind, n in sorted(s["per_kind"].items()):
        click.echo(f"  {kind}: {n}")
    click.echo(f"masks per image (mean): {s['masks_per_image_mean']:.2f}")
    click.echo(f"prompt records per mask (mean): {s['prompts_per_mask_mean']:.2f}")
    if s["tool_frequency"]:
        for tool, n in s["tool_frequency"].items():
            click.echo(f"  tool {tool}: {n}")
    if s["split_sizes"]:
        click.echo(f"split: train={s['split_sizes']['train']} "
                   f"val={s['split_sizes']['val']}")
    ctx.exit(0)


@main.command("make-phantom")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Directory to materialize the phantom inputs in.")
@click.option("--seed", type=int, default=7)
@click.option("--random-views", type=int, default=48,
              help="Random views per phantom CT.")
@click.pass_context
def make_phantom(ctx, out_dir, seed, random_views):
    """Write the shipped phantom CTs, tools, catalog, and generation config."""
    config_path = phantoms.write_phantom_dataset(
        out_dir, seed=seed, random_views_per_ct=random_views)
    click.echo(f"wrote phantom inputs; config at {config_path}")
    ctx.exit(0)


@main.command("make-toy-embeddings")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Path for the .emb file.")
@click.option("--seed", type=int, default=7)
@click.option("--per-cluster", type=int, default=24)
@click.pass_context
def make_toy_embeddings(ctx, out_path, seed, per_cluster):
    """Write the two-cluster toy embedding file for the VQ demo."""
    samples, _ = vqe.make_toy_embeddings(n_per_cluster=per_cluster, seed=seed)
    vecs = np.stack([s[0].vector for s in samples])
    texts = [s[0].source_text for s in samples]
    vqe.write_embeddings(out_path, vecs, texts)
    click.echo(f"wrote {out_path}")
    ctx.exit(0)


if __name__ == "__main__":
    main()
