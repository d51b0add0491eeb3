"""Command-line entry points.

Console scripts: `phantom` (generate/split), `train`, `ablate`, `embed`,
`eval-knn`, `sweep-k`, `eval-distort`, `serve`, `viz` (tsne/ksweep/panel) and
`lab` (run/sweep-channels/ablate). `lab` honors the TUMORLAB_OUT_ROOT
environment variable and a --seed override that re-derives every module seed.
"""

from __future__ import annotations

import os
from pathlib import Path

import click

from .io import read_json, write_json
from .model import ModelConfig
from .phantom import PhantomConfig, generate_dataset, load_manifest, save_manifest, split_dataset
from .pipeline import ExperimentConfig, channel_sweep, reseeded, run_ablations, run_pipeline
from .retrieval import (
    DistortionParams,
    EmbeddingTable,
    embed_dataset,
    eval_distortion,
    eval_knn,
    sweep_k,
)
from .training import TrainConfig
from .training import train as train_fn
from .viz import ProjectionConfig, emit_k_sweep, emit_retrieval_panel, emit_scatter, project_2d

OUT_ROOT_ENV = "TUMORLAB_OUT_ROOT"


def _parse_ks(text: str) -> list[int]:
    text = text.strip()
    if ":" in text:
        lo, hi = text.split(":", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(part) for part in text.split(",") if part]


@click.group()
def phantom():
    """Synthetic dataset generation."""


@phantom.command("generate")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def phantom_generate(config_path, out_dir):
    """Generate a phantom dataset into OUT."""
    cfg = PhantomConfig.from_dict(read_json(config_path)) if config_path else PhantomConfig()
    manifest = generate_dataset(cfg, out_dir)
    n_tumors = sum(len(e["tumors"]) for e in manifest["images"])
    click.echo(f"wrote {len(manifest['images'])} images ({n_tumors} tumors) to {out_dir}")


@phantom.command("split")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--test-fraction", type=float, default=0.2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Where to write the tagged manifest (defaults to in-place).")
def phantom_split(manifest_path, test_fraction, seed, out_path):
    """Tag images with train/test split labels."""
    manifest, _ = load_manifest(manifest_path)
    tagged = split_dataset(manifest, test_fraction, seed)
    save_manifest(tagged, out_path or manifest_path)
    n_test = sum(1 for e in tagged["images"] if e["split"] == "test")
    click.echo(f"split: {len(tagged['images']) - n_test} train / {n_test} test")


@click.command("train")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--model-config", "model_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--train-config", "train_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "test", "all"]), default="train", show_default=True)
def train_cli(manifest_path, model_path, train_path, out_dir, split):
    """Train the multitask network on a manifest."""
    manifest, data_dir = load_manifest(manifest_path)
    model_cfg = ModelConfig.from_dict(read_json(model_path)) if model_path else ModelConfig()
    train_cfg = TrainConfig.from_dict(read_json(train_path)) if train_path else TrainConfig()
    report = train_fn(manifest, data_dir, model_cfg, train_cfg, out_dir, split=split)
    click.echo(f"final loss {report.epoch_records[-1]['loss_total']:.4f}; checkpoint {report.final_checkpoint}")


@click.command("ablate")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--subsets", "subsets_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
def ablate_cli(config_path, subsets_path, out_dir):
    """Run the task-ablation harness from an experiment config."""
    config = ExperimentConfig.from_dict(read_json(config_path))
    subsets = [tuple(s) for s in read_json(subsets_path)]
    report = run_ablations(config, subsets, out_root=out_dir, echo=click.echo)
    for row in report["rows"]:
        click.echo(f"{row['name']}: accuracy {row['accuracy']}, rmse {row['rmse_mm']:.3f}")


@click.command("embed")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "test", "all"]), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--patch-size", type=int, default=32, show_default=True)
def embed_cli(checkpoint, manifest_path, split, out_path, patch_size):
    """Extract an embedding table for one split."""
    manifest, data_dir = load_manifest(manifest_path)
    table = embed_dataset(checkpoint, manifest, data_dir, split, out_path, patch_size=(patch_size,) * 3)
    click.echo(f"wrote {len(table.rows)} embeddings (C={table.channels}) to {out_path}")


@click.command("eval-knn")
@click.option("--train-table", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--test-table", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--k", type=int, default=5, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def eval_knn_cli(train_table, test_table, k, out_path):
    """Evaluate KNN accuracy and size RMSE of test vs train tables."""
    report = eval_knn(EmbeddingTable.load(train_table), EmbeddingTable.load(test_table), k)
    if out_path:
        write_json(out_path, report.to_dict())
    click.echo(f"K={k} accuracy {report.accuracy} rmse_mm {report.rmse_mm:.3f}")


@click.command("sweep-k")
@click.option("--train-table", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--test-table", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ks", type=str, default="1:10", show_default=True, help="Range lo:hi or comma list.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
def sweep_k_cli(train_table, test_table, ks, out_dir):
    """Evaluate KNN metrics across neighbor counts."""
    reports = sweep_k(EmbeddingTable.load(train_table), EmbeddingTable.load(test_table), _parse_ks(ks))
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rep in reports:
            write_json(out / f"k_{rep.k:02d}.json", rep.to_dict())
    for rep in reports:
        click.echo(f"K={rep.k}: accuracy {rep.accuracy} rmse_mm {rep.rmse_mm:.3f}")


@click.command("eval-distort")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--sigma-scale", type=float, default=1 / 3, show_default=True)
@click.option("--sigma-trans", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--k", type=int, default=5, show_default=True)
@click.option("--patch-size", type=int, default=32, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def eval_distort_cli(checkpoint, manifest_path, sigma_scale, sigma_trans, seed, k, patch_size, out_path):
    """Paired clean-vs-distorted bounding-box evaluation."""
    manifest, data_dir = load_manifest(manifest_path)
    params = DistortionParams(sigma_log2_scale=sigma_scale, sigma_translation_fraction=sigma_trans, seed=seed)
    report = eval_distortion(checkpoint, manifest, data_dir, params, k, patch_size=(patch_size,) * 3)
    if out_path:
        write_json(out_path, report)
    click.echo(f"accuracy deltas: {report['accuracy_delta']}")


@click.command("serve")
@click.option("--table", "table_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--addr", type=str, default="127.0.0.1:8000", show_default=True)
def serve_cli(table_path, addr):
    """Serve the read-only neighbor-query endpoint."""
    from .server import serve

    host, _, port = addr.partition(":")
    serve(table_path, host=host or "127.0.0.1", port=int(port or 8000))


@click.group()
def viz():
    """Analysis figures with machine-readable twins."""


@viz.command("tsne")
@click.option("--table", "table_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--perplexity", type=float, default=30.0, show_default=True)
@click.option("--iterations", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--method", type=click.Choice(["tsne", "pca-fallback"]), default="tsne", show_default=True)
def viz_tsne(table_path, out_path, perplexity, iterations, seed, method):
    """Project embeddings to 2D and emit the scatter plus CSV twin."""
    table = EmbeddingTable.load(table_path)
    cfg = ProjectionConfig(perplexity=perplexity, n_iterations=iterations, seed=seed, method=method)
    coords = project_2d(table, cfg)
    png, csv_path = emit_scatter(coords, table, out_path)
    click.echo(f"wrote {png} and {csv_path}")


@viz.command("ksweep")
@click.option("--reports-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def viz_ksweep(reports_dir, out_path):
    """Plot K-sweep curves from a directory of report JSONs."""
    reports = [read_json(p) for p in sorted(Path(reports_dir).glob("*.json"))]
    reports.sort(key=lambda r: r["k"])
    png, csv_path = emit_k_sweep(reports, out_path)
    click.echo(f"wrote {png} and {csv_path}")


@viz.command("panel")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--table", "table_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--tumor-id", type=str, required=True)
@click.option("--k", type=int, default=2, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def viz_panel(manifest_path, table_path, tumor_id, k, out_path):
    """Montage of a query tumor and its retrieved neighbors."""
    manifest, data_dir = load_manifest(manifest_path)
    png, sidecar = emit_retrieval_panel(manifest, data_dir, EmbeddingTable.load(table_path), tumor_id, k, out_path)
    click.echo(f"wrote {png} and {sidecar}")


def _resolve_out_root(config: ExperimentConfig, out: str | None) -> str:
    if out:
        return out
    env = os.environ.get(OUT_ROOT_ENV)
    if env:
        return str(Path(env) / Path(config.out_root).name)
    return config.out_root


@click.group()
def lab():
    """Reproducible end-to-end experiments."""


@lab.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_root", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="Override the global seed (re-derives module seeds).")
def lab_run(config_path, out_root, seed):
    """Run the full pipeline: generate, split, train, embed, evaluate, visualize."""
    config = ExperimentConfig.from_dict(read_json(config_path))
    if seed is not None:
        config = reseeded(config, seed)
    summary = run_pipeline(config, _resolve_out_root(config, out_root), echo=click.echo)
    click.echo(f"metrics: {summary['metrics']['knn']}")


@lab.command("sweep-channels")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--channels", type=str, required=True, help="Comma-separated channel counts, e.g. 16,32,64.")
@click.option("--out", "out_root", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=int, default=None)
def lab_sweep_channels(config_path, channels, out_root, seed):
    """Train one model per channel count and emit a comparison table."""
    config = ExperimentConfig.from_dict(read_json(config_path))
    if seed is not None:
        config = reseeded(config, seed)
    values = [int(c) for c in channels.split(",") if c]
    report = channel_sweep(config, values, out_root=_resolve_out_root(config, out_root), echo=click.echo)
    for row in report["rows"]:
        click.echo(f"C={row['channels']}: accuracy {row['accuracy']} rmse {row['rmse_mm']:.3f}")


@lab.command("ablate")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--subsets", "subsets_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_root", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=int, default=None)
def lab_ablate(config_path, subsets_path, out_root, seed):
    """Train and evaluate one model per task subset."""
    config = ExperimentConfig.from_dict(read_json(config_path))
    if seed is not None:
        config = reseeded(config, seed)
    subsets = [tuple(s) for s in read_json(subsets_path)]
    report = run_ablations(config, subsets, out_root=_resolve_out_root(config, out_root), echo=click.echo)
    for row in report["rows"]:
        click.echo(f"{row['name']}: accuracy {row['accuracy']} rmse {row['rmse_mm']:.3f}")
