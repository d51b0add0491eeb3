"""End-to-end experiment pipeline with resumable, stamped stages.

Stage order: generate, split, train, embed, eval_knn, sweep_k,
eval_distortion, tsne, panels. Each stage records a stamp containing a hash
of its configuration slice chained with the upstream stamp hash, so editing
any config invalidates that stage and everything after it. A stage is skipped
when its stamp hash matches and all its declared outputs still exist. Stages
communicate only through files inside the experiment directory.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .io import dumps_canonical, read_json, sha256_text, write_json
from .model import ModelConfig
from .phantom import PhantomConfig, generate_dataset, load_manifest, save_manifest, split_dataset
from .retrieval import (
    DistortionParams,
    EmbeddingTable,
    KnnEvalReport,
    embed_dataset,
    eval_distortion,
    eval_knn,
    sweep_k,
)
from .training import TrainConfig, ablation_suite, train
from .viz import ProjectionConfig, emit_k_sweep, emit_retrieval_panel, emit_scatter, max_valid_perplexity, project_2d

STAGES = ("generate", "split", "train", "embed", "eval_knn", "sweep_k", "eval_distortion", "tsne", "panels")

SUMMARY_SCHEMA_VERSION = 1


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


@dataclass
class ExperimentConfig:
    """Desk-scale experiment by default: 120 phantom images, C=16, 10x50 training."""

    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(channels=16))
    train: TrainConfig = field(default_factory=TrainConfig)
    distortion: DistortionParams = field(default_factory=DistortionParams)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    knn_k: int = 5
    sweep_ks: tuple[int, ...] = tuple(range(1, 11))
    panel_k: int = 2
    test_fraction: float = 0.2
    split_seed: int = 5
    projection_split: str = "all"
    out_root: str = "runs/experiment"
    seed: int = 0

    def validate(self) -> None:
        self.phantom.validate()
        self.model.validate()
        self.train.validate()
        self.distortion.validate()
        self.projection.validate()
        if self.knn_k < 1 or self.panel_k < 1:
            raise ValueError("knn_k and panel_k must be >= 1")
        if not self.sweep_ks or len(set(self.sweep_ks)) != len(self.sweep_ks):
            raise ValueError(f"sweep_ks must be nonempty and unique, got {self.sweep_ks}")
        if not 0 <= self.test_fraction <= 1:
            raise ValueError(f"test_fraction must be in [0, 1], got {self.test_fraction}")
        if self.projection_split not in ("all", "train", "test"):
            raise ValueError(f"projection_split must be all, train or test, got {self.projection_split!r}")
        if self.model.n_regions != self.phantom.n_regions:
            raise ValueError(
                f"model.n_regions ({self.model.n_regions}) must match phantom.n_regions ({self.phantom.n_regions})"
            )

    def to_dict(self) -> dict:
        return {
            "phantom": self.phantom.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "distortion": self.distortion.to_dict(),
            "projection": self.projection.to_dict(),
            "knn_k": self.knn_k,
            "sweep_ks": list(self.sweep_ks),
            "panel_k": self.panel_k,
            "test_fraction": self.test_fraction,
            "split_seed": self.split_seed,
            "projection_split": self.projection_split,
            "out_root": self.out_root,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        seed = int(d.get("seed", 0))

        def sub(key, sub_cls, offset):
            sub_d = dict(d.get(key, {}))
            sub_d.setdefault("seed", seed + offset)
            return sub_cls.from_dict(sub_d)

        defaults = cls()
        return cls(
            phantom=sub("phantom", PhantomConfig, 0),
            model=sub("model", ModelConfig, 1) if "model" in d else ModelConfig(channels=16, seed=seed + 1),
            train=sub("train", TrainConfig, 2),
            distortion=sub("distortion", DistortionParams, 3),
            projection=sub("projection", ProjectionConfig, 4),
            knn_k=int(d.get("knn_k", defaults.knn_k)),
            sweep_ks=tuple(d.get("sweep_ks", defaults.sweep_ks)),
            panel_k=int(d.get("panel_k", defaults.panel_k)),
            test_fraction=float(d.get("test_fraction", defaults.test_fraction)),
            split_seed=int(d.get("split_seed", seed + 5)),
            projection_split=str(d.get("projection_split", defaults.projection_split)),
            out_root=str(d.get("out_root", defaults.out_root)),
            seed=seed,
        )


def reseeded(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Re-derive every module seed from a new global seed."""
    d = config.to_dict()
    d["seed"] = seed
    for key, offset in (("phantom", 0), ("model", 1), ("train", 2), ("distortion", 3), ("projection", 4)):
        d[key] = dict(d[key])
        d[key]["seed"] = seed + offset
    d["split_seed"] = seed + 5
    return ExperimentConfig.from_dict(d)


class ExperimentPaths:
    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.dataset = self.root / "dataset"
        self.manifest = self.dataset / "manifest.json"
        self.manifest_split = self.dataset / "manifest.split.json"
        self.train_dir = self.root / "train"
        self.checkpoint = self.train_dir / "final.ckpt"
        self.tables = self.root / "tables"
        self.train_table = self.tables / "train.tbl"
        self.test_table = self.tables / "test.tbl"
        self.reports = self.root / "reports"
        self.knn_report = self.reports / "knn_k5.json"
        self.sweep_dir = self.reports / "sweep"
        self.distortion_report = self.reports / "distortion.json"
        self.viz = self.root / "viz"
        self.tsne_png = self.viz / "tsne.png"
        self.tsne_csv = self.viz / "tsne.csv"
        self.panels_index = self.viz / "panels.json"
        self.stamps = self.root / "stamps"
        self.summary = self.root / "summary.json"


def _stage_slice(config: ExperimentConfig, stage: str) -> dict:
    if stage == "generate":
        return {"phantom": config.phantom.to_dict()}
    if stage == "split":
        return {"test_fraction": config.test_fraction, "split_seed": config.split_seed}
    if stage == "train":
        return {"model": config.model.to_dict(), "train": config.train.to_dict()}
    if stage == "embed":
        return {"patch_size": list(config.train.patch_size)}
    if stage == "eval_knn":
        return {"knn_k": config.knn_k}
    if stage == "sweep_k":
        return {"sweep_ks": list(config.sweep_ks)}
    if stage == "eval_distortion":
        return {"distortion": config.distortion.to_dict(), "knn_k": config.knn_k}
    if stage == "tsne":
        return {"projection": config.projection.to_dict(), "projection_split": config.projection_split}
    if stage == "panels":
        return {"panel_k": config.panel_k}
    raise ValueError(f"unknown stage {stage!r}")


def _stage_hashes(config: ExperimentConfig) -> dict[str, str]:
    hashes = {}
    prev = ""
    for stage in STAGES:
        prev = sha256_text(dumps_canonical({"stage": stage, "slice": _stage_slice(config, stage), "prev": prev}))
        hashes[stage] = prev
    return hashes


def _stamp_ok(stamp_path: Path, input_hash: str, root: Path) -> bool:
    if not stamp_path.exists():
        return False
    stamp = read_json(stamp_path)
    if stamp.get("input_hash") != input_hash:
        return False
    return all((root / rel).exists() for rel in stamp.get("outputs", []))


def run_pipeline(config: ExperimentConfig, out_root: Path | str | None = None, echo=None) -> dict:
    """Execute all stages (skipping stamped ones) and write summary.json."""
    config.validate()
    paths = ExperimentPaths(out_root if out_root is not None else config.out_root)
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.stamps.mkdir(parents=True, exist_ok=True)
    write_json(paths.root / "config.json", config.to_dict())
    hashes = _stage_hashes(config)

    def stage_fns():
        yield "generate", _stage_generate
        yield "split", _stage_split
        yield "train", _stage_train
        yield "embed", _stage_embed
        yield "eval_knn", _stage_eval_knn
        yield "sweep_k", _stage_sweep_k
        yield "eval_distortion", _stage_eval_distortion
        yield "tsne", _stage_tsne
        yield "panels", _stage_panels

    stage_summaries = []
    for name, fn in stage_fns():
        stamp_path = paths.stamps / f"{name}.json"
        t0 = time.time()
        if _stamp_ok(stamp_path, hashes[name], paths.root):
            stage_summaries.append({"name": name, "status": "completed", "reused": True, "duration_s": 0.0,
                                    "outputs": read_json(stamp_path)["outputs"]})
            if echo:
                echo(f"stage {name}: reused")
            continue
        try:
            outputs = fn(config, paths)
        except Exception as e:
            raise StageError(f"stage '{name}' failed: {e}") from e
        rel_outputs = [str(Path(p).relative_to(paths.root)) for p in outputs]
        write_json(stamp_path, {"stage": name, "input_hash": hashes[name], "outputs": rel_outputs})
        duration = time.time() - t0
        stage_summaries.append({"name": name, "status": "completed", "reused": False,
                                "duration_s": round(duration, 3), "outputs": rel_outputs})
        if echo:
            echo(f"stage {name}: completed in {duration:.1f}s")

    knn = read_json(paths.knn_report)
    distortion = read_json(paths.distortion_report)
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "config": config.to_dict(),
        "stages": stage_summaries,
        "metrics": {
            "knn": {"k": knn["k"], "accuracy": knn["accuracy"], "rmse_mm": knn["rmse_mm"],
                     "rmse_baseline_train_mean_mm": knn["rmse_baseline_train_mean_mm"]},
            "distortion_accuracy_delta": distortion["accuracy_delta"],
        },
    }
    write_json(paths.summary, summary)
    return summary


def _stage_generate(config: ExperimentConfig, paths: ExperimentPaths):
    generate_dataset(config.phantom, paths.dataset)
    return [paths.manifest]


def _stage_split(config: ExperimentConfig, paths: ExperimentPaths):
    manifest, _ = load_manifest(paths.manifest)
    tagged = split_dataset(manifest, config.test_fraction, config.split_seed)
    save_manifest(tagged, paths.manifest_split)
    return [paths.manifest_split]


def _stage_train(config: ExperimentConfig, paths: ExperimentPaths):
    manifest, data_dir = load_manifest(paths.manifest_split)
    report = train(manifest, data_dir, config.model, config.train, paths.train_dir, split="train")
    return [report.final_checkpoint, report.best_checkpoint, paths.train_dir / "train_log.jsonl"]


def _stage_embed(config: ExperimentConfig, paths: ExperimentPaths):
    manifest, data_dir = load_manifest(paths.manifest_split)
    paths.tables.mkdir(parents=True, exist_ok=True)
    embed_dataset(paths.checkpoint, manifest, data_dir, "train", paths.train_table, patch_size=config.train.patch_size)
    embed_dataset(paths.checkpoint, manifest, data_dir, "test", paths.test_table, patch_size=config.train.patch_size)
    return [paths.train_table, paths.test_table]


def _stage_eval_knn(config: ExperimentConfig, paths: ExperimentPaths):
    train_table = EmbeddingTable.load(paths.train_table)
    test_table = EmbeddingTable.load(paths.test_table)
    report = eval_knn(train_table, test_table, config.knn_k)
    paths.reports.mkdir(parents=True, exist_ok=True)
    write_json(paths.knn_report, report.to_dict())
    return [paths.knn_report]


def _stage_sweep_k(config: ExperimentConfig, paths: ExperimentPaths):
    train_table = EmbeddingTable.load(paths.train_table)
    test_table = EmbeddingTable.load(paths.test_table)
    reports = sweep_k(train_table, test_table, config.sweep_ks)
    paths.sweep_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for rep in reports:
        path = paths.sweep_dir / f"k_{rep.k:02d}.json"
        write_json(path, rep.to_dict())
        outputs.append(path)
    png, csv_path = emit_k_sweep(reports, paths.sweep_dir / "k_sweep.png")
    return outputs + [png, csv_path]


def _stage_eval_distortion(config: ExperimentConfig, paths: ExperimentPaths):
    manifest, data_dir = load_manifest(paths.manifest_split)
    report = eval_distortion(
        paths.checkpoint, manifest, data_dir, config.distortion, config.knn_k,
        patch_size=config.train.patch_size,
    )
    write_json(paths.distortion_report, report)
    return [paths.distortion_report]


def _stage_tsne(config: ExperimentConfig, paths: ExperimentPaths):
    if config.projection_split == "train":
        table = EmbeddingTable.load(paths.train_table)
    elif config.projection_split == "test":
        table = EmbeddingTable.load(paths.test_table)
    else:
        train_table = EmbeddingTable.load(paths.train_table)
        test_table = EmbeddingTable.load(paths.test_table)
        table = EmbeddingTable(train_table.fingerprint, train_table.channels,
                               train_table.rows + test_table.rows)
    proj = config.projection
    if proj.method == "tsne" and len(table.rows) < 10:
        proj = ProjectionConfig(perplexity=proj.perplexity, n_iterations=proj.n_iterations,
                                seed=proj.seed, method="pca-fallback")
    limit = max_valid_perplexity(len(table.rows))
    if proj.method == "tsne" and proj.perplexity > limit:
        proj = ProjectionConfig(perplexity=limit, n_iterations=proj.n_iterations, seed=proj.seed, method=proj.method)
    coords = project_2d(table, proj)
    png, csv_path = emit_scatter(coords, table, paths.tsne_png)
    return [png, csv_path]


def _stage_panels(config: ExperimentConfig, paths: ExperimentPaths):
    manifest, data_dir = load_manifest(paths.manifest_split)
    train_table = EmbeddingTable.load(paths.train_table)
    test_table = EmbeddingTable.load(paths.test_table)
    merged = EmbeddingTable(
        fingerprint=train_table.fingerprint,
        channels=train_table.channels,
        rows=train_table.rows + test_table.rows,
    )

    queries = []
    for wanted in ("schwannoma", "metastasis"):
        match = next((r.tumor_id for r in sorted(test_table.rows, key=lambda r: r.tumor_id)
                      if r.labels["type_label"] == wanted), None)
        if match:
            queries.append(match)
    if not queries:
        queries = [r.tumor_id for r in sorted(test_table.rows, key=lambda r: r.tumor_id)[:2]]

    outputs = []
    panel_meta = []
    for tumor_id in queries:
        png, sidecar = emit_retrieval_panel(
            manifest, data_dir, merged, tumor_id, config.panel_k, paths.viz / f"panel_{tumor_id}.png"
        )
        outputs.extend([png, sidecar])
        panel_meta.append({"tumor_id": tumor_id, "image": str(png.name), "sidecar": str(sidecar.name)})
    write_json(paths.panels_index, {"panels": panel_meta})
    return outputs + [paths.panels_index]


def ensure_dataset(config: ExperimentConfig, out_root: Path | str, echo=None) -> ExperimentPaths:
    """Run just the generate and split stages (with stamps) under out_root."""
    config.validate()
    paths = ExperimentPaths(out_root)
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.stamps.mkdir(parents=True, exist_ok=True)
    hashes = _stage_hashes(config)
    for name, fn in (("generate", _stage_generate), ("split", _stage_split)):
        stamp_path = paths.stamps / f"{name}.json"
        if _stamp_ok(stamp_path, hashes[name], paths.root):
            if echo:
                echo(f"stage {name}: reused")
            continue
        try:
            outputs = fn(config, paths)
        except Exception as e:
            raise StageError(f"stage '{name}' failed: {e}") from e
        write_json(stamp_path, {"stage": name, "input_hash": hashes[name],
                                "outputs": [str(Path(p).relative_to(paths.root)) for p in outputs]})
        if echo:
            echo(f"stage {name}: completed")
    return paths


def _train_embed_eval(config: ExperimentConfig, paths: ExperimentPaths, run_dir: Path, echo=None) -> KnnEvalReport:
    manifest, data_dir = load_manifest(paths.manifest_split)
    report = train(manifest, data_dir, config.model, config.train, run_dir / "train", split="train")
    train_table = embed_dataset(report.final_checkpoint, manifest, data_dir, "train",
                                run_dir / "train.tbl", patch_size=config.train.patch_size)
    test_table = embed_dataset(report.final_checkpoint, manifest, data_dir, "test",
                               run_dir / "test.tbl", patch_size=config.train.patch_size)
    knn = eval_knn(train_table, test_table, config.knn_k)
    write_json(run_dir / "knn.json", knn.to_dict())
    return knn


def channel_sweep(config: ExperimentConfig, channels: list[int], out_root: Path | str | None = None, echo=None) -> dict:
    """Train one model per channel count on a shared dataset and seed; emit a table."""
    if not channels:
        raise ValueError("channel list must be nonempty")
    if any(c < 1 for c in channels):
        raise ValueError(f"channel counts must be positive, got {channels}")
    if len(set(channels)) != len(channels):
        raise ValueError(f"duplicate channel count in {channels}")
    root = Path(out_root if out_root is not None else config.out_root)
    paths = ensure_dataset(config, root, echo=echo)

    from dataclasses import replace

    rows = []
    for c in channels:
        if echo:
            echo(f"channel sweep: training C={c}")
        sub = replace(config, model=replace(config.model, channels=c))
        knn = _train_embed_eval(sub, paths, root / "channels" / f"c{c:03d}", echo=echo)
        rows.append({"channels": c, "accuracy": knn.accuracy, "rmse_mm": knn.rmse_mm})

    report = {"schema_version": SUMMARY_SCHEMA_VERSION, "rows": rows}
    write_json(root / "channels" / "sweep.json", report)
    _write_comparison_csv(root / "channels" / "sweep.csv", rows, "channels")
    return report


def run_ablations(config: ExperimentConfig, task_subsets: list[tuple[str, ...]], out_root: Path | str | None = None, echo=None) -> dict:
    """Tab-3-style harness: one run per task subset, shared seed, KNN metrics per row."""
    root = Path(out_root if out_root is not None else config.out_root)
    paths = ensure_dataset(config, root, echo=echo)
    manifest, data_dir = load_manifest(paths.manifest_split)

    runs = ablation_suite(manifest, data_dir, config.model, config.train, task_subsets, root / "ablations")
    rows = []
    for run in runs:
        if echo:
            echo(f"ablation {run['name']}: evaluating")
        run_dir = Path(run["out_dir"])
        train_table = embed_dataset(run["final_checkpoint"], manifest, data_dir, "train",
                                    run_dir / "train.tbl", patch_size=config.train.patch_size)
        test_table = embed_dataset(run["final_checkpoint"], manifest, data_dir, "test",
                                   run_dir / "test.tbl", patch_size=config.train.patch_size)
        knn = eval_knn(train_table, test_table, config.knn_k)
        write_json(run_dir / "knn.json", knn.to_dict())
        rows.append({"tasks": run["tasks"], "name": run["name"], "accuracy": knn.accuracy, "rmse_mm": knn.rmse_mm})

    report = {"schema_version": SUMMARY_SCHEMA_VERSION, "rows": rows}
    write_json(root / "ablations" / "comparison.json", report)
    _write_comparison_csv(root / "ablations" / "comparison.csv", rows, "name")
    return report


def _write_comparison_csv(path: Path, rows: list[dict], key: str) -> None:
    import csv

    tasks = list(rows[0]["accuracy"]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([key] + [f"accuracy_{t}" for t in tasks] + ["rmse_mm"])
        for row in rows:
            writer.writerow(
                [row[key]]
                + [("" if row["accuracy"][t] is None else repr(float(row["accuracy"][t]))) for t in tasks]
                + [repr(float(row["rmse_mm"]))]
            )
