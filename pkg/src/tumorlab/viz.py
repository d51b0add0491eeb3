"""Static analysis artifacts: 2D projections, K-sweep curves, retrieval panels.

Every image gets a machine-readable CSV or JSON twin carrying the same
values, so tests assert on the twin and never on pixels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Rectangle
from scipy.cluster.hierarchy import fcluster, linkage

from .io import write_json
from .phantom import TUMOR_TYPES, entry_records, load_volume, manifest_images
from .retrieval import EmbeddingTable, RetrievalIndex, query

TYPE_MARKERS = {"metastasis": "o", "meningioma": "s", "schwannoma": "^"}


@dataclass
class ProjectionConfig:
    perplexity: float = 30.0
    n_iterations: int = 1000
    seed: int = 0
    method: str = "tsne"

    def validate(self) -> None:
        if self.method not in ("tsne", "pca-fallback"):
            raise ValueError(f"method must be 'tsne' or 'pca-fallback', got {self.method!r}")
        if self.n_iterations < 250:
            raise ValueError(f"n_iterations must be >= 250, got {self.n_iterations}")
        if self.perplexity <= 0:
            raise ValueError(f"perplexity must be positive, got {self.perplexity}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionConfig":
        return cls(**d)


def project_2d(table: EmbeddingTable | np.ndarray, config: ProjectionConfig) -> np.ndarray:
    """Deterministic 2D projection of the table's embedding vectors."""
    config.validate()
    if isinstance(table, EmbeddingTable):
        vectors = np.stack([r.embedding for r in table.rows]).astype(np.float64)
    else:
        vectors = np.asarray(table, dtype=np.float64)
    n = vectors.shape[0]

    if config.method == "pca-fallback":
        if n < 2:
            raise ValueError(f"need at least 2 points, got {n}")
        centered = vectors - vectors.mean(axis=0)
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        k = min(2, vt.shape[0])
        coords = np.zeros((n, 2))
        coords[:, :k] = centered @ vt[:k].T
        return coords

    if n < 10:
        raise ValueError(f"t-SNE needs at least 10 points, got {n}")
    if config.perplexity >= (n - 1) / 3:
        raise ValueError(f"perplexity {config.perplexity} too large for {n} points (needs < {(n - 1) / 3:.1f})")
    from sklearn.manifold import TSNE

    tsne = TSNE(
        n_components=2,
        perplexity=config.perplexity,
        max_iter=config.n_iterations,
        random_state=config.seed,
        method="exact",
        init="pca",
    )
    coords = tsne.fit_transform(vectors)
    if not np.all(np.isfinite(coords)):
        raise RuntimeError("projection produced non-finite coordinates")
    return np.asarray(coords, dtype=np.float64)


def max_valid_perplexity(n_points: int) -> float:
    """Largest perplexity allowed by the (n-1)/3 rule, with a small margin."""
    return max(1.0, (n_points - 1) / 3 - 1e-6)


def emit_scatter(coords: np.ndarray, table: EmbeddingTable, out_path: Path | str) -> tuple[Path, Path]:
    """Scatter (color = linear size, marker = type) plus its CSV twin."""
    if len(table.rows) == 0:
        raise ValueError("empty table")
    if coords.shape[0] != len(table.rows):
        raise ValueError(f"{coords.shape[0]} coordinate rows vs {len(table.rows)} table rows")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_path.with_suffix(".csv")

    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["tumor_id", "x", "y", "linear_size_mm", "type_label"])
        for (x, y), row in zip(coords, table.rows):
            writer.writerow([row.tumor_id, repr(float(x)), repr(float(y)), repr(float(row.labels["linear_size_mm"])), row.labels["type_label"]])

    fig, ax = plt.subplots(figsize=(7, 6))
    sizes = np.array([float(r.labels["linear_size_mm"]) for r in table.rows])
    scatter = None
    for type_label, marker in TYPE_MARKERS.items():
        sel = [i for i, r in enumerate(table.rows) if r.labels["type_label"] == type_label]
        if not sel:
            continue
        scatter = ax.scatter(
            coords[sel, 0], coords[sel, 1], c=sizes[sel], marker=marker, label=type_label,
            vmin=sizes.min(), vmax=sizes.max(), cmap="viridis", edgecolors="k", linewidths=0.3,
        )
    if scatter is not None:
        fig.colorbar(scatter, ax=ax, label="linear size (mm)")
    ax.legend()
    ax.set_title("tumor embeddings, 2D projection")
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path, csv_path


def count_clusters_single_linkage(points: np.ndarray, cut_distance: float) -> int:
    """Number of single-linkage clusters when the dendrogram is cut at a distance."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return len(points)
    z = linkage(points, method="single")
    labels = fcluster(z, t=cut_distance, criterion="distance")
    return len(set(labels))


def _report_dict(report) -> dict:
    return report.to_dict() if hasattr(report, "to_dict") else dict(report)


def emit_k_sweep(reports, out_path: Path | str) -> tuple[Path, Path]:
    """Accuracy-per-task and RMSE curves over K, plus a long-format CSV twin."""
    reports = [_report_dict(r) for r in reports]
    if len(reports) < 2:
        raise ValueError(f"need at least 2 reports, got {len(reports)}")
    tasks = list(reports[0]["tasks"])
    for i, rep in enumerate(reports):
        if list(rep["tasks"]) != tasks:
            raise ValueError(f"report {i} (K={rep['k']}) has task set {rep['tasks']}, expected {tasks}")
        for task in tasks:
            if rep["accuracy"].get(task) is None:
                raise ValueError(f"report {i} (K={rep['k']}) is missing metric accuracy[{task}]")

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "k", "value"])
        for rep in reports:
            for task in tasks:
                writer.writerow([f"accuracy_{task}", rep["k"], repr(float(rep["accuracy"][task]))])
        for rep in reports:
            writer.writerow(["rmse_mm", rep["k"], repr(float(rep["rmse_mm"]))])

    ks = [rep["k"] for rep in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4.5))
    for task in tasks:
        ax1.plot(ks, [rep["accuracy"][task] for rep in reports], marker="o", label=task)
    ax1.set_xlabel("K")
    ax1.set_ylabel("accuracy")
    ax1.set_title("KNN accuracy per task")
    ax1.legend(fontsize=8)
    ax2.plot(ks, [rep["rmse_mm"] for rep in reports], marker="o", color="tab:red")
    ax2.set_xlabel("K")
    ax2.set_ylabel("RMSE (mm)")
    ax2.set_title("linear size regression")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path, csv_path


def emit_retrieval_panel(
    manifest: dict,
    data_dir: Path | str,
    table: EmbeddingTable,
    tumor_id: str,
    k: int,
    out_path: Path | str,
) -> tuple[Path, Path]:
    """Axial-slice montage of a query tumor and its top-K neighbors."""
    rows_by_id = {r.tumor_id: r for r in table.rows}
    if tumor_id not in rows_by_id:
        raise ValueError(f"unknown tumor_id {tumor_id!r}")
    entries = {e["image_id"]: e for e in manifest_images(manifest, "all")}
    records = {}
    for entry in manifest_images(manifest, "all"):
        for rec in entry_records(entry):
            records[rec.tumor_id] = rec

    index = RetrievalIndex(table)
    q_row = rows_by_id[tumor_id]
    result = query(index, q_row.embedding, k, exclude_image_id=q_row.image_id)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    panel_ids = [tumor_id] + [n.tumor_id for n in result.neighbors]
    fig, axes = plt.subplots(1, len(panel_ids), figsize=(3.2 * len(panel_ids), 3.6))
    axes = np.atleast_1d(axes)
    for ax, pid in zip(axes, panel_ids):
        rec = records[pid]
        volume = load_volume(entries[rec.image_id], data_dir)
        z_mid = int((rec.bbox.start[2] + rec.bbox.stop[2]) // 2)
        ax.imshow(volume.data[:, :, z_mid].T, origin="lower", cmap="gray")
        (x0, y0), (x1, y1) = rec.bbox.start[:2], rec.bbox.stop[:2]
        ax.add_patch(Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, fill=False, edgecolor="red", linewidth=1.2))
        tag = "query" if pid == tumor_id else f"d={next(n.distance for n in result.neighbors if n.tumor_id == pid):.2f}"
        ax.set_title(f"{pid}\n{rec.type_label}, {tag}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)

    sidecar = out_path.with_suffix(".json")
    write_json(
        sidecar,
        {
            "query": tumor_id,
            "k": k,
            "truncated": result.truncated,
            "neighbors": [{"tumor_id": n.tumor_id, "distance": n.distance} for n in result.neighbors],
        },
    )
    return out_path, sidecar
