"""Tumor embedding extraction, exact KNN retrieval, and the evaluation protocol.

Embeddings live in a flat table (one row per tumor). Retrieval is exact
Euclidean distance over raw vectors with deterministic tie-breaking by tumor
id. Evaluation queries the test rows against a train-table index, always
excluding rows from the query's own image, and reports per-task KNN accuracy
plus linear-size regression RMSE along with a per-query prediction log.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.random import Generator, default_rng

from .boxes import BBox
from .io import sha256_file
from .model import CLASSIFICATION_TASKS, MultitaskNetwork, load_checkpoint, roipool
from .phantom import (
    BINARY_LABEL_VALUES,
    TUMOR_TYPES,
    Volume,
    entry_records,
    load_volume,
    manifest_images,
)

TABLE_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1
LABEL_KEYS = ("type_label", "region_label", "left_right", "front_rear", "upper_lower", "linear_size_mm")

_TASK_TO_LABEL_KEY = {
    "type": "type_label",
    "region": "region_label",
    "left_right": "left_right",
    "front_rear": "front_rear",
    "upper_lower": "upper_lower",
}


def task_label_key(task: str) -> str:
    if task not in _TASK_TO_LABEL_KEY:
        raise ValueError(f"unknown task {task!r}")
    return _TASK_TO_LABEL_KEY[task]


def label_index(task: str, value) -> int:
    """Canonical class index of a label value, used for deterministic tie-breaks."""
    if task == "type":
        return TUMOR_TYPES.index(value)
    if task == "region":
        return int(value)
    return BINARY_LABEL_VALUES[task].index(value)


@dataclass
class TableRow:
    tumor_id: str
    image_id: str
    embedding: np.ndarray
    labels: dict

    def to_meta(self) -> dict:
        return {"tumor_id": self.tumor_id, "image_id": self.image_id, "labels": self.labels}


@dataclass
class EmbeddingTable:
    fingerprint: str
    channels: int
    rows: list[TableRow]

    def validate(self) -> None:
        ids = [r.tumor_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise ValueError("tumor_ids must be unique")
        for r in self.rows:
            if r.embedding.shape != (self.channels,):
                raise ValueError(f"{r.tumor_id}: embedding shape {r.embedding.shape} != ({self.channels},)")
            if not np.all(np.isfinite(r.embedding)):
                raise ValueError(f"{r.tumor_id}: embedding has non-finite values")

    def save(self, path: Path | str) -> None:
        """Header JSON line, raw float32 vector block, then one JSON line per row."""
        self.validate()
        header = {
            "schema_version": TABLE_SCHEMA_VERSION,
            "channels": self.channels,
            "fingerprint": self.fingerprint,
            "n_rows": len(self.rows),
            "dtype": "<f4",
            "label_schema": list(LABEL_KEYS),
        }
        with open(path, "wb") as f:
            f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            for r in self.rows:
                f.write(np.ascontiguousarray(r.embedding, dtype="<f4").tobytes())
            f.write(b"\n")
            for r in self.rows:
                f.write((json.dumps(r.to_meta(), sort_keys=True) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: Path | str) -> "EmbeddingTable":
        with open(path, "rb") as f:
            header = json.loads(f.readline().decode("utf-8"))
            if header.get("schema_version") != TABLE_SCHEMA_VERSION:
                raise ValueError(f"{path}: unsupported table schema {header.get('schema_version')}")
            n, c = header["n_rows"], header["channels"]
            block = f.read(n * c * 4)
            if len(block) != n * c * 4:
                raise ValueError(f"{path}: truncated vector block")
            vectors = np.frombuffer(block, dtype="<f4").reshape(n, c)
            if f.read(1) != b"\n":
                raise ValueError(f"{path}: malformed table (missing separator)")
            rows = []
            for i in range(n):
                meta = json.loads(f.readline().decode("utf-8"))
                rows.append(
                    TableRow(
                        tumor_id=meta["tumor_id"],
                        image_id=meta["image_id"],
                        embedding=vectors[i].copy(),
                        labels=meta["labels"],
                    )
                )
        table = cls(fingerprint=header["fingerprint"], channels=c, rows=rows)
        table.validate()
        return table


class RetrievalIndex:
    """Immutable snapshot of an embedding table for exact Euclidean queries."""

    def __init__(self, table: EmbeddingTable, normalize: bool = False):
        table.validate()
        self.table = table
        self.metric = "euclidean"
        self.normalize = normalize
        vectors = np.stack([r.embedding for r in table.rows]).astype(np.float64) if table.rows else np.zeros((0, table.channels))
        if normalize and len(vectors):
            norms = np.linalg.norm(vectors, axis=1, keepdims=True)
            vectors = vectors / np.maximum(norms, 1e-12)
        self.vectors = vectors
        self.tumor_ids = [r.tumor_id for r in table.rows]
        self.image_ids = [r.image_id for r in table.rows]

    def __len__(self) -> int:
        return len(self.tumor_ids)

    def prepare_query(self, embedding: np.ndarray) -> np.ndarray:
        e = np.asarray(embedding, dtype=np.float64)
        if e.shape != (self.table.channels,):
            raise ValueError(f"query embedding shape {e.shape} != ({self.table.channels},)")
        if self.normalize:
            e = e / max(np.linalg.norm(e), 1e-12)
        return e

    def candidate_indices(self, exclude_image_id: str | None):
        if exclude_image_id is None:
            return list(range(len(self.tumor_ids)))
        return [i for i, img in enumerate(self.image_ids) if img != exclude_image_id]

    def distances(self, embedding: np.ndarray, indices) -> np.ndarray:
        diff = self.vectors[indices] - self.prepare_query(embedding)
        return np.sqrt(np.sum(diff * diff, axis=1))


@dataclass
class Neighbor:
    tumor_id: str
    distance: float
    row: TableRow


@dataclass
class QueryResult:
    neighbors: list[Neighbor]
    truncated: bool


def query(index: RetrievalIndex, embedding: np.ndarray, k: int, exclude_image_id: str | None = None) -> QueryResult:
    """Exact top-k by ascending Euclidean distance, ties broken by tumor id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    indices = index.candidate_indices(exclude_image_id)
    if not indices:
        raise ValueError("index is empty after exclusion")
    dists = index.distances(embedding, indices)
    order = sorted(range(len(indices)), key=lambda j: (dists[j], index.tumor_ids[indices[j]]))
    truncated = k > len(indices)
    neighbors = [
        Neighbor(
            tumor_id=index.tumor_ids[indices[j]],
            distance=float(dists[j]),
            row=index.table.rows[indices[j]],
        )
        for j in order[: min(k, len(indices))]
    ]
    return QueryResult(neighbors=neighbors, truncated=truncated)


@dataclass
class ClassifyResult:
    label: object
    neighbor_ids: list[str]
    truncated: bool


def knn_classify(
    index: RetrievalIndex,
    embedding: np.ndarray,
    k: int,
    task: str,
    exclude_image_id: str | None = None,
) -> ClassifyResult:
    """Majority vote over the K nearest rows that carry the task's label.

    Vote ties go to the class with the smaller summed distance, then to the
    lower class index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    key = task_label_key(task)
    indices = [i for i in index.candidate_indices(exclude_image_id) if index.table.rows[i].labels.get(key) is not None]
    if not indices:
        raise ValueError(f"no labeled rows for task {task!r}")
    dists = index.distances(embedding, indices)
    order = sorted(range(len(indices)), key=lambda j: (dists[j], index.tumor_ids[indices[j]]))
    top = order[: min(k, len(indices))]

    votes: Counter = Counter()
    dist_sums: dict = {}
    for j in top:
        label = index.table.rows[indices[j]].labels[key]
        lkey = label if not isinstance(label, list) else tuple(label)
        votes[lkey] += 1
        dist_sums[lkey] = dist_sums.get(lkey, 0.0) + float(dists[j])
    best_count = max(votes.values())
    tied = [label for label, n in votes.items() if n == best_count]
    winner = min(tied, key=lambda lab: (dist_sums[lab], label_index(task, lab)))
    return ClassifyResult(
        label=winner,
        neighbor_ids=[index.tumor_ids[indices[j]] for j in top],
        truncated=k > len(indices),
    )


@dataclass
class RegressResult:
    value: float
    neighbor_ids: list[str]
    truncated: bool


def knn_regress(index: RetrievalIndex, embedding: np.ndarray, k: int, exclude_image_id: str | None = None) -> RegressResult:
    """Arithmetic mean of the K nearest rows' linear sizes (mm)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise ValueError("empty index")
    result = query(index, embedding, k, exclude_image_id)
    sizes = [float(n.row.labels["linear_size_mm"]) for n in result.neighbors]
    return RegressResult(
        value=float(np.mean(sizes)),
        neighbor_ids=[n.tumor_id for n in result.neighbors],
        truncated=result.truncated,
    )


@dataclass
class KnnEvalReport:
    k: int
    tasks: tuple[str, ...]
    accuracy: dict
    evaluable: dict
    rmse_mm: float
    rmse_baseline_train_mean_mm: float
    n_test_rows: int
    n_train_rows: int
    fingerprint: str
    exclude_same_image: bool
    degenerate_distance_warning: bool
    predictions: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["schema_version"] = REPORT_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KnnEvalReport":
        d = {k: v for k, v in d.items() if k != "schema_version"}
        d["tasks"] = tuple(d["tasks"])
        return cls(**d)


def eval_knn(
    train_table: EmbeddingTable,
    test_table: EmbeddingTable,
    k: int,
    tasks: tuple[str, ...] = CLASSIFICATION_TASKS,
    exclude_same_image: bool = True,
    normalize: bool = False,
) -> KnnEvalReport:
    """KNN accuracy per classification task plus linear-size RMSE on the test rows."""
    if train_table.fingerprint != test_table.fingerprint:
        raise ValueError(
            f"fingerprint mismatch: train {train_table.fingerprint[:12]} vs test {test_table.fingerprint[:12]}"
        )
    if train_table.channels != test_table.channels:
        raise ValueError("tables disagree on embedding dimensionality")
    index = RetrievalIndex(train_table, normalize=normalize)
    if len(index) == 0:
        raise ValueError("train table is empty")

    correct: Counter = Counter()
    evaluable: Counter = Counter()
    sq_errors = []
    predictions = []
    degenerate = False

    train_sizes = [float(r.labels["linear_size_mm"]) for r in train_table.rows]
    train_mean_size = float(np.mean(train_sizes))

    for row in test_table.rows:
        exclude = row.image_id if exclude_same_image else None
        indices = index.candidate_indices(exclude)
        if not indices:
            raise ValueError(f"no candidates left for {row.tumor_id} after exclusion")
        dists = index.distances(row.embedding, indices)
        if len(dists) > 1 and float(dists.max() - dists.min()) <= 1e-9:
            degenerate = True

        entry = {"tumor_id": row.tumor_id, "image_id": row.image_id, "tasks": {}, "size": {}}
        for task in tasks:
            key = task_label_key(task)
            true = row.labels.get(key)
            if true is None:
                continue
            res = knn_classify(index, row.embedding, k, task, exclude)
            ok = res.label == true
            correct[task] += int(ok)
            evaluable[task] += 1
            entry["tasks"][task] = {
                "true": true,
                "pred": res.label,
                "correct": bool(ok),
                "neighbor_ids": res.neighbor_ids,
            }
        true_size = float(row.labels["linear_size_mm"])
        reg = knn_regress(index, row.embedding, k, exclude)
        sq_errors.append((reg.value - true_size) ** 2)
        entry["size"] = {"true": true_size, "pred": reg.value, "neighbor_ids": reg.neighbor_ids}
        predictions.append(entry)

    accuracy = {task: (correct[task] / evaluable[task] if evaluable[task] else None) for task in tasks}
    baseline_sq = [(train_mean_size - float(r.labels["linear_size_mm"])) ** 2 for r in test_table.rows]
    return KnnEvalReport(
        k=k,
        tasks=tuple(tasks),
        accuracy=accuracy,
        evaluable={task: int(evaluable[task]) for task in tasks},
        rmse_mm=float(np.sqrt(np.mean(sq_errors))),
        rmse_baseline_train_mean_mm=float(np.sqrt(np.mean(baseline_sq))),
        n_test_rows=len(test_table.rows),
        n_train_rows=len(train_table.rows),
        fingerprint=train_table.fingerprint,
        exclude_same_image=exclude_same_image,
        degenerate_distance_warning=degenerate,
        predictions=predictions,
    )


def sweep_k(
    train_table: EmbeddingTable,
    test_table: EmbeddingTable,
    k_values,
    tasks: tuple[str, ...] = CLASSIFICATION_TASKS,
) -> list[KnnEvalReport]:
    """One evaluation report per K."""
    k_values = list(k_values)
    if not k_values:
        raise ValueError("k_values must be nonempty")
    if any(k < 1 for k in k_values):
        raise ValueError(f"every K must be >= 1, got {k_values}")
    if len(set(k_values)) != len(k_values):
        raise ValueError(f"duplicate K in {k_values}")
    return [eval_knn(train_table, test_table, k, tasks) for k in k_values]


@dataclass
class DistortionParams:
    sigma_log2_scale: float = 1 / 3
    sigma_translation_fraction: float = 1 / 10
    seed: int = 0

    def validate(self) -> None:
        if self.sigma_log2_scale < 0 or self.sigma_translation_fraction < 0:
            raise ValueError("distortion sigmas must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionParams":
        return cls(**d)


def sample_box_distortion(rng: Generator, params: DistortionParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis (scale, shift): scale = 2**N(0, sigma_scale), shift in units of box side."""
    scales = 2.0 ** rng.normal(0.0, params.sigma_log2_scale, size=3)
    shifts = rng.normal(0.0, params.sigma_translation_fraction, size=3)
    return scales, shifts


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5)) if x >= 0 else int(np.ceil(x - 0.5))


def distort_bbox(bbox: BBox, volume_shape: tuple[int, int, int], params: DistortionParams, rng: Generator) -> BBox:
    """Corrupt a box by per-axis log-normal scaling about its center plus
    Gaussian translation proportional to its side, then round and clip."""
    params.validate()
    scales, shifts = sample_box_distortion(rng, params)
    start, stop = [], []
    for a in range(3):
        side = bbox.stop[a] - bbox.start[a]
        half = side / 2
        center = (bbox.start[a] + bbox.stop[a]) / 2
        new_half = half * float(scales[a])
        new_center = center + side * float(shifts[a])
        lo = _round_half_away(new_center - new_half)
        hi = _round_half_away(new_center + new_half)
        if hi <= lo:
            hi = lo + 1
        v = int(volume_shape[a])
        lo = max(0, min(lo, v - 1))
        hi = max(lo + 1, min(hi, v))
        start.append(lo)
        stop.append(hi)
    return BBox(tuple(start), tuple(stop))


def _ceil_to(value: int, multiple: int) -> int:
    return ((value + multiple - 1) // multiple) * multiple


def inference_patch_box(
    clipped: BBox,
    volume_shape: tuple[int, int, int],
    patch_size: tuple[int, int, int],
    factor: int,
) -> tuple[BBox, tuple[int, int, int]]:
    """Where to crop for embedding extraction.

    Per axis: the smallest factor-aligned side that is at least the configured
    patch side and covers the box, centered on the box and shifted inward at
    volume borders. Zero padding (at the high end) happens only when the
    volume itself is smaller than the required side.
    """
    starts, stops, pads = [], [], []
    for a in range(3):
        need = max(_ceil_to(patch_size[a], factor), _ceil_to(clipped.sides[a], factor))
        v = volume_shape[a]
        if need <= v:
            center = (clipped.start[a] + clipped.stop[a]) / 2
            lo = _round_half_away(center - need / 2)
            lo = max(0, min(lo, v - need))
            starts.append(lo)
            stops.append(lo + need)
            pads.append(0)
        else:
            starts.append(0)
            stops.append(v)
            pads.append(need - v)
    return BBox(tuple(starts), tuple(stops)), tuple(pads)


class EmbeddingExtractor:
    """Loads a checkpoint once and extracts tumor embeddings from volumes."""

    def __init__(self, checkpoint: Path | str | MultitaskNetwork, patch_size=(32, 32, 32), fingerprint: str | None = None):
        if isinstance(checkpoint, MultitaskNetwork):
            self.net = checkpoint
            self.fingerprint = fingerprint or "in-memory"
        else:
            self.net = load_checkpoint(checkpoint)
            self.fingerprint = sha256_file(checkpoint)
        self.net.eval()
        self.patch_size = tuple(patch_size)
        self.config = self.net.config

    def extract(self, volume: Volume | np.ndarray, bbox: BBox) -> np.ndarray:
        data = volume.data if isinstance(volume, Volume) else volume
        shape = tuple(data.shape)
        clipped = bbox.clip(shape)
        patch_box, pads = inference_patch_box(clipped, shape, self.patch_size, self.config.down_up_factor)
        crop = np.ascontiguousarray(data[patch_box.slices()], dtype=np.float32)
        if any(pads):
            crop = np.pad(crop, [(0, p) for p in pads])
        rebased = clipped.shift(tuple(-s for s in patch_box.start))
        with torch.no_grad():
            fm = self.net.backbone(torch.from_numpy(crop)[None, None])
            emb = roipool(fm[0], rebased)
        return emb.numpy().astype(np.float32)


def extract_embedding(
    checkpoint: Path | str,
    volume: Volume | np.ndarray,
    bbox: BBox,
    patch_size=(32, 32, 32),
) -> np.ndarray:
    return EmbeddingExtractor(checkpoint, patch_size).extract(volume, bbox)


def embed_dataset(
    checkpoint: Path | str,
    manifest: dict,
    data_dir: Path | str,
    split: str,
    out_path: Path | str | None = None,
    patch_size=(32, 32, 32),
) -> EmbeddingTable:
    """One embedding row per tumor in the split; optionally saved to disk."""
    extractor = EmbeddingExtractor(checkpoint, patch_size)
    rows = []
    for entry in manifest_images(manifest, split):
        volume = load_volume(entry, data_dir)
        for record in entry_records(entry):
            vec = extractor.extract(volume, record.bbox)
            labels = {
                "type_label": record.type_label,
                "region_label": record.region_label,
                "left_right": record.left_right,
                "front_rear": record.front_rear,
                "upper_lower": record.upper_lower,
                "linear_size_mm": record.linear_size_mm,
            }
            rows.append(TableRow(tumor_id=record.tumor_id, image_id=record.image_id, embedding=vec, labels=labels))
    if not rows:
        raise ValueError(f"no tumors in split {split!r}")
    table = EmbeddingTable(fingerprint=extractor.fingerprint, channels=extractor.config.channels, rows=rows)
    table.validate()
    if out_path is not None:
        table.save(out_path)
    return table


def eval_distortion(
    checkpoint: Path | str,
    manifest: dict,
    data_dir: Path | str,
    params: DistortionParams,
    k: int,
    patch_size=(32, 32, 32),
    tasks: tuple[str, ...] = CLASSIFICATION_TASKS,
) -> dict:
    """Paired clean-vs-distorted evaluation of test-set boxes against clean train boxes."""
    params.validate()
    extractor = EmbeddingExtractor(checkpoint, patch_size)
    train_table = embed_dataset(checkpoint, manifest, data_dir, "train", patch_size=patch_size)

    rng = default_rng(params.seed)
    clean_rows, distorted_rows = [], []
    for entry in manifest_images(manifest, "test"):
        volume = load_volume(entry, data_dir)
        for record in entry_records(entry):
            labels = {
                "type_label": record.type_label,
                "region_label": record.region_label,
                "left_right": record.left_right,
                "front_rear": record.front_rear,
                "upper_lower": record.upper_lower,
                "linear_size_mm": record.linear_size_mm,
            }
            clean_vec = extractor.extract(volume, record.bbox)
            noisy_box = distort_bbox(record.bbox, volume.shape, params, rng)
            noisy_vec = extractor.extract(volume, noisy_box)
            clean_rows.append(TableRow(record.tumor_id, record.image_id, clean_vec, labels))
            distorted_rows.append(TableRow(record.tumor_id, record.image_id, noisy_vec, labels))
    if not clean_rows:
        raise ValueError("no tumors in split 'test'")

    clean_table = EmbeddingTable(extractor.fingerprint, extractor.config.channels, clean_rows)
    distorted_table = EmbeddingTable(extractor.fingerprint, extractor.config.channels, distorted_rows)
    clean = eval_knn(train_table, clean_table, k, tasks)
    distorted = eval_knn(train_table, distorted_table, k, tasks)

    deltas = {}
    for task in tasks:
        a, b = clean.accuracy.get(task), distorted.accuracy.get(task)
        deltas[task] = (b - a) if (a is not None and b is not None) else None
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "params": params.to_dict(),
        "k": k,
        "clean": clean.to_dict(),
        "distorted": distorted.to_dict(),
        "accuracy_delta": deltas,
        "rmse_delta_mm": distorted.rmse_mm - clean.rmse_mm,
    }
