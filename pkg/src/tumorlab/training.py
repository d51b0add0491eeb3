"""Patch sampling, the weighted multitask loss, and the optimization loop.

The loss is cross-entropy per head: binary over voxels for segmentation
(averaged over voxels) and per-tumor multiclass for the classification tasks
(a plain sum over tumors). The total is a weighted sum of the per-task terms;
tumors with a missing label contribute nothing to that task and are counted
as omitted. Batches average the per-patch totals, so a batch of one
reproduces the per-image formula exactly.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from numpy.random import Generator, SeedSequence, default_rng

from .boxes import BBox
from .io import write_json
from .model import (
    ALL_TASKS,
    CLASSIFICATION_TASKS,
    TASK_SEGMENTATION,
    ModelConfig,
    MultitaskNetwork,
    init_parameters,
    save_checkpoint,
    task_class_count,
)
from .phantom import (
    BINARY_LABEL_VALUES,
    TUMOR_TYPES,
    TumorRecord,
    entry_records,
    load_mask,
    load_volume,
    manifest_images,
)

MISSING = -1


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite; message carries epoch, batch and terms."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batches_per_epoch: int = 50
    batch_size: int = 2
    patch_size: tuple[int, int, int] = (32, 32, 32)
    lr_initial: float = 0.1
    lr_drop_epochs: tuple[int, ...] = (7, 9)
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    nesterov: bool = True
    lambda_seg: float = 1.0
    lambda_cls: float = 1e-3
    enabled_tasks: tuple[str, ...] = ALL_TASKS
    seed: int = 0
    num_threads: int | None = None

    def validate(self) -> None:
        if self.epochs <= 0 or self.batches_per_epoch <= 0:
            raise ValueError("epochs and batches_per_epoch must be positive")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if len(self.patch_size) != 3 or any(s <= 0 for s in self.patch_size):
            raise ValueError(f"patch_size must be 3 positive ints, got {self.patch_size}")
        if any(s % 4 != 0 for s in self.patch_size):
            raise ValueError(f"patch_size sides must be divisible by 4, got {self.patch_size}")
        if list(self.lr_drop_epochs) != sorted(set(self.lr_drop_epochs)):
            raise ValueError(f"lr_drop_epochs must be strictly increasing, got {self.lr_drop_epochs}")
        if any(e >= self.epochs or e < 0 for e in self.lr_drop_epochs):
            raise ValueError(f"lr_drop_epochs must lie in [0, epochs), got {self.lr_drop_epochs}")
        if self.lambda_seg < 0 or self.lambda_cls < 0:
            raise ValueError("lambda values must be >= 0")
        if self.lr_initial <= 0 or self.lr_drop_factor <= 0:
            raise ValueError("lr_initial and lr_drop_factor must be positive")
        if not self.enabled_tasks:
            raise ValueError("enabled_tasks must be nonempty")
        unknown = set(self.enabled_tasks) - set(ALL_TASKS)
        if unknown:
            raise ValueError(f"unknown tasks in enabled_tasks: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("patch_size", "lr_drop_epochs", "enabled_tasks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def paper_train_config(**overrides) -> TrainConfig:
    """The full-scale schedule: 120 epochs x 200 batches, drops at 90 and 105."""
    cfg = TrainConfig(
        epochs=120,
        batches_per_epoch=200,
        batch_size=2,
        patch_size=(120, 120, 120),
        lr_drop_epochs=(90, 105),
    )
    return replace(cfg, **overrides)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant learning rate, divided by the drop factor at each drop epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} out of range [0, {config.epochs})")
    drops = sum(1 for e in config.lr_drop_epochs if epoch >= e)
    return config.lr_initial / config.lr_drop_factor**drops


@dataclass
class PatchSample:
    patch: np.ndarray
    mask: np.ndarray
    records: list[TumorRecord]
    origin: tuple[int, int, int]


def sample_patch(
    volume_data: np.ndarray,
    instance_mask: np.ndarray,
    records: list[TumorRecord],
    patch_size: tuple[int, int, int],
    rng: Generator,
) -> PatchSample:
    """Crop a random patch that entirely contains one uniformly drawn anchor tumor.

    The patch stays inside the volume (position is clipped by sampling range,
    never padded). Tumors fully inside the patch are returned with bboxes
    rebased to patch coordinates; partially visible tumors keep their voxels
    in the mask crop but are not returned as records.
    """
    if not records:
        raise ValueError("image has no tumors to anchor a patch on")
    shape = volume_data.shape
    if any(p > v for p, v in zip(patch_size, shape)):
        raise ValueError(f"patch size {patch_size} exceeds volume shape {shape}")
    anchor = records[int(rng.integers(len(records)))]
    if any(s > p for s, p in zip(anchor.bbox.sides, patch_size)):
        raise ValueError(
            f"tumor exceeds patch size: bbox sides {anchor.bbox.sides} vs patch {tuple(patch_size)}"
        )
    origin = []
    for a in range(3):
        lo = max(0, anchor.bbox.stop[a] - patch_size[a])
        hi = min(anchor.bbox.start[a], shape[a] - patch_size[a])
        origin.append(int(rng.integers(lo, hi + 1)))
    origin = tuple(origin)
    patch_box = BBox(origin, tuple(o + p for o, p in zip(origin, patch_size)))

    crop = patch_box.slices()
    contained = []
    for r in records:
        if patch_box.contains_box(r.bbox):
            contained.append(replace(r, bbox=r.bbox.shift(tuple(-o for o in origin))))
    return PatchSample(
        patch=np.ascontiguousarray(volume_data[crop], dtype=np.float32),
        mask=instance_mask[crop] > 0,
        records=contained,
        origin=origin,
    )


def build_targets(records: list[TumorRecord], config: ModelConfig) -> dict[str, torch.Tensor]:
    """Per-task class indices aligned with the records; MISSING marks absent labels."""
    out = {}
    for task in CLASSIFICATION_TASKS:
        values = []
        for r in records:
            if task == "type":
                values.append(TUMOR_TYPES.index(r.type_label) if r.type_label is not None else MISSING)
            elif task == "region":
                values.append(int(r.region_label) if r.region_label is not None else MISSING)
            else:
                v = getattr(r, task)
                values.append(BINARY_LABEL_VALUES[task].index(v) if v is not None else MISSING)
        out[task] = torch.as_tensor(values, dtype=torch.long)
    return out


@dataclass
class LossBreakdown:
    total: torch.Tensor
    segmentation: torch.Tensor
    per_task: dict[str, torch.Tensor]
    omitted: dict[str, int]
    n_present: dict[str, int]

    def as_floats(self) -> dict:
        d = {"loss_total": float(self.total.detach()), "loss_segmentation": float(self.segmentation.detach())}
        for task, term in self.per_task.items():
            d[f"loss_{task}"] = float(term.detach())
        d["omitted"] = dict(self.omitted)
        d["n_present"] = dict(self.n_present)
        return d


def multitask_loss(
    seg_logits: torch.Tensor,
    seg_targets: torch.Tensor,
    task_logits: list[dict[str, torch.Tensor]],
    task_targets: list[dict[str, torch.Tensor]],
    config: TrainConfig,
    model_config: ModelConfig,
) -> LossBreakdown:
    """Weighted sum of per-task cross-entropies over a batch of patches.

    Batch reduction is the mean of per-patch losses; within a patch the
    segmentation term is a per-voxel mean and each classification term is a
    sum over that patch's tumors. Labels equal to MISSING are omitted.
    """
    if seg_logits.shape != seg_targets.shape:
        raise ValueError(f"segmentation shape mismatch: {tuple(seg_logits.shape)} vs {tuple(seg_targets.shape)}")
    batch = seg_logits.shape[0]
    if len(task_logits) != batch or len(task_targets) != batch:
        raise ValueError("per-item logits/targets must match the batch size")

    enabled = set(config.enabled_tasks)
    zero = seg_logits.new_zeros(())

    if TASK_SEGMENTATION in enabled:
        seg_term = F.binary_cross_entropy_with_logits(seg_logits, seg_targets.to(seg_logits.dtype))
    else:
        seg_term = zero

    per_task: dict[str, torch.Tensor] = {}
    omitted: dict[str, int] = {}
    n_present: dict[str, int] = {}
    for task in CLASSIFICATION_TASKS:
        if task not in enabled:
            continue
        term = zero
        n_skip = n_pres = 0
        for logits_i, targets_i in zip(task_logits, task_targets):
            logits, targets = logits_i[task], targets_i[task]
            if logits.shape[0] != targets.shape[0]:
                raise ValueError(f"{task}: {logits.shape[0]} logit rows vs {targets.shape[0]} targets")
            k = task_class_count(task, model_config)
            if logits.shape[-1] != k:
                raise ValueError(f"{task}: expected {k} classes, got {logits.shape[-1]}")
            if targets.numel() and (targets.max() >= k or targets.min() < MISSING):
                raise ValueError(f"{task}: target values out of range [{MISSING}, {k})")
            present = targets != MISSING
            n_skip += int((~present).sum())
            n_pres += int(present.sum())
            if present.any():
                term = term + F.cross_entropy(logits[present], targets[present], reduction="sum")
        per_task[task] = term / batch
        omitted[task] = n_skip
        n_present[task] = n_pres

    total = config.lambda_seg * seg_term
    for term in per_task.values():
        total = total + config.lambda_cls * term
    return LossBreakdown(total=total, segmentation=seg_term, per_task=per_task, omitted=omitted, n_present=n_present)


@dataclass
class TrainReport:
    out_dir: Path
    final_checkpoint: Path
    best_checkpoint: Path
    epoch_records: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0


class _LoadedImage:
    __slots__ = ("volume", "mask", "records")

    def __init__(self, volume, mask, records):
        self.volume = volume
        self.mask = mask
        self.records = records


def _load_split(manifest: dict, data_dir: Path, split: str) -> list[_LoadedImage]:
    entries = manifest_images(manifest, split)
    if not entries:
        raise ValueError(f"no images in split {split!r}")
    images = []
    for entry in entries:
        volume = load_volume(entry, data_dir)
        mask = load_mask(entry, data_dir)
        images.append(_LoadedImage(volume.data, mask, entry_records(entry)))
    return images


def train(
    manifest: dict,
    data_dir: Path | str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Path | str,
    split: str = "train",
) -> TrainReport:
    """Run the full optimization schedule and write checkpoints plus a JSONL log."""
    model_config.validate()
    train_config.validate()
    if train_config.num_threads is not None:
        torch.set_num_threads(train_config.num_threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    images = _load_split(manifest, Path(data_dir), split)
    seeds = SeedSequence(entropy=train_config.seed, spawn_key=(2,)).generate_state(2)
    rng = default_rng(int(seeds[1]))

    net = MultitaskNetwork(model_config)
    init_parameters(net, int(seeds[0]))
    net.train()
    opt = torch.optim.SGD(
        net.parameters(),
        lr=lr_at(0, train_config),
        momentum=train_config.momentum,
        nesterov=train_config.nesterov and train_config.momentum > 0,
    )

    t0 = time.time()
    epoch_records = []
    best_loss, best_state = float("inf"), None
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(train_config.epochs):
            lr = lr_at(epoch, train_config)
            for group in opt.param_groups:
                group["lr"] = lr
            sums: Counter = Counter()
            omitted: Counter = Counter()
            for batch_idx in range(train_config.batches_per_epoch):
                samples = []
                for _ in range(train_config.batch_size):
                    img = images[int(rng.integers(len(images)))]
                    samples.append(sample_patch(img.volume, img.mask, img.records, train_config.patch_size, rng))
                batch = torch.from_numpy(np.stack([s.patch for s in samples]))[:, None]
                seg_targets = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))[:, None]
                boxes = [[r.bbox for r in s.records] for s in samples]
                out_batch = net(batch, boxes)
                targets = [build_targets(s.records, model_config) for s in samples]
                loss = multitask_loss(out_batch.seg_logits, seg_targets, out_batch.task_logits, targets, train_config, model_config)
                if not torch.isfinite(loss.total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {batch_idx}: {loss.as_floats()}"
                    )
                opt.zero_grad(set_to_none=True)
                if loss.total.requires_grad:
                    loss.total.backward()
                    opt.step()
                floats = loss.as_floats()
                for key, value in floats.items():
                    if key.startswith("loss_"):
                        sums[key] += value
                omitted.update(floats["omitted"])

            record = {key: value / train_config.batches_per_epoch for key, value in sorted(sums.items())}
            record.update({"epoch": epoch, "lr": lr, "omitted": dict(sorted(omitted.items()))})
            epoch_records.append(record)
            log.write(_json_line(record))
            log.flush()
            if record["loss_total"] < best_loss:
                best_loss = record["loss_total"]
                best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}

    final_path = out / "final.ckpt"
    save_checkpoint(final_path, net)
    best_path = out / "best.ckpt"
    if best_state is not None:
        snapshot = MultitaskNetwork(model_config)
        snapshot.load_state_dict(best_state)
        save_checkpoint(best_path, snapshot)
    write_json(out / "model_config.json", model_config.to_dict())
    write_json(out / "train_config.json", train_config.to_dict())
    return TrainReport(
        out_dir=out,
        final_checkpoint=final_path,
        best_checkpoint=best_path,
        epoch_records=epoch_records,
        wall_time_s=time.time() - t0,
    )


def _json_line(record: dict) -> str:
    import json

    return json.dumps(record, sort_keys=True) + "\n"


def ablation_name(tasks: tuple[str, ...]) -> str:
    return "-".join(tasks)


def ablation_suite(
    manifest: dict,
    data_dir: Path | str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    task_subsets: list[tuple[str, ...]],
    out_root: Path | str,
    split: str = "train",
) -> list[dict]:
    """Train one network per task subset with a shared seed; returns run descriptors."""
    if not task_subsets:
        raise ValueError("task_subsets must be nonempty")
    seen = set()
    for subset in task_subsets:
        if not subset:
            raise ValueError("ablation subsets must be nonempty")
        key = frozenset(subset)
        if key in seen:
            raise ValueError(f"duplicate ablation entry: {tuple(subset)}")
        seen.add(key)

    runs = []
    for subset in task_subsets:
        subset = tuple(subset)
        cfg = replace(train_config, enabled_tasks=subset)
        out_dir = Path(out_root) / f"ablation_{ablation_name(subset)}"
        report = train(manifest, data_dir, model_config, cfg, out_dir, split=split)
        runs.append(
            {
                "tasks": list(subset),
                "name": ablation_name(subset),
                "out_dir": str(out_dir),
                "final_checkpoint": str(report.final_checkpoint),
                "final_loss": report.epoch_records[-1]["loss_total"],
            }
        )
    return runs
