"""3D multitask network: shared ResNet-like backbone, RoiPool, and task heads.

The backbone keeps the input spatial shape: two stem convolutions, one
max-pool downsampling by a fixed factor, a stack of pre-activation residual
blocks at constant width, and trilinear upsampling back to input resolution.
Tumor embeddings are per-channel global max pooling over the feature-map
voxels inside the tumor's bounding box, so every tumor gets a vector of
length `channels` regardless of its volume.
"""

from __future__ import annotations

import io as _io
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import AXIS_NAMES, BBox
from .io import dumps_canonical, sha256_file

TASK_SEGMENTATION = "segmentation"
BINARY_TASKS = ("left_right", "front_rear", "upper_lower")
CLASSIFICATION_TASKS = ("type", "region") + BINARY_TASKS
ALL_TASKS = (TASK_SEGMENTATION,) + CLASSIFICATION_TASKS

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class ModelConfig:
    channels: int = 64
    n_resblocks: int = 4
    down_up_factor: int = 4
    n_types: int = 3
    n_regions: int = 11
    binary_tasks: tuple[str, ...] = BINARY_TASKS
    enabled_tasks: tuple[str, ...] = ALL_TASKS
    seed: int = 0

    def validate(self) -> None:
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.n_resblocks < 1:
            raise ValueError(f"n_resblocks must be >= 1, got {self.n_resblocks}")
        if self.down_up_factor < 1:
            raise ValueError(f"down_up_factor must be >= 1, got {self.down_up_factor}")
        if self.n_types < 2 or self.n_regions < 2:
            raise ValueError("n_types and n_regions must be >= 2")
        unknown = set(self.enabled_tasks) - set(ALL_TASKS)
        if unknown:
            raise ValueError(f"unknown tasks in enabled_tasks: {sorted(unknown)}")
        if not self.enabled_tasks:
            raise ValueError("enabled_tasks must be nonempty")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("binary_tasks", "enabled_tasks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def task_class_count(task: str, config: ModelConfig) -> int:
    if task == "type":
        return config.n_types
    if task == "region":
        return config.n_regions
    if task in config.binary_tasks:
        return 2
    raise ValueError(f"unknown task {task!r}")


class ResBlock3d(nn.Module):
    """Pre-activation residual block of two (BN, ReLU, 3x3x3 conv) stages."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.bn1 = nn.BatchNorm3d(in_channels)
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1, bias=False)
        if in_channels != out_channels:
            self.shortcut = nn.Conv3d(in_channels, out_channels, 1, bias=False)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = self.conv1(F.relu(self.bn1(x)))
        h = self.conv2(F.relu(self.bn2(h)))
        return self.shortcut(x) + h


class Backbone3d(nn.Module):
    """Feature extractor producing a `channels`-wide map at input resolution."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.channels
        half = max(c // 2, 1)
        self.stem_conv1 = nn.Conv3d(1, half, 3, padding=1, bias=False)
        self.stem_bn = nn.BatchNorm3d(half)
        self.stem_conv2 = nn.Conv3d(half, c, 3, padding=1, bias=False)
        self.blocks = nn.ModuleList(ResBlock3d(c, c) for _ in range(config.n_resblocks))
        self.final_bn = nn.BatchNorm3d(c)

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (B, 1, X, Y, Z), got {tuple(x.shape)}")
        factor = self.config.down_up_factor
        spatial = x.shape[2:]
        for axis, side in zip(AXIS_NAMES, spatial):
            if side % factor != 0:
                raise ValueError(f"spatial side not divisible by {factor} on axis {axis}: {side}")
        h = self.stem_conv2(F.relu(self.stem_bn(self.stem_conv1(x))))
        h = F.max_pool3d(h, factor)
        for block in self.blocks:
            h = block(h)
        h = F.relu(self.final_bn(h))
        return F.interpolate(h, size=spatial, mode="trilinear", align_corners=False)


class SegmentationHead(nn.Module):
    """One residual block plus a 1x1x1 convolution to a single binary logit channel."""

    def __init__(self, channels: int):
        super().__init__()
        self.block = ResBlock3d(channels, channels)
        self.out = nn.Conv3d(channels, 1, 1)

    def forward(self, featmap):
        return self.out(self.block(featmap))


def roipool(featmap: torch.Tensor, bbox: BBox) -> torch.Tensor:
    """Per-channel max over the feature-map voxels inside the box.

    `featmap` has shape (C, X, Y, Z); returns a vector of length C.
    """
    if featmap.ndim != 4:
        raise ValueError(f"featmap must be (C, X, Y, Z), got shape {tuple(featmap.shape)}")
    if not bbox.inside(tuple(featmap.shape[1:])):
        raise ValueError(f"bbox {bbox.start}..{bbox.stop} outside feature map of shape {tuple(featmap.shape[1:])}")
    region = featmap[(slice(None),) + bbox.slices()]
    return region.amax(dim=(1, 2, 3))


@dataclass
class ModelOutput:
    feature_map: torch.Tensor
    seg_logits: torch.Tensor
    embeddings: list[torch.Tensor]
    task_logits: list[dict[str, torch.Tensor]]


class MultitaskNetwork(nn.Module):
    """Backbone shared by the segmentation head and per-task linear heads.

    All heads always exist; which loss terms are active is the training
    configuration's business. `backbone_calls` counts backbone evaluations so
    tests can assert the one-pass-per-forward contract.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = Backbone3d(config)
        self.seg_head = SegmentationHead(config.channels)
        # ModuleDict reserves bare nn.Module attribute names such as "type".
        self.heads = nn.ModuleDict(
            {f"{task}_head": nn.Linear(config.channels, task_class_count(task, config)) for task in CLASSIFICATION_TASKS}
        )
        self.backbone_calls = 0

    def head_logits(self, task: str, embeddings: torch.Tensor) -> torch.Tensor:
        key = f"{task}_head"
        if key not in self.heads:
            raise ValueError(f"unknown task {task!r}")
        return self.heads[key](embeddings)

    def forward(self, batch: torch.Tensor, boxes_per_item: list[list[BBox]] | None = None) -> ModelOutput:
        if boxes_per_item is None:
            boxes_per_item = [[] for _ in range(batch.shape[0])]
        if len(boxes_per_item) != batch.shape[0]:
            raise ValueError("boxes_per_item length must match batch size")
        self.backbone_calls += 1
        fm = self.backbone(batch)
        seg = self.seg_head(fm)
        embeddings, task_logits = [], []
        for i, boxes in enumerate(boxes_per_item):
            if boxes:
                emb = torch.stack([roipool(fm[i], b) for b in boxes])
            else:
                emb = fm.new_zeros((0, self.config.channels))
            embeddings.append(emb)
            task_logits.append({task: self.heads[f"{task}_head"](emb) for task in CLASSIFICATION_TASKS})
        return ModelOutput(feature_map=fm, seg_logits=seg, embeddings=embeddings, task_logits=task_logits)


def model_forward(net: MultitaskNetwork, patch: np.ndarray | torch.Tensor, bboxes: list[BBox]) -> ModelOutput:
    """Single-patch forward pass; accepts a bare (X, Y, Z) array."""
    if isinstance(patch, np.ndarray):
        patch = torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32))
    if patch.ndim != 3:
        raise ValueError(f"patch must be (X, Y, Z), got shape {tuple(patch.shape)}")
    spatial = tuple(patch.shape)
    for b in bboxes:
        if not b.inside(spatial):
            raise ValueError(f"bbox {b.start}..{b.stop} outside patch of shape {spatial}")
    batch = patch[None, None].to(next(net.parameters()).dtype)
    return net(batch, [list(bboxes)])


def init_parameters(net: nn.Module, seed: int) -> None:
    """Deterministic fan-in normal init for convs/linears, zero biases, unit BN."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv3d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm3d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()


def build_network(config: ModelConfig) -> MultitaskNetwork:
    net = MultitaskNetwork(config)
    init_parameters(net, config.seed)
    return net


def _conv_params(cin, cout, k, bias=False):
    return cin * cout * k**3 + (cout if bias else 0)


def _resblock_params(cin, cout):
    n = 2 * cin + _conv_params(cin, cout, 3) + 2 * cout + _conv_params(cout, cout, 3)
    if cin != cout:
        n += _conv_params(cin, cout, 1)
    return n


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count; a pure function of the config."""
    c = config.channels
    half = max(c // 2, 1)
    n = _conv_params(1, half, 3) + 2 * half + _conv_params(half, c, 3)
    n += config.n_resblocks * _resblock_params(c, c)
    n += 2 * c
    n += _resblock_params(c, c) + _conv_params(c, 1, 1, bias=True)
    for task in CLASSIFICATION_TASKS:
        k = task_class_count(task, config)
        n += c * k + k
    return n


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def _checkpoint_entries(net: MultitaskNetwork):
    # num_batches_tracked is an int64 step counter that inference never uses.
    return [(name, t) for name, t in net.state_dict().items() if not name.endswith("num_batches_tracked")]


def save_checkpoint(path: Path | str, net: MultitaskNetwork) -> None:
    """Write a deterministic checkpoint archive: JSON manifest + raw float32 blob."""
    entries = _checkpoint_entries(net)
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_config": net.config.to_dict(),
        "dtype": "<f4",
        "params": [{"name": name, "shape": list(t.shape)} for name, t in entries],
    }
    blob = _io.BytesIO()
    for _, t in entries:
        blob.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in (
            ("manifest.json", dumps_canonical(manifest).encode("utf-8")),
            ("params.bin", blob.getvalue()),
        ):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)


def load_checkpoint(path: Path | str) -> MultitaskNetwork:
    """Rebuild the network from a checkpoint, verifying every parameter shape."""
    import json

    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        raw = zf.read("params.bin")
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint schema {manifest.get('schema_version')}")
    config = ModelConfig.from_dict(manifest["model_config"])
    net = MultitaskNetwork(config)
    state = dict(_checkpoint_entries(net))
    recorded = {p["name"]: tuple(p["shape"]) for p in manifest["params"]}
    if set(recorded) != set(state):
        missing = sorted(set(state) - set(recorded))
        extra = sorted(set(recorded) - set(state))
        raise ValueError(f"{path}: parameter names mismatch (missing {missing}, extra {extra})")

    offset = 0
    with torch.no_grad():
        for p in manifest["params"]:
            name, shape = p["name"], tuple(p["shape"])
            tensor = state[name]
            if tuple(tensor.shape) != shape:
                raise ValueError(f"{path}: shape mismatch for {name}: file {shape}, model {tuple(tensor.shape)}")
            count = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
            tensor.copy_(torch.from_numpy(values.copy()))
            offset += count * 4
    if offset != len(raw):
        raise ValueError(f"{path}: parameter blob size mismatch ({len(raw)} bytes, consumed {offset})")
    net.eval()
    return net


def checkpoint_fingerprint(path: Path | str) -> str:
    return sha256_file(path)
