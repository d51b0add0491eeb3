"""Synthetic volumetric phantom generator.

Produces an ellipsoidal "brain" with textured intensity and one to three
geometric tumors per image. Every label (type, anatomical region, the three
binary localization flags, linear size) is derived from the generated
geometry, so downstream retrieval metrics have a ground-truth signal:

* the two hemispheres are separated by a thin midline fissure and carry
  different base intensities, which makes left/right decodable from local
  appearance;
* each tumor type has its own shape family and intensity contrast
  (metastasis: bright near-spherical spheroid anywhere; meningioma: dimmer
  lobulated blob hugging the surface; schwannoma: elongated blob at one of
  two mirrored lateral-posterior anchor sites).

Generation is fully deterministic per (config, seed): image i is produced by
an RNG spawned from (seed, i), so reruns are byte-identical and images can be
generated independently.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.random import Generator, SeedSequence, default_rng
from scipy import ndimage

from .boxes import BBox
from .io import read_raw_f32, read_raw_u8, write_json, write_raw_f32, write_raw_u8

TUMOR_TYPES = ("metastasis", "meningioma", "schwannoma")
LEFT_RIGHT = ("left", "right")
FRONT_REAR = ("front", "rear")
UPPER_LOWER = ("lower", "upper")
BINARY_LABEL_VALUES = {"left_right": LEFT_RIGHT, "front_rear": FRONT_REAR, "upper_lower": UPPER_LOWER}
MISSABLE_LABELS = ("region_label", "left_right", "front_rear", "upper_lower")

SCHEMA_VERSION = 1

# Brain texture model (in arbitrary intensity units).
BASE_INTENSITY = 0.30
HEMISPHERE_STEP = 0.14
HEMISPHERE_STRIPE_AMPLITUDE = 0.06
HEMISPHERE_STRIPE_PERIOD_VOX = 3.0
RAMP_Y = 0.12
RAMP_Z = 0.10
LOWFREQ_AMPLITUDE = 0.02
LOWFREQ_SIGMA_VOX = 8.0
FISSURE_HALF_WIDTH_VOX = 1.0

# Additive intensity contrast of each tumor type over the local background.
TYPE_CONTRAST = {"metastasis": 0.90, "meningioma": 0.55, "schwannoma": 0.22}

# Schwannoma anchor sites in brain-normalized coordinates (mirrored in x).
SCHWANNOMA_ANCHOR = (0.55, 0.45, 0.0)
SCHWANNOMA_JITTER = 0.04
SCHWANNOMA_JITTER_MAX = 0.10

# Spatial partition used for the anatomical-region label when n_regions == 11.
REGION_CORE_RADIUS = 0.35

_MAX_PLACEMENT_ATTEMPTS = 100
_MAX_SIZE_REDRAWS = 50


class PlacementError(RuntimeError):
    """Tumor did not fit after rejection sampling; caller should redraw its size."""


@dataclass
class PhantomConfig:
    volume_shape: tuple[int, int, int] = (64, 64, 64)
    voxel_spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_images: int = 120
    tumors_per_image: tuple[int, int] = (1, 3)
    type_priors: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    size_range_mm: tuple[float, float] = (4.0, 20.0)
    n_regions: int = 11
    noise_sigma: float = 0.02
    missing_label_rate: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if len(self.volume_shape) != 3 or any(int(s) <= 0 for s in self.volume_shape):
            raise ValueError(f"volume_shape must be 3 positive ints, got {self.volume_shape}")
        if len(self.voxel_spacing_mm) != 3 or any(s <= 0 for s in self.voxel_spacing_mm):
            raise ValueError(f"voxel_spacing_mm must be 3 positive reals, got {self.voxel_spacing_mm}")
        if self.n_images <= 0:
            raise ValueError(f"n_images must be positive, got {self.n_images}")
        lo, hi = self.tumors_per_image
        if lo <= 0 or hi < lo:
            raise ValueError(f"tumors_per_image must be a positive range, got {self.tumors_per_image}")
        if len(self.type_priors) != len(TUMOR_TYPES) or any(p < 0 for p in self.type_priors):
            raise ValueError(f"type_priors must be {len(TUMOR_TYPES)} non-negative probabilities")
        if abs(sum(self.type_priors) - 1.0) > 1e-9:
            raise ValueError(f"type_priors must sum to 1, got sum={sum(self.type_priors)!r}")
        smin, smax = self.size_range_mm
        if smin > smax:
            raise ValueError(f"size_range_mm must be ordered, got {self.size_range_mm}")
        if smin < 2 * max(self.voxel_spacing_mm):
            raise ValueError(
                f"size_range_mm min must cover at least 2 voxels "
                f"({2 * max(self.voxel_spacing_mm)} mm), got {smin}"
            )
        if self.n_regions < 2:
            raise ValueError(f"n_regions must be >= 2, got {self.n_regions}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if 3 * self.noise_sigma >= min(TYPE_CONTRAST.values()):
            raise ValueError(
                f"noise_sigma too large: tumor contrast must exceed 3*noise_sigma "
                f"(max allowed {min(TYPE_CONTRAST.values()) / 3:.4f}), got {self.noise_sigma}"
            )
        if not 0 <= self.missing_label_rate <= 1:
            raise ValueError(f"missing_label_rate must be in [0, 1], got {self.missing_label_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in ("volume_shape", "voxel_spacing_mm", "tumors_per_image", "type_priors", "size_range_mm"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Volume:
    """A 3D scalar image; axes are (x, y, z) with z the fastest-varying on disk."""

    shape: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if tuple(self.data.shape) != self.shape:
            raise ValueError(f"data shape {self.data.shape} does not match declared shape {self.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")


@dataclass(frozen=True)
class BrainGeometry:
    center: tuple[float, float, float]
    semiaxes: tuple[float, float, float]
    fissure_half_width: float = FISSURE_HALF_WIDTH_VOX


@dataclass
class TumorRecord:
    tumor_id: str
    image_id: str
    mask_value: int
    bbox: BBox
    type_label: str
    region_label: int | None
    left_right: str | None
    front_rear: str | None
    upper_lower: str | None
    linear_size_mm: float

    def to_dict(self) -> dict:
        return {
            "tumor_id": self.tumor_id,
            "image_id": self.image_id,
            "mask_value": self.mask_value,
            "bbox": self.bbox.to_dict(),
            "type_label": self.type_label,
            "region_label": self.region_label,
            "left_right": self.left_right,
            "front_rear": self.front_rear,
            "upper_lower": self.upper_lower,
            "linear_size_mm": self.linear_size_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TumorRecord":
        d = dict(d)
        d["bbox"] = BBox.from_dict(d["bbox"])
        return cls(**d)


@dataclass
class TumorBlob:
    """One placed tumor: full-size boolean mask plus its analytic components."""

    mask: np.ndarray
    contrast: float
    components: tuple[tuple[tuple[float, float, float], tuple[float, float, float]], ...]


@dataclass
class DerivedLabels:
    bbox: BBox
    linear_size_mm: float
    left_right: str
    front_rear: str
    upper_lower: str
    region_label: int


def _coordinate_grids(shape):
    xs = np.arange(shape[0], dtype=np.float64)[:, None, None]
    ys = np.arange(shape[1], dtype=np.float64)[None, :, None]
    zs = np.arange(shape[2], dtype=np.float64)[None, None, :]
    return xs, ys, zs


def brain_support(shape: tuple[int, int, int], geometry: BrainGeometry) -> np.ndarray:
    """Boolean mask of brain voxels: inside the ellipsoid and off the midline fissure."""
    xs, ys, zs = _coordinate_grids(shape)
    cx, cy, cz = geometry.center
    ax, ay, az = geometry.semiaxes
    inside = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 + ((zs - cz) / az) ** 2 <= 1.0
    off_fissure = np.abs(xs - cx) >= geometry.fissure_half_width
    return inside & off_fissure


def synth_brain(rng: Generator, config: PhantomConfig) -> tuple[Volume, BrainGeometry]:
    """Generate the textured brain ellipsoid on a zero background."""
    shape = tuple(config.volume_shape)
    fractions = rng.uniform(0.5, 0.8, size=3)
    center = tuple((s - 1) / 2 for s in shape)
    semiaxes = tuple(float(f * s / 2) for f, s in zip(fractions, shape))
    geometry = BrainGeometry(center=center, semiaxes=semiaxes)
    support = brain_support(shape, geometry)

    xs, ys, zs = _coordinate_grids(shape)
    # Level step plus a fine stripe texture on the left hemisphere only, so
    # the side is readable from local appearance as well as absolute level.
    stripes = HEMISPHERE_STRIPE_AMPLITUDE * np.cos(2 * np.pi * zs / HEMISPHERE_STRIPE_PERIOD_VOX)
    hemisphere = np.where(xs > center[0], HEMISPHERE_STEP, -HEMISPHERE_STEP + stripes)
    ramps = RAMP_Y * (ys - center[1]) / shape[1] + RAMP_Z * (zs - center[2]) / shape[2]

    lowfreq = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=LOWFREQ_SIGMA_VOX)
    lowfreq *= LOWFREQ_AMPLITUDE / max(lowfreq.std(), 1e-12)

    intensity = BASE_INTENSITY + hemisphere + ramps + lowfreq
    if config.noise_sigma > 0:
        intensity = intensity + config.noise_sigma * rng.standard_normal(shape)

    data = np.where(support, intensity, 0.0).astype(np.float32)
    return Volume(shape=shape, spacing_mm=tuple(config.voxel_spacing_mm), data=data), geometry


def _ellipsoid_mask(shape, center, semiaxes) -> np.ndarray:
    """Voxels whose centers fall inside the given ellipsoid."""
    xs, ys, zs = _coordinate_grids(shape)
    return (
        ((xs - center[0]) / semiaxes[0]) ** 2
        + ((ys - center[1]) / semiaxes[1]) ** 2
        + ((zs - center[2]) / semiaxes[2]) ** 2
    ) <= 1.0


def _union_mask(shape, components) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for center, semiaxes in components:
        mask |= _ellipsoid_mask(shape, center, semiaxes)
    return mask


def _is_6_connected(mask: np.ndarray) -> bool:
    structure = ndimage.generate_binary_structure(3, 1)
    _, n = ndimage.label(mask, structure=structure)
    return n == 1


def _mask_ok(mask, support, occupied) -> bool:
    if not mask.any():
        return False
    if (mask & ~support).any():
        return False
    if occupied is not None and (mask & occupied).any():
        return False
    return _is_6_connected(mask)


def _semiaxes_vox(radius_mm: float, spacing, scale=(1.0, 1.0, 1.0)):
    return tuple(radius_mm * s / sp for s, sp in zip(scale, spacing))


def _metastasis_components(rng, radius_mm, spacing, geometry):
    # Spheroid: two equal semiaxes, one shortened, random axis of revolution.
    ecc = rng.uniform(0.85, 1.0)
    axis = int(rng.integers(3))
    scale = [1.0, 1.0, 1.0]
    scale[axis] = ecc
    direction = rng.standard_normal(3)
    direction /= max(np.linalg.norm(direction), 1e-12)
    radius_u = 0.92 * rng.uniform(0, 1) ** (1 / 3)
    center = tuple(c + d * radius_u * a for c, d, a in zip(geometry.center, direction, geometry.semiaxes))
    return (( center, _semiaxes_vox(radius_mm, spacing, scale)),)


def _meningioma_components(rng, radius_mm, spacing, geometry, support, occupied):
    # Lobulated: main sphere plus satellites touching the enclosing ball from
    # inside, pushed as close to the brain surface as it still fits.
    n_sat = int(rng.integers(2, 5))
    main = 0.70 * radius_mm
    sats = []
    for _ in range(n_sat):
        rs = rng.uniform(0.30, 0.45) * radius_mm
        d = rng.standard_normal(3)
        d /= max(np.linalg.norm(d), 1e-12)
        sats.append((rs, d))
    direction = rng.standard_normal(3)
    direction /= max(np.linalg.norm(direction), 1e-12)

    shape = support.shape
    for t in np.linspace(0.85, 0.0, 18):
        center = tuple(c + d * t * a for c, d, a in zip(geometry.center, direction, geometry.semiaxes))
        components = [(center, _semiaxes_vox(main, spacing))]
        for rs, d in sats:
            offset_mm = radius_mm - rs
            sat_center = tuple(c + dd * offset_mm / sp for c, dd, sp in zip(center, d, spacing))
            components.append((sat_center, _semiaxes_vox(rs, spacing)))
        mask = _union_mask(shape, components)
        if _mask_ok(mask, support, occupied):
            return tuple(components), mask
    return None, None


def _schwannoma_components(rng, radius_mm, spacing, geometry, attempt=0):
    # Elongated along y, anchored at one of two mirrored lateral-posterior sites.
    # Under placement pressure (later attempts) the jitter widens along y/z so
    # several schwannomas can share an anchor; the lateral x offset stays tight
    # to preserve the two-sided structure.
    side = int(rng.integers(2))
    anchor = np.array(SCHWANNOMA_ANCHOR)
    anchor[0] *= -1 if side == 0 else 1
    relax = 1.0 + attempt / 8
    sigma = np.array([SCHWANNOMA_JITTER, SCHWANNOMA_JITTER * relax, SCHWANNOMA_JITTER * relax])
    cap = np.array([SCHWANNOMA_JITTER_MAX, min(0.30, SCHWANNOMA_JITTER_MAX * relax), min(0.30, SCHWANNOMA_JITTER_MAX * relax)])
    jitter = np.clip(rng.normal(0, 1, size=3) * sigma, -cap, cap)
    u = anchor + jitter
    center = tuple(c + uu * a for c, uu, a in zip(geometry.center, u, geometry.semiaxes))
    return ((center, _semiaxes_vox(radius_mm, spacing, scale=(0.55, 1.0, 0.55))),)


def synth_tumor(
    rng: Generator,
    type_label: str,
    config: PhantomConfig,
    brain: Volume,
    geometry: BrainGeometry,
    occupied: np.ndarray | None = None,
    support: np.ndarray | None = None,
    diameter_mm: float | None = None,
) -> TumorBlob:
    """Place one tumor of the given type inside the brain support.

    Raises PlacementError after the rejection budget is exhausted, which
    signals the caller to redraw the tumor size.
    """
    if type_label not in TUMOR_TYPES:
        raise ValueError(f"unknown tumor type {type_label!r}")
    if support is None:
        support = brain_support(brain.shape, geometry)
    spacing = brain.spacing_mm
    if diameter_mm is None:
        diameter_mm = float(rng.uniform(*config.size_range_mm))
    radius_mm = diameter_mm / 2

    for attempt in range(_MAX_PLACEMENT_ATTEMPTS):
        if type_label == "metastasis":
            components = _metastasis_components(rng, radius_mm, spacing, geometry)
            mask = _union_mask(brain.shape, components)
        elif type_label == "meningioma":
            components, mask = _meningioma_components(rng, radius_mm, spacing, geometry, support, occupied)
            if components is None:
                continue
        else:
            components = _schwannoma_components(rng, radius_mm, spacing, geometry, attempt)
            mask = _union_mask(brain.shape, components)
        if _mask_ok(mask, support, occupied):
            return TumorBlob(mask=mask, contrast=TYPE_CONTRAST[type_label], components=tuple(components))
    raise PlacementError(f"could not place {type_label} of {diameter_mm:.1f} mm after {_MAX_PLACEMENT_ATTEMPTS} attempts")


def derive_labels(
    mask: np.ndarray,
    spacing_mm: tuple[float, float, float],
    volume_shape: tuple[int, int, int],
    n_regions: int = 11,
) -> DerivedLabels:
    """Recompute every geometric label from a single tumor's mask.

    Binary labels compare the mask centroid against the volume midplanes;
    exact ties go to the lower-index side (left/front/lower). The region label
    indexes a fixed spatial partition: for the default 11 regions, the eight
    octants plus three central cells stacked along z.
    """
    if not mask.any():
        raise ValueError("no tumor voxels")
    bbox = BBox.from_mask(mask)
    linear_size_mm = max(s * sp for s, sp in zip(bbox.sides, spacing_mm))

    centroid = np.array([idx.mean() for idx in np.nonzero(mask)])
    mid = (np.asarray(volume_shape, dtype=np.float64) - 1) / 2
    left_right = LEFT_RIGHT[1] if centroid[0] > mid[0] else LEFT_RIGHT[0]
    front_rear = FRONT_REAR[1] if centroid[1] > mid[1] else FRONT_REAR[0]
    upper_lower = UPPER_LOWER[1] if centroid[2] > mid[2] else UPPER_LOWER[0]

    u = (centroid - mid) / (np.asarray(volume_shape, dtype=np.float64) / 2)
    if n_regions == 11:
        if float(np.linalg.norm(u)) <= REGION_CORE_RADIUS:
            third = REGION_CORE_RADIUS / 3
            band = 0 if u[2] < -third else (1 if u[2] <= third else 2)
            region = 8 + band
        else:
            region = 4 * int(u[0] > 0) + 2 * int(u[1] > 0) + int(u[2] > 0)
    else:
        region = min(n_regions - 1, int(centroid[2] / volume_shape[2] * n_regions))

    return DerivedLabels(
        bbox=bbox,
        linear_size_mm=float(linear_size_mm),
        left_right=left_right,
        front_rear=front_rear,
        upper_lower=upper_lower,
        region_label=int(region),
    )


def _image_rng(seed: int, index: int) -> Generator:
    return default_rng(SeedSequence(entropy=seed, spawn_key=(1, index)))


def synth_image(config: PhantomConfig, index: int):
    """Generate one image: volume with tumors burnt in, instance mask, records."""
    rng = _image_rng(config.seed, index)
    image_id = f"img{index:04d}"
    volume, geometry = synth_brain(rng, config)
    support = brain_support(volume.shape, geometry)

    lo, hi = config.tumors_per_image
    n_tumors = int(rng.integers(lo, hi + 1))
    type_indices = rng.choice(len(TUMOR_TYPES), size=n_tumors, p=np.asarray(config.type_priors))
    # Schwannomas go first: their anchor sites are tight, so freely placed
    # types must route around them rather than block them.
    type_indices = sorted(type_indices, key=lambda ti: TUMOR_TYPES[int(ti)] != "schwannoma")

    instance_mask = np.zeros(volume.shape, dtype=np.uint8)
    occupied = np.zeros(volume.shape, dtype=bool)
    records = []
    for j, ti in enumerate(type_indices):
        type_label = TUMOR_TYPES[int(ti)]
        blob = None
        size_hi = config.size_range_mm[1]
        for _ in range(_MAX_SIZE_REDRAWS):
            diameter = float(rng.uniform(config.size_range_mm[0], size_hi))
            try:
                blob = synth_tumor(rng, type_label, config, volume, geometry, occupied, support, diameter)
                break
            except PlacementError:
                # Shrink the redraw window so placement eventually succeeds.
                size_hi = max(config.size_range_mm[0], 0.85 * size_hi)
        if blob is None:
            raise RuntimeError(f"image {image_id}: failed to place tumor {j} ({type_label})")

        mask_value = j + 1
        instance_mask[blob.mask] = mask_value
        occupied |= blob.mask
        volume.data[blob.mask] += np.float32(blob.contrast)

        labels = derive_labels(blob.mask, volume.spacing_mm, volume.shape, config.n_regions)
        values = {
            "region_label": labels.region_label,
            "left_right": labels.left_right,
            "front_rear": labels.front_rear,
            "upper_lower": labels.upper_lower,
        }
        for name in MISSABLE_LABELS:
            if rng.random() < config.missing_label_rate:
                values[name] = None
        records.append(
            TumorRecord(
                tumor_id=f"{image_id}_t{j}",
                image_id=image_id,
                mask_value=mask_value,
                bbox=labels.bbox,
                type_label=type_label,
                linear_size_mm=labels.linear_size_mm,
                **values,
            )
        )
    return volume, geometry, instance_mask, records


def generate_dataset(config: PhantomConfig, out_dir: Path | str) -> dict:
    """Write the full phantom dataset (volumes, masks, manifest) and return the manifest."""
    config.validate()
    out = Path(out_dir)
    try:
        (out / "volumes").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e}") from e

    images = []
    for i in range(config.n_images):
        volume, geometry, instance_mask, records = synth_image(config, i)
        image_id = f"img{i:04d}"
        volume_path = f"volumes/{image_id}.f32.raw"
        mask_path = f"masks/{image_id}.u8.raw"
        write_raw_f32(out / volume_path, volume.data)
        write_raw_u8(out / mask_path, instance_mask)
        images.append(
            {
                "image_id": image_id,
                "volume_path": volume_path,
                "mask_path": mask_path,
                "shape": list(volume.shape),
                "spacing_mm": list(volume.spacing_mm),
                "brain": {
                    "center": list(geometry.center),
                    "semiaxes": list(geometry.semiaxes),
                    "fissure_half_width": geometry.fissure_half_width,
                },
                "split": "unassigned",
                "tumors": [r.to_dict() for r in records],
            }
        )

    manifest = {"schema_version": SCHEMA_VERSION, "config": config.to_dict(), "images": images}
    write_json(out / "manifest.json", manifest)
    return manifest


def split_dataset(manifest: dict, test_fraction: float = 0.2, seed: int = 0) -> dict:
    """Assign train/test split tags by image; returns a new manifest."""
    if not 0 <= test_fraction <= 1:
        raise ValueError(f"test_fraction must be in [0, 1], got {test_fraction}")
    images = manifest["images"]
    if len(images) < 5:
        raise ValueError(f"too few images to split: {len(images)} < 5")
    n_test = round(len(images) * test_fraction)
    perm = default_rng(seed).permutation(len(images))
    test_indices = set(int(i) for i in perm[:n_test])

    result = copy.deepcopy(manifest)
    for i, entry in enumerate(result["images"]):
        entry["split"] = "test" if i in test_indices else "train"
    return result


def save_manifest(manifest: dict, path: Path | str) -> None:
    write_json(path, manifest)


def load_manifest(path: Path | str) -> tuple[dict, Path]:
    from .io import read_json

    path = Path(path)
    manifest = read_json(path)
    if "schema_version" not in manifest:
        raise ValueError(f"{path}: manifest missing schema_version")
    return manifest, path.parent


def manifest_images(manifest: dict, split: str = "all") -> list[dict]:
    if split not in ("train", "test", "all"):
        raise ValueError(f"split must be train, test or all, got {split!r}")
    if split == "all":
        return list(manifest["images"])
    return [e for e in manifest["images"] if e.get("split") == split]


def load_volume(entry: dict, base_dir: Path | str) -> Volume:
    data = read_raw_f32(Path(base_dir) / entry["volume_path"], tuple(entry["shape"]))
    return Volume(shape=tuple(entry["shape"]), spacing_mm=tuple(entry["spacing_mm"]), data=data)


def load_mask(entry: dict, base_dir: Path | str) -> np.ndarray:
    return read_raw_u8(Path(base_dir) / entry["mask_path"], tuple(entry["shape"]))


def entry_records(entry: dict) -> list[TumorRecord]:
    return [TumorRecord.from_dict(d) for d in entry["tumors"]]
