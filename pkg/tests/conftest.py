import numpy as np
import pytest

from tumorlab.model import ModelConfig
from tumorlab.phantom import PhantomConfig, generate_dataset, save_manifest, split_dataset
from tumorlab.training import TrainConfig, train

TINY_PHANTOM = PhantomConfig(
    volume_shape=(32, 32, 32),
    n_images=10,
    tumors_per_image=(1, 2),
    size_range_mm=(4.0, 9.0),
    seed=11,
)
TINY_MODEL = ModelConfig(channels=4, n_resblocks=1, seed=1)
TINY_TRAIN = TrainConfig(
    epochs=2,
    batches_per_epoch=4,
    batch_size=2,
    patch_size=(16, 16, 16),
    lr_drop_epochs=(1,),
    seed=2,
)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """10 small phantom images with an 80/20 split, shared across tests."""
    out = tmp_path_factory.mktemp("tiny_dataset")
    manifest = generate_dataset(TINY_PHANTOM, out)
    tagged = split_dataset(manifest, 0.2, seed=3)
    save_manifest(tagged, out / "manifest.split.json")
    return {"dir": out, "manifest": tagged, "config": TINY_PHANTOM}


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_dataset, tmp_path_factory):
    """A briefly trained tiny model over the tiny dataset."""
    out = tmp_path_factory.mktemp("tiny_train")
    report = train(tiny_dataset["manifest"], tiny_dataset["dir"], TINY_MODEL, TINY_TRAIN, out, split="train")
    return {"checkpoint": report.final_checkpoint, "report": report, "model_config": TINY_MODEL, "train_config": TINY_TRAIN}


def random_embedding_table(rng: np.random.Generator, n_rows: int, channels: int, n_images: int | None = None):
    """Synthetic embedding table for pure-retrieval tests."""
    from tumorlab.retrieval import EmbeddingTable, TableRow

    if n_images is None:
        n_images = max(2, n_rows // 2)
    rows = []
    for i in range(n_rows):
        labels = {
            "type_label": ["metastasis", "meningioma", "schwannoma"][int(rng.integers(3))],
            "region_label": int(rng.integers(11)),
            "left_right": ["left", "right"][int(rng.integers(2))],
            "front_rear": ["front", "rear"][int(rng.integers(2))],
            "upper_lower": ["lower", "upper"][int(rng.integers(2))],
            "linear_size_mm": float(rng.uniform(4, 20)),
        }
        rows.append(
            TableRow(
                tumor_id=f"t{i:04d}",
                image_id=f"img{int(rng.integers(n_images)):04d}",
                embedding=rng.standard_normal(channels).astype(np.float32),
                labels=labels,
            )
        )
    return EmbeddingTable(fingerprint="synthetic", channels=channels, rows=rows)
