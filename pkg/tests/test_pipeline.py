import json
import shutil

import pytest
from click.testing import CliRunner

from tumorlab.io import read_json, write_json
from tumorlab.model import ModelConfig
from tumorlab.phantom import PhantomConfig
from tumorlab.pipeline import (
    STAGES,
    ExperimentConfig,
    channel_sweep,
    reseeded,
    run_ablations,
    run_pipeline,
)
from tumorlab.training import TrainConfig


def mini_config(seed=0):
    return ExperimentConfig(
        phantom=PhantomConfig(n_images=8, volume_shape=(32, 32, 32), size_range_mm=(4.0, 9.0), seed=seed),
        model=ModelConfig(channels=4, n_resblocks=1, seed=seed + 1),
        train=TrainConfig(epochs=2, batches_per_epoch=3, batch_size=2, patch_size=(16, 16, 16),
                          lr_drop_epochs=(1,), seed=seed + 2),
        sweep_ks=(1, 2, 3),
        knn_k=2,
        panel_k=1,
        split_seed=seed + 5,
    )


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("mini_run")
    summary = run_pipeline(mini_config(), out)
    return out, summary


def test_pipeline_completes_all_nine_stages(mini_run):
    _, summary = mini_run
    assert [s["name"] for s in summary["stages"]] == list(STAGES)
    assert all(s["status"] == "completed" for s in summary["stages"])
    assert len(summary["stages"]) == 9


def test_pipeline_summary_links_artifacts(mini_run):
    out, summary = mini_run
    assert (out / "summary.json").exists()
    assert (out / "config.json").exists()
    for stage in summary["stages"]:
        for rel in stage["outputs"]:
            assert (out / rel).exists(), rel
    assert "knn" in summary["metrics"]
    assert "accuracy" in summary["metrics"]["knn"]


def test_pipeline_resumes_after_deleting_viz(mini_run):
    out, _ = mini_run
    shutil.rmtree(out / "viz")
    summary = run_pipeline(mini_config(), out)
    flags = {s["name"]: s["reused"] for s in summary["stages"]}
    for name in STAGES[:7]:
        assert flags[name], f"{name} should be reused"
    assert not flags["tsne"] and not flags["panels"]


def test_pipeline_config_edit_invalidates_downstream(mini_run, tmp_path):
    out, _ = mini_run
    cfg = mini_config()
    cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "knn_k": 3})
    summary = run_pipeline(cfg, out)
    flags = {s["name"]: s["reused"] for s in summary["stages"]}
    for name in STAGES[:4]:
        assert flags[name]
    for name in STAGES[4:]:
        assert not flags[name], f"{name} should rerun after knn_k change"


def test_pipeline_stage_failure_names_stage(tmp_path):
    cfg = mini_config()
    bad = ExperimentConfig.from_dict({**cfg.to_dict(), "phantom": {**cfg.phantom.to_dict(), "n_images": 3}})
    from tumorlab.pipeline import StageError

    with pytest.raises(StageError, match="stage 'split' failed"):
        run_pipeline(bad, tmp_path / "bad")
    assert (tmp_path / "bad" / "dataset" / "manifest.json").exists()  # partial outputs preserved


def test_pipeline_is_deterministic(tmp_path):
    a = run_pipeline(mini_config(seed=7), tmp_path / "a")
    b = run_pipeline(mini_config(seed=7), tmp_path / "b")
    assert a["metrics"] == b["metrics"]
    ra = read_json(tmp_path / "a" / "reports" / "knn_k5.json")
    rb = read_json(tmp_path / "b" / "reports" / "knn_k5.json")
    assert ra == rb


def test_experiment_config_seed_propagation():
    cfg = ExperimentConfig.from_dict({"seed": 40})
    assert cfg.phantom.seed == 40
    assert cfg.model.seed == 41
    assert cfg.train.seed == 42
    assert cfg.distortion.seed == 43
    assert cfg.projection.seed == 44
    assert cfg.split_seed == 45
    explicit = ExperimentConfig.from_dict({"seed": 40, "phantom": {"seed": 3}})
    assert explicit.phantom.seed == 3
    re = reseeded(explicit, 10)
    assert re.phantom.seed == 10 and re.train.seed == 12


def test_experiment_config_validates_region_agreement():
    cfg = ExperimentConfig.from_dict({"phantom": {"n_regions": 7}})
    with pytest.raises(ValueError, match="n_regions"):
        cfg.validate()


def test_channel_sweep_rows_and_reuse(tmp_path):
    cfg = mini_config(seed=3)
    report = channel_sweep(cfg, [2, 4], out_root=tmp_path / "sweep")
    assert [r["channels"] for r in report["rows"]] == [2, 4]
    assert (tmp_path / "sweep" / "channels" / "sweep.csv").exists()
    with pytest.raises(ValueError, match="nonempty"):
        channel_sweep(cfg, [], out_root=tmp_path / "sweep")
    with pytest.raises(ValueError, match="duplicate"):
        channel_sweep(cfg, [4, 4], out_root=tmp_path / "sweep")


def test_channel_sweep_single_value_matches_pipeline(tmp_path):
    cfg = mini_config(seed=9)
    summary = run_pipeline(cfg, tmp_path / "pipe")
    report = channel_sweep(cfg, [cfg.model.channels], out_root=tmp_path / "sweep")
    row = report["rows"][0]
    assert row["accuracy"] == summary["metrics"]["knn"]["accuracy"]
    assert row["rmse_mm"] == summary["metrics"]["knn"]["rmse_mm"]


def test_run_ablations_produces_comparison(tmp_path):
    cfg = mini_config(seed=5)
    subsets = [("segmentation", "type"), ("segmentation",)]
    report = run_ablations(cfg, subsets, out_root=tmp_path / "abl")
    assert len(report["rows"]) == 2
    assert (tmp_path / "abl" / "ablations" / "comparison.json").exists()
    assert (tmp_path / "abl" / "ablations" / "comparison.csv").exists()
    names = [r["name"] for r in report["rows"]]
    assert names == ["segmentation-type", "segmentation"]


def test_cli_phantom_and_eval_roundtrip(tmp_path):
    from tumorlab.cli import eval_knn_cli, phantom

    runner = CliRunner()
    cfg_path = tmp_path / "phantom.json"
    write_json(cfg_path, PhantomConfig(n_images=6, volume_shape=(32, 32, 32),
                                       size_range_mm=(4.0, 9.0), seed=2).to_dict())
    res = runner.invoke(phantom, ["generate", "--config", str(cfg_path), "--out", str(tmp_path / "ds")])
    assert res.exit_code == 0, res.output
    assert "6 images" in res.output
    res = runner.invoke(phantom, ["split", "--manifest", str(tmp_path / "ds" / "manifest.json"),
                                  "--test-fraction", "0.2", "--seed", "1"])
    assert res.exit_code == 0, res.output
    manifest = read_json(tmp_path / "ds" / "manifest.json")
    assert sum(e["split"] == "test" for e in manifest["images"]) == 1


def test_cli_lab_run_and_env_override(tmp_path, monkeypatch):
    from tumorlab.cli import lab

    runner = CliRunner()
    cfg = mini_config(seed=1)
    cfg_path = tmp_path / "exp.json"
    write_json(cfg_path, {**cfg.to_dict(), "out_root": "exp_dir"})
    monkeypatch.setenv("TUMORLAB_OUT_ROOT", str(tmp_path / "env_root"))
    res = runner.invoke(lab, ["run", "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "env_root" / "exp_dir" / "summary.json").exists()


def test_cli_train_embed_eval_chain(tmp_path):
    from tumorlab.cli import embed_cli, eval_knn_cli, train_cli
    from tumorlab.phantom import generate_dataset, save_manifest, split_dataset

    manifest = generate_dataset(PhantomConfig(n_images=6, volume_shape=(32, 32, 32),
                                              size_range_mm=(4.0, 9.0), seed=4), tmp_path / "ds")
    tagged = split_dataset(manifest, 0.2, seed=0)
    save_manifest(tagged, tmp_path / "ds" / "manifest.json")
    write_json(tmp_path / "model.json", ModelConfig(channels=4, n_resblocks=1).to_dict())
    write_json(tmp_path / "train.json", TrainConfig(epochs=1, batches_per_epoch=2, patch_size=(16, 16, 16),
                                                    lr_drop_epochs=()).to_dict())
    runner = CliRunner()
    res = runner.invoke(train_cli, ["--manifest", str(tmp_path / "ds" / "manifest.json"),
                                    "--model-config", str(tmp_path / "model.json"),
                                    "--train-config", str(tmp_path / "train.json"),
                                    "--out", str(tmp_path / "run")])
    assert res.exit_code == 0, res.output
    for split, name in (("train", "tr.tbl"), ("test", "te.tbl")):
        res = runner.invoke(embed_cli, ["--checkpoint", str(tmp_path / "run" / "final.ckpt"),
                                        "--manifest", str(tmp_path / "ds" / "manifest.json"),
                                        "--split", split, "--out", str(tmp_path / name),
                                        "--patch-size", "16"])
        assert res.exit_code == 0, res.output
    res = runner.invoke(eval_knn_cli, ["--train-table", str(tmp_path / "tr.tbl"),
                                       "--test-table", str(tmp_path / "te.tbl"), "--k", "2",
                                       "--out", str(tmp_path / "report.json")])
    assert res.exit_code == 0, res.output
    report = read_json(tmp_path / "report.json")
    assert report["k"] == 2


def test_cli_sweep_and_viz(tmp_path, tiny_checkpoint, tiny_dataset):
    from tumorlab.cli import sweep_k_cli, viz
    from tumorlab.phantom import save_manifest

    manifest_path = tiny_dataset["dir"] / "manifest.split.json"
    runner = CliRunner()
    # build tables via the API to keep the test quick
    from tumorlab.retrieval import embed_dataset

    embed_dataset(tiny_checkpoint["checkpoint"], tiny_dataset["manifest"], tiny_dataset["dir"], "train",
                  tmp_path / "tr.tbl", patch_size=(16, 16, 16))
    embed_dataset(tiny_checkpoint["checkpoint"], tiny_dataset["manifest"], tiny_dataset["dir"], "test",
                  tmp_path / "te.tbl", patch_size=(16, 16, 16))
    res = runner.invoke(sweep_k_cli, ["--train-table", str(tmp_path / "tr.tbl"),
                                      "--test-table", str(tmp_path / "te.tbl"),
                                      "--ks", "1:3", "--out-dir", str(tmp_path / "sweep")])
    assert res.exit_code == 0, res.output
    assert sorted(p.name for p in (tmp_path / "sweep").glob("*.json")) == ["k_01.json", "k_02.json", "k_03.json"]
    res = runner.invoke(viz, ["ksweep", "--reports-dir", str(tmp_path / "sweep"),
                              "--out", str(tmp_path / "sweep.png")])
    assert res.exit_code == 0, res.output
    res = runner.invoke(viz, ["tsne", "--table", str(tmp_path / "tr.tbl"),
                              "--out", str(tmp_path / "tsne.png"), "--method", "pca-fallback"])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "tsne.csv").exists()
