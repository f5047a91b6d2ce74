import json

import numpy as np
import pytest

from mm3d.cli import main
from mm3d.masking import load_sequence_json
from mm3d.scene import PointScene, save_ply
from mm3d.trainer import load_checkpoint

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _write_scene(path, seed, n=60, constant_colors=None):
    rng = np.random.default_rng(seed)
    colors = (np.full((n, 3), constant_colors, dtype=np.float32)
              if constant_colors is not None
              else rng.random((n, 3)).astype(np.float32))
    scene = PointScene(rng.standard_normal((n, 3)).astype(np.float32),
                       colors, np.arange(n, dtype=np.int64))
    save_ply(scene, path)
    return scene


def _stat_config(path, **over):
    cfg = {"k": 4, "alphas": [0.5, 0.5],
           "channels": ["coordinates", "colors"]}
    cfg.update(over)
    path.write_text(json.dumps(cfg))
    return path


def _train_config(path, **over):
    cfg = {
        "epochs": 2, "batch_size": 2, "ratios": [0.2, 0.4], "gap": 0.2,
        "seed": 5,
        "encoder": {"n_layers": 2, "channels": [8, 16], "k_group": 4,
                    "downsample": 3},
        "decoder": {"hidden": 8},
        "stats": {"k": 6},
    }
    cfg.update(over)
    path.write_text(json.dumps(cfg))
    return path


def _dataset_dir(tmp_path, n_scenes=3, n_points=60):
    root = tmp_path / "scenes"
    root.mkdir()
    for i in range(n_scenes):
        _write_scene(root / f"scene_{i:02d}.ply", seed=i, n=n_points)
    return root


def _csv_rows_sans_seconds(path):
    lines = path.read_text().splitlines()
    return [",".join(line.split(",")[:5]) for line in lines]


# --------------------------------------------------------------------- stats

def test_stats_writes_all_artifacts(tmp_path):
    scene_path = tmp_path / "scene.ply"
    _write_scene(scene_path, seed=0)
    cfg = _stat_config(tmp_path / "cfg.json")
    out = tmp_path / "out"
    assert main(["stats", str(scene_path), str(cfg), str(out)]) == 0
    for name in ("manifest.json", "heatmap.ply", "stats.csv", "heatmap.png",
                 "summary.json"):
        assert (out / name).exists(), name
    assert (out / "heatmap.png").read_bytes()[:8] == PNG_MAGIC
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_points"] == 60
    assert summary["k"] == 4
    assert summary["alphas"] == [0.5, 0.5]
    assert len(summary["d_range"]) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "stats"
    assert manifest["version"]
    assert str(scene_path) in manifest["inputs"]


def test_stats_constant_color_channel_reports_zero_range(tmp_path):
    scene_path = tmp_path / "flat.ply"
    _write_scene(scene_path, seed=1, constant_colors=(0.5, 0.5, 0.5))
    cfg = _stat_config(tmp_path / "cfg.json", alphas=[0.0, 1.0],
                       channels=["colors"])
    out = tmp_path / "out"
    assert main(["stats", str(scene_path), str(cfg), str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["d_range"][0] == 0.0
    assert summary["d_range"][1] < 0.05


def test_stats_missing_config_is_usage_error(tmp_path):
    scene_path = tmp_path / "scene.ply"
    _write_scene(scene_path, seed=0)
    out = tmp_path / "out"
    assert main(["stats", str(scene_path), str(tmp_path / "nope.json"),
                 str(out)]) == 2
    assert main(["stats"]) == 2  # argparse usage failure


def test_stats_bad_config_values_exit2(tmp_path):
    scene_path = tmp_path / "scene.ply"
    _write_scene(scene_path, seed=0)
    cfg = _stat_config(tmp_path / "cfg.json", k=0)
    assert main(["stats", str(scene_path), str(cfg), str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["stats", str(scene_path), str(bad), str(tmp_path / "o2")]) == 2
    unknown = tmp_path / "unk.json"
    unknown.write_text(json.dumps({"k": 4, "alphas": [0.5, 0.5],
                                   "channels": ["colors"], "what": 1}))
    assert main(["stats", str(scene_path), str(unknown),
                 str(tmp_path / "o3")]) == 2


def test_stats_unparseable_scene_exit3_manifest_still_written(tmp_path):
    bad_scene = tmp_path / "broken.ply"
    bad_scene.write_text("ply\nformat ascii 1.0\nelement vertex 1\n")
    cfg = _stat_config(tmp_path / "cfg.json")
    out = tmp_path / "out"
    assert main(["stats", str(bad_scene), str(cfg), str(out)]) == 3
    assert (out / "manifest.json").exists()
    assert not (out / "stats.csv").exists()


def test_stats_repeat_invocation_identical_csv(tmp_path):
    scene_path = tmp_path / "scene.ply"
    _write_scene(scene_path, seed=2)
    cfg = _stat_config(tmp_path / "cfg.json")
    assert main(["stats", str(scene_path), str(cfg), str(tmp_path / "a")]) == 0
    assert main(["stats", str(scene_path), str(cfg), str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "stats.csv").read_bytes() == \
        (tmp_path / "b" / "stats.csv").read_bytes()


# ---------------------------------------------------------------------- mask

def test_mask_exports_sequence_and_figure(tmp_path):
    scene_path = tmp_path / "scene.ply"
    _write_scene(scene_path, seed=3, n=50)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"k": 4, "alphas": [0.5, 0.5],
                               "channels": ["coordinates", "colors"],
                               "ratios": [0.2, 0.4], "gap": 0.2}))
    out = tmp_path / "out"
    assert main(["mask", str(scene_path), str(cfg), str(out)]) == 0
    theta, sets = load_sequence_json(out / "sequence.json")
    assert theta == (0.2, 0.4)
    assert [len(s) for s in sets] == [40, 30]
    assert set(sets[1].tolist()) <= set(sets[0].tolist())
    assert (out / "masks.png").read_bytes()[:8] == PNG_MAGIC
    summary = json.loads((out / "summary.json").read_text())
    assert summary["retained"] == [40, 30]


# ------------------------------------------------------------------ pretrain

def test_pretrain_writes_artifacts(tmp_path):
    data = _dataset_dir(tmp_path)
    cfg = _train_config(tmp_path / "train.json")
    out = tmp_path / "run"
    assert main(["pretrain", str(data), str(cfg), str(out)]) == 0
    lines = (out / "losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss_pc,loss_csd,loss_total,lr,seconds"
    assert len(lines) == 3  # header + 2 epochs
    ckpt = load_checkpoint(out / "checkpoint.mmck")
    assert ckpt.epoch == 2
    assert (out / "loss_curves.png").read_bytes()[:8] == PNG_MAGIC
    summary = json.loads((out / "summary.json").read_text())
    assert summary["scenes"] == 3
    assert summary["skipped_scenes"] == 0
    assert np.isfinite(summary["final_loss_total"])


def test_pretrain_zeta2_flag_zeroes_csd_column(tmp_path):
    data = _dataset_dir(tmp_path)
    cfg = _train_config(tmp_path / "train.json")
    out = tmp_path / "run"
    assert main(["pretrain", str(data), str(cfg), str(out),
                 "--zeta2", "0"]) == 0
    lines = (out / "losses.csv").read_text().splitlines()[1:]
    assert all(float(line.split(",")[2]) == 0.0 for line in lines)
    assert all(float(line.split(",")[1]) > 0.0 for line in lines)


def test_pretrain_seeded_rerun_reproduces_losses(tmp_path):
    data = _dataset_dir(tmp_path)
    cfg = _train_config(tmp_path / "train.json")
    assert main(["pretrain", str(data), str(cfg), str(tmp_path / "a")]) == 0
    assert main(["pretrain", str(data), str(cfg), str(tmp_path / "b")]) == 0
    # wall-clock seconds column aside, the rows must match exactly
    assert _csv_rows_sans_seconds(tmp_path / "a" / "losses.csv") == \
        _csv_rows_sans_seconds(tmp_path / "b" / "losses.csv")


def test_pretrain_thread_env_does_not_change_losses(tmp_path, monkeypatch):
    data = _dataset_dir(tmp_path)
    cfg = _train_config(tmp_path / "train.json")
    assert main(["pretrain", str(data), str(cfg), str(tmp_path / "a")]) == 0
    monkeypatch.setenv("MM3D_THREADS", "3")
    assert main(["pretrain", str(data), str(cfg), str(tmp_path / "b")]) == 0
    assert _csv_rows_sans_seconds(tmp_path / "a" / "losses.csv") == \
        _csv_rows_sans_seconds(tmp_path / "b" / "losses.csv")


def test_pretrain_invalid_thread_env_exit2(tmp_path, monkeypatch):
    data = _dataset_dir(tmp_path)
    cfg = _train_config(tmp_path / "train.json")
    monkeypatch.setenv("MM3D_THREADS", "many")
    assert main(["pretrain", str(data), str(cfg), str(tmp_path / "o")]) == 2


def test_pretrain_empty_dataset_exit3(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    cfg = _train_config(tmp_path / "train.json")
    assert main(["pretrain", str(empty), str(cfg), str(tmp_path / "o")]) == 3
    assert main(["pretrain", str(tmp_path / "missing"), str(cfg),
                 str(tmp_path / "o2")]) == 3


def test_pretrain_degenerate_dataset_exit3(tmp_path):
    data = tmp_path / "tiny"
    data.mkdir()
    _write_scene(data / "small.ply", seed=0, n=5)
    cfg = _train_config(tmp_path / "train.json")
    with pytest.warns(UserWarning):
        assert main(["pretrain", str(data), str(cfg), str(tmp_path / "o")]) == 3


# --------------------------------------------------------------- reconstruct

def test_reconstruct_dumps_layers_and_panels(tmp_path):
    data = _dataset_dir(tmp_path)
    cfg = _train_config(tmp_path / "train.json")
    run = tmp_path / "run"
    assert main(["pretrain", str(data), str(cfg), str(run)]) == 0
    out = tmp_path / "recon"
    scene_path = data / "scene_00.ply"
    assert main(["reconstruct", str(run / "checkpoint.mmck"), str(scene_path),
                 str(cfg), str(out), "--theta", "0.3"]) == 0
    for name in ("target.ply", "recon_layer1.ply", "recon_layer2.ply",
                 "panels.png", "summary.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["theta"] == 0.3
    assert len(summary["chamfer_per_layer"]) == 2
    assert all(np.isfinite(v) and v >= 0 for v in summary["chamfer_per_layer"])


def test_reconstruct_config_mismatch_exit3(tmp_path):
    data = _dataset_dir(tmp_path)
    cfg = _train_config(tmp_path / "train.json")
    run = tmp_path / "run"
    assert main(["pretrain", str(data), str(cfg), str(run)]) == 0
    other = _train_config(tmp_path / "other.json", seed=99)
    assert main(["reconstruct", str(run / "checkpoint.mmck"),
                 str(data / "scene_00.ply"), str(other),
                 str(tmp_path / "o")]) == 3


# -------------------------------------------------------------------- ablate

def test_ablate_emits_six_cells(tmp_path):
    data = _dataset_dir(tmp_path, n_scenes=5)
    cfg = _train_config(tmp_path / "train.json", epochs=1)
    out = tmp_path / "ab"
    assert main(["ablate", str(data), str(cfg), str(out), "--seeds", "1"]) == 0
    table = json.loads((out / "ablation.json").read_text())
    cells = table["cells"]
    assert len(cells) == 6
    for strategy in ("informative_preserved", "informative_abandoned", "random"):
        for mode in ("progressive", "single_step"):
            cell = cells[f"{strategy}/{mode}"]
            assert cell["seeds"] == [5]
            assert len(cell["losses"]) == 1
            assert np.isfinite(cell["losses"][0])
    assert len(table["split"]["eval"]) == 1
    assert len(table["split"]["train"]) == 4
    assert not (set(table["split"]["eval"]) & set(table["split"]["train"]))
    assert (out / "ablation.png").read_bytes()[:8] == PNG_MAGIC


# ----------------------------------------------------------------- gradcheck

def test_gradcheck_suite_passes(tmp_path):
    out = tmp_path / "gc"
    assert main(["gradcheck", str(out), "--seeds", "2"]) == 0
    lines = (out / "gradcheck.csv").read_text().splitlines()
    assert lines[0] == "check,seed,error,tolerance,passed"
    assert len(lines) == 1 + 2 * 6  # six checks per seed
    assert all(line.endswith(",1") for line in lines[1:])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_failed"] == 0
    assert (out / "gradcheck.png").read_bytes()[:8] == PNG_MAGIC


def test_version_flag():
    assert main(["--version"]) == 0
