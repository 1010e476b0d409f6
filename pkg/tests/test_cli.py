import csv
import json

import numpy as np
import pytest

from diffguide import dtns
from diffguide.cli import main, render_grid
from diffguide.data import Dataset, gen_gmm_dataset, save_dataset
from diffguide.denoiser import GmmSpec
from diffguide.pipelines import ConfigError, clear_cache, parse_config

GMM = {"kind": "gmm", "n": 400, "gmm": {"weights": [0.5, 0.5], "means": [[-3, 0], [3, 0]],
                                        "variances": [[1, 1], [1, 1]]},
       "labelled_fraction": 0.5, "val_n": 200}
GRID = {"kind": "gridmask", "n": 300, "grid": {}, "model_scale": 2.0, "model_shift": -1.0,
        "labelled_fraction": 0.5, "val_n": 100}
SCHEDULE = {"kind": "linear", "T": 50}
MODEL = {"hidden": [32, 32, 32], "train": {"steps": 50, "batch_size": 32}}
SMALL_GEN = {"finetune": {"steps": 20}, "rejection": {"t_pair": [5, 20], "steps": 20},
             "sampler": {"num_steps": 5, "eta": 1.0}, "cas": {"epochs": 2}, "per_class": 5,
             "max_attempts_per_sample": 3}


def config(pipeline, dataset=GMM, seeds=(0,), **extra):
    return {"name": "t", "schedule": SCHEDULE, "model": MODEL, "dataset": dataset, "pipeline": pipeline,
            "seeds": list(seeds), "output_dir": "out", **extra}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def read_metrics(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def read_pgm(path):
    raw = path.read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    assert magic == b"P5" and maxval == b"255"
    return np.frombuffer(rest, np.uint8).reshape(h, w)


def test_render_single_black_tile(tmp_path):
    render_grid(np.zeros((1, 8, 8)), tmp_path / "a.pgm")
    img = read_pgm(tmp_path / "a.pgm")
    assert img.shape == (8, 8) and not img.any()


def test_render_maps_and_clamps_values(tmp_path):
    x = np.zeros((1, 8, 8))
    x[0, 0, 0], x[0, 0, 1], x[0, 0, 2], x[0, 0, 3] = 1.0, 2.0, -1.0, 0.5
    render_grid(x, tmp_path / "a.pgm")
    assert read_pgm(tmp_path / "a.pgm")[0, :4].tolist() == [255, 255, 0, 128]


def test_render_twelve_samples_tile_as_three_rows_of_four(tmp_path):
    x = np.stack([np.full((8, 8), (i + 1) / 12) for i in range(12)])
    render_grid(x, tmp_path / "a.pgm")
    img = read_pgm(tmp_path / "a.pgm")
    assert img.shape == (3 * 8 + 2, 4 * 8 + 3)
    for i in range(12):
        r, c = divmod(i, 4)
        assert (img[r * 9:r * 9 + 8, c * 9:c * 9 + 8] == round((i + 1) / 12 * 255)).all()
    assert not img[8, :].any() and not img[:, 8].any()


def test_render_rejects_non_grid_shapes(tmp_path):
    with pytest.raises(ValueError):
        render_grid(np.zeros((3, 8, 7)), tmp_path / "a.pgm")
    with pytest.raises(ValueError):
        render_grid(np.zeros((3, 2)), tmp_path / "a.pgm")


def test_render_command(tmp_path):
    dtns.save(tmp_path / "s.dtns", np.ones((2, 8, 8), np.float32))
    assert main(["render", str(tmp_path / "s.dtns"), str(tmp_path / "o.pgm")]) == 0
    assert read_pgm(tmp_path / "o.pgm").shape == (8, 17)
    dtns.save(tmp_path / "bad.dtns", np.ones((2, 5), np.float32))
    assert main(["render", str(tmp_path / "bad.dtns"), str(tmp_path / "o.pgm")]) == 3


def test_unknown_key_fails_before_running(tmp_path, capsys):
    cfg = config({"name": "train", "learning_rate": 0.1})
    assert main(["run", str(write(tmp_path, cfg)), "--output-dir", str(tmp_path / "out")]) == 2
    assert "learning_rate" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
    with pytest.raises(ConfigError, match="surprise"):
        parse_config(json.dumps({**config({"name": "train"}), "surprise": 1}), tmp_path)


def test_missing_referenced_path_is_a_config_error(tmp_path, capsys):
    cfg = config({"name": "evaluate", "reference": "nope", "candidate": "nope"}, dataset=None)
    assert main(["validate", str(write(tmp_path, cfg))]) == 2
    assert "nope" in capsys.readouterr().err


def test_inconsistent_taps_are_a_config_error(tmp_path):
    cfg = config({"name": "train"})
    cfg["model"] = {**MODEL, "taps": [1, 3]}
    assert main(["validate", str(write(tmp_path, cfg))]) == 2


def test_validate_reports_hash(tmp_path, capsys):
    assert main(["validate", str(write(tmp_path, config({"name": "train"})))]) == 0
    assert "hash" in capsys.readouterr().out


def test_evaluate_identical_datasets(tmp_path):
    ds = gen_gmm_dataset(GmmSpec([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]]), 300, 0)
    save_dataset(ds, tmp_path / "a")
    save_dataset(ds, tmp_path / "b")
    cfg = config({"name": "evaluate", "reference": "a", "candidate": "b", "metrics": ["frechet", "cas"],
                  "num_classes": 2, "cas": {"epochs": 2}}, dataset=None)
    assert main(["run", str(write(tmp_path, cfg)), "--output-dir", str(tmp_path / "out")]) == 0
    rows = {r["metric"]: r for r in read_metrics(tmp_path / "out" / "metrics.csv")}
    assert abs(float(rows["evaluate/frechet"]["value"])) <= 1e-10
    assert set(rows["evaluate/frechet"]) == {"run_id", "metric", "value", "n", "seed", "config_hash"}


def test_pipeline_failure_exits_three(tmp_path, capsys):
    unlabelled = Dataset(np.zeros((10, 2), np.float32))
    save_dataset(unlabelled, tmp_path / "a")
    cfg = config({"name": "evaluate", "reference": "a", "candidate": "a", "metrics": ["cas"]}, dataset=None)
    assert main(["run", str(write(tmp_path, cfg)), "--output-dir", str(tmp_path / "out")]) == 3
    assert "labelled" in capsys.readouterr().err


def test_same_config_twice_reproduces_artifacts(tmp_path):
    cfg = write(tmp_path, config({"name": "finetune", "finetune": {"steps": 20},
                                  "sampler": {"num_steps": 5, "chains": 20}}))
    manifests = []
    for run in ("r1", "r2"):
        clear_cache()
        assert main(["run", str(cfg), "--output-dir", str(tmp_path / run)]) == 0
        manifests.append(json.loads((tmp_path / run / "manifest.json").read_text()))
    assert manifests[0]["artifacts"] == manifests[1]["artifacts"]
    assert manifests[0]["config_hash"] == manifests[1]["config_hash"]
    assert any(k.endswith(".dtns") for k in manifests[0]["artifacts"])
    assert any(k.endswith(".ckpt") for k in manifests[0]["artifacts"])


@pytest.mark.parametrize("pipeline,dataset,expected", [
    ({"name": "train"}, GMM, "train/"),
    ({"name": "guide", "task": "attribute", "few_shot": 10, "t_feat": 20, "classifier": {"steps": 10},
      "sampler": {"chains": 50}, "num_steps": [5], "reference_n": 100}, GMM, "guide/feature@5/class_fidelity"),
    ({"name": "guide", "task": "mask", "few_shot": 5, "t_feat": 5,
      "classifier": {"steps": 10, "optimizer": "adam", "lr": 0.01}, "sampler": {"chains": 20, "clamp": [-3, 3]},
      "num_steps": [3]}, GRID, "guide/feature@3/miou"),
    ({"name": "reject", "rejection": {"t_pair": [5, 20], "steps": 20}, "sampler": {"num_steps": 5, "chains": 50}},
     GMM, "reject/"),
    ({"name": "augment", **SMALL_GEN}, GMM, "cas/filtered"),
])
def test_small_pipelines_run(tmp_path, pipeline, dataset, expected):
    assert main(["run", str(write(tmp_path, config(pipeline, dataset))), "--output-dir", str(tmp_path / "o")]) == 0
    rows = read_metrics(tmp_path / "o" / "metrics.csv")
    assert any(r["metric"].startswith(expected) for r in rows)
    assert all(np.isfinite(float(r["value"])) for r in rows)


def test_sweep_emits_one_row_per_multiplier(tmp_path):
    cfg = config({"name": "sweep", "multipliers": [0, 1, 2, 3], **SMALL_GEN})
    assert main(["run", str(write(tmp_path, cfg)), "--output-dir", str(tmp_path / "o")]) == 0
    rows = [r for r in read_metrics(tmp_path / "o" / "metrics.csv") if r["metric"].startswith("sweep/")]
    assert [r["metric"] for r in rows] == [f"sweep/accuracy@{m}x" for m in (0, 1, 2, 3)]
