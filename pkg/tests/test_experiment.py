import csv
import json

import numpy as np
import pytest

from gbnorm.experiment import (
    DEFAULT_SPECS,
    HIST_BINS,
    METRICS_HEADER,
    TrainConfig,
    histogram,
    histogram_dump,
    load_checkpoint,
    main,
    run,
    save_checkpoint,
)
from gbnorm.nn import build_lenet_small, build_mlp_small

SMALL = ["--synth", "--train-size", "120", "--test-size", "60", "--batch-size", "40"]


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def masked(path):
    col = METRICS_HEADER.index("seconds")
    return [r[:col] + r[col + 1 :] for r in read_rows(path)]


def test_single_spec_single_epoch(tmp_path):
    assert main(SMALL + ["--specs", "sd", "--epochs", "1", "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "metrics.csv")
    assert rows[0] == METRICS_HEADER
    assert len(rows) == 2 and rows[1][:2] == ["sd", "1"]
    assert 0 <= float(rows[1][3]) <= 100
    assert (tmp_path / "sd_epoch1.ckpt").exists()
    assert json.loads((tmp_path / "status.json").read_text())["sd"][0]["status"] == "ok"


def test_all_default_specs(tmp_path):
    cfg = TrainConfig(synth=True, train_size=80, test_size=40, batch_size=40, epochs=2, out_dir=str(tmp_path))
    results = run(cfg)
    rows = read_rows(tmp_path / "metrics.csv")[1:]
    assert len(rows) == 7 * 2 == len(results[0])
    assert [r[0] for r in rows[::2]] == DEFAULT_SPECS


def test_repeat_invocations_match(tmp_path):
    args = SMALL + ["--specs", "sd,sqd2,rbd", "--epochs", "2"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b"), "--workers", "3"]) == 0
    assert masked(tmp_path / "a" / "metrics.csv") == masked(tmp_path / "b" / "metrics.csv")


def test_floats_have_six_significant_digits(tmp_path):
    main(SMALL + ["--specs", "mad", "--epochs", "1", "--out-dir", str(tmp_path)])
    loss = read_rows(tmp_path / "metrics.csv")[1][2]
    assert loss == f"{float(loss):.6g}"


def test_repeats_write_separate_files(tmp_path):
    main(SMALL + ["--specs", "sd", "--epochs", "1", "--repeats", "2", "--out-dir", str(tmp_path)])
    a, b = masked(tmp_path / "metrics.csv"), masked(tmp_path / "metrics_repeat1.csv")
    assert len(a) == len(b) == 2 and a != b


def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"synth": True, "train-size": 80, "test_size": 40, "batch_size": 40,
                               "specs": ["rsd"], "epochs": 3}))
    assert main(["--config", str(cfg), "--epochs", "1", "--out-dir", str(tmp_path / "o")]) == 0
    assert len(read_rows(tmp_path / "o" / "metrics.csv")) == 2


@pytest.mark.parametrize("args", [
    ["--specs", "nope"],
    ["--lr", "0"],
    ["--epochs", "0"],
    ["--specs", ""],
    ["--config", "/does/not/exist.json"],
])
def test_config_errors_exit_nonzero(tmp_path, capsys, args):
    assert main(SMALL + ["--out-dir", str(tmp_path)] + args) != 0
    assert "error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    assert main(["--config", str(cfg)]) == 2


def test_missing_data_source_is_an_error(tmp_path):
    assert main(["--out-dir", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_recorded_and_run_continues(tmp_path):
    cfg = TrainConfig(synth=True, train_size=80, test_size=40, batch_size=40, epochs=2, lr=1e300,
                      specs=["sd", "mad"], out_dir=str(tmp_path))
    run(cfg)
    status = json.loads((tmp_path / "status.json").read_text())
    assert [status[s][0]["status"] for s in ("sd", "mad")] == ["nan_loss", "nan_loss"]
    assert read_rows(tmp_path / "metrics.csv") == [METRICS_HEADER]


def test_checkpoint_round_trip(tmp_path):
    model = build_mlp_small("sqd1", seed=0)
    model(np.random.default_rng(0).uniform(size=(10, 784)))
    save_checkpoint(tmp_path / "m.ckpt", model)
    state = load_checkpoint(tmp_path / "m.ckpt")
    ref = model.state_dict()
    assert state.keys() == ref.keys()
    for k in ref:
        assert np.array_equal(state[k], ref[k])
    other = build_mlp_small("sqd1", seed=5)
    other.load_state_dict(state)
    x = np.ones((2, 784))
    assert np.array_equal(other.eval()(x).data, model.eval()(x).data)


def test_histogram_basics():
    edges, counts = histogram(np.full(10, 2.0))
    assert np.count_nonzero(counts) == 1 and counts.sum() == 10
    edges, counts = histogram(np.random.default_rng(0).normal(size=500))
    assert len(edges) == HIST_BINS + 1 and counts.sum() == 500


def test_histogram_dump_files(tmp_path):
    model = build_lenet_small(classes=10, spec="sd", seed=0, epsilon=0.0)
    batch = np.random.default_rng(1).uniform(size=(6, 1, 28, 28))
    pre, post = histogram_dump(model, 1, 3, batch, tmp_path, "sd")
    assert pre.name == "sd_layer1_feat3_pre.csv" and post.name == "sd_layer1_feat3_post.csv"
    rows = read_rows(post)
    assert rows[0] == ["bin_left", "bin_right", "count"] and len(rows) == HIST_BINS + 1
    counts = np.array([int(r[2]) for r in rows[1:]])
    assert counts.sum() == 6 * 24 * 24
    left = np.array([float(r[0]) for r in rows[1:]])
    right = np.array([float(r[1]) for r in rows[1:]])
    centers = (left + right) / 2
    assert abs((centers * counts).sum() / counts.sum()) <= (right[0] - left[0])
    assert model.gbn_layers()[0].batches_seen == 0


def test_histogram_dump_errors(tmp_path):
    model = build_mlp_small(seed=0)
    batch = np.zeros((4, 784))
    with pytest.raises(IndexError):
        histogram_dump(model, 99, 0, batch, tmp_path, "x")
    with pytest.raises(ValueError):
        histogram_dump(model, 1, 0, batch, tmp_path, "x")
    with pytest.raises(IndexError):
        histogram_dump(model, 2, 500, batch, tmp_path, "x")


def test_cli_histogram_option(tmp_path):
    main(SMALL + ["--specs", "sqd2", "--epochs", "1", "--hist-layer", "2", "--out-dir", str(tmp_path)])
    assert (tmp_path / "sqd2_layer2_feat0_pre.csv").exists()
    assert (tmp_path / "sqd2_layer2_feat0_post.csv").exists()


def test_lenet_runs(tmp_path):
    cfg = TrainConfig(arch="lenet_small", synth=True, train_size=8, test_size=4, batch_size=4, epochs=1,
                      specs=["rsd"], out_dir=str(tmp_path))
    assert len(run(cfg)[0]) == 1
