import json

import numpy as np
import pytest

from cyclevae import tensor as T
from cyclevae.checkpoint import load_checkpoint
from cyclevae.cli import main
from cyclevae.gradcheck import end_to_end_checks, op_checks
from cyclevae.training import TrainLog


def run_config(tmp_path, iterations=50, **train):
    config = {
        "output_dir": str(tmp_path / "run"),
        "dataset": {"kind": "toy", "seed": 1,
                    "toy": {"num_identities": 3, "images_per_identity": 12, "image_size": 28},
                    "split": {"seed": 2, "fractions": [0.5, 0.0, 0.5]}},
        "model": {"image_channels": 3, "image_size": 28, "z_dim": 4, "s_dim": 3,
                  "trunk_channels": [4, 6, 8], "branch_width": 16},
        "train": {"seed": 3, "iterations": iterations, "batch_size": 4, "log_every": 0, **train},
        "probe": {"seed": 4, "hidden_units": 16, "epochs": 3},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    path = run_config(tmp)
    assert main(["train", "--config", str(path)]) == 0
    return path, tmp / "run"


def one_error_line(capsys):
    err = [line for line in capsys.readouterr().err.splitlines() if "error" in line]
    assert len(err) == 1
    return err[0]


# ---------------------------------------------------------------- train


def test_train_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["train", "--config", str(missing)]) != 0
    assert str(missing) in one_error_line(capsys)


def test_train_rejects_unknown_key(tmp_path, capsys):
    path = run_config(tmp_path)
    data = json.loads(path.read_text())
    data["train"]["momentum"] = 0.5
    path.write_text(json.dumps(data))
    assert main(["train", "--config", str(path)]) != 0
    assert "momentum" in one_error_line(capsys)


def test_train_requires_seeds(tmp_path, capsys):
    path = run_config(tmp_path)
    data = json.loads(path.read_text())
    del data["train"]["seed"]
    path.write_text(json.dumps(data))
    assert main(["train", "--config", str(path)]) != 0
    assert "seed" in one_error_line(capsys)


def test_train_writes_reloadable_checkpoint(trained):
    _, out = trained
    params, blocks, extra = load_checkpoint(out / "final.cvae")
    assert extra["iteration"] == 50 and params.config.z_dim == 4
    assert len(TrainLog.read(out / "train_log.tsv").records) == 50


def test_train_twice_identical(trained, tmp_path):
    path, out = trained
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "final.cvae").read_bytes() == (out / "final.cvae").read_bytes()


# ---------------------------------------------------------------- eval


def test_eval_report_and_repeatability(trained, tmp_path, capsys):
    path, out = trained
    assert main(["eval", "--config", str(path), "--checkpoint", str(out / "final.cvae"), "--out", str(tmp_path)]) == 0
    assert "z test acc." in capsys.readouterr().out
    first = (tmp_path / "eval_report.kv").read_text()
    keys = [line.split("=")[0] for line in first.splitlines() if line.split("=")[0].endswith("_acc")]
    assert keys == ["z_train_acc", "z_test_acc", "s_train_acc", "s_test_acc"]
    assert main(["eval", "--config", str(path), "--checkpoint", str(out / "final.cvae"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "eval_report.kv").read_text() == first


def test_eval_corrupt_checkpoint(trained, tmp_path, capsys):
    path, out = trained
    bad = tmp_path / "bad.cvae"
    raw = bytearray((out / "final.cvae").read_bytes())
    raw[:6] = b"NOTCKP"
    bad.write_bytes(bytes(raw))
    assert main(["eval", "--config", str(path), "--checkpoint", str(bad)]) != 0
    assert "magic" in one_error_line(capsys)


def test_eval_incompatible_checkpoint(trained, tmp_path, capsys):
    path, out = trained
    data = json.loads(path.read_text())
    data["model"]["z_dim"] = 5
    other = tmp_path / "other.json"
    other.write_text(json.dumps(data))
    assert main(["eval", "--config", str(other), "--checkpoint", str(out / "final.cvae")]) != 0
    one_error_line(capsys)


# ---------------------------------------------------------------- generate


@pytest.mark.parametrize("mode,extra,name", [
    ("swap", [], "swap_5_11x11.png"),
    ("interp", ["--steps", "8"], "interp_5_8x8.png"),
    ("sample", ["--count", "4"], "sample_5_4x5.png"),
])
def test_generate_modes(trained, tmp_path, mode, extra, name):
    path, out = trained
    args = ["generate", "--config", str(path), "--checkpoint", str(out / "final.cvae"), "--mode", mode,
            "--seed", "5", "--out", str(tmp_path)] + extra
    assert main(args) == 0
    first = (tmp_path / name).read_bytes()
    assert main(args) == 0
    assert (tmp_path / name).read_bytes() == first


def test_generate_swap_grid_pixels(trained, tmp_path):
    path, out = trained
    main(["generate", "--config", str(path), "--checkpoint", str(out / "final.cvae"), "--mode", "swap",
          "--seed", "0", "--count", "10", "--out", str(tmp_path)])
    from cyclevae.generation import read_image

    image = read_image(tmp_path / "swap_0_11x11.png")
    assert image.shape == (3, 11 * 29 - 1, 11 * 29 - 1)


def test_generate_unknown_mode(trained):
    path, out = trained
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--config", str(path), "--checkpoint", str(out / "final.cvae"), "--mode", "morph",
              "--seed", "1"])
    assert exc.value.code == 2


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_passes_and_lists_each_op_once(capsys):
    assert main(["gradcheck"]) == 0
    lines = [line for line in capsys.readouterr().out.splitlines() if line.startswith(("PASS", "FAIL"))]
    names = [line.split()[1] for line in lines]
    expected = list(op_checks()) + list(end_to_end_checks())
    assert sorted(names) == sorted(n.split()[0] for n in expected)
    assert len(lines) == len(expected)


def test_gradcheck_detects_corrupted_backward(monkeypatch, capsys):
    def wrong(ctx, grad):
        (mask,) = ctx.saved
        return (grad * mask * 1.5,)

    monkeypatch.setattr(T.ReLU, "backward", staticmethod(wrong))
    assert main(["gradcheck"]) == 1
    captured = capsys.readouterr()
    assert "FAIL relu" in captured.out
    assert "relu" in captured.err


# ---------------------------------------------------------------- make-toy-data


def test_make_toy_data(tmp_path):
    cfg = tmp_path / "toy.json"
    cfg.write_text(json.dumps({"seed": 7, "toy": {"num_identities": 2, "images_per_identity": 4, "image_size": 16}}))
    assert main(["make-toy-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["make-toy-data", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    lines = (tmp_path / "a" / "labels.csv").read_text().splitlines()
    pngs = sorted((tmp_path / "a").glob("*.png"))
    assert len(lines) == len(pngs) == 8
    for p in pngs:
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_make_toy_data_rejects_zero_identities(tmp_path, capsys):
    cfg = tmp_path / "toy.json"
    cfg.write_text(json.dumps({"seed": 7, "toy": {"num_identities": 0}}))
    assert main(["make-toy-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 2
    assert "num_identities" in one_error_line(capsys)


def test_thread_env_validated(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CYCLEVAE_THREADS", "zero")
    cfg = tmp_path / "toy.json"
    cfg.write_text(json.dumps({"seed": 7, "toy": {"num_identities": 2, "images_per_identity": 2, "image_size": 16}}))
    assert main(["make-toy-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) != 0
    assert "CYCLEVAE_THREADS" in one_error_line(capsys)
    monkeypatch.setenv("CYCLEVAE_THREADS", "1")
    assert main(["make-toy-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
