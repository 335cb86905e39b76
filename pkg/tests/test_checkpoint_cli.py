import csv
import io
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from aahead import stat_test as st
from aahead.checkpoint import load_checkpoint, manifest_path, read_tensors, save_checkpoint
from aahead.cli import main, write_predictions
from aahead.detector import DetectorModel, TrainConfig, build_model, detect
from aahead.evaluation import metrics_at_threshold
from aahead.formats import read_image, read_json
from aahead.synth import generate_dataset, load_dataset, SceneSpec
from aahead.tensor_nn import ShapeError

SMALL = {"height": 32, "width": 32}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(SMALL))
    for name, count, seed in (("train", 12, 1), ("val", 4, 2), ("test", 6, 3)):
        assert main(["generate", "--spec", str(spec), "--count", str(count), "--seed", str(seed),
                     "--out", str(root / name)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data):
    out = data / "run"
    cfg = data / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "batch_size": 4, "seed": 2}))
    assert main(["train", "--data", str(data / "train"), "--val", str(data / "val"), "--config", str(cfg),
                 "--out", str(out)]) == 0
    return out


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    model = DetectorModel(seed=5)
    cfg = TrainConfig(seed=5)
    save_checkpoint(tmp_path / "a.ckpt", model, cfg, 3, 0.5)
    loaded, info = load_checkpoint(tmp_path / "a.ckpt")
    assert (info.epoch, info.val_f1, info.config) == (3, 0.5, cfg)
    save_checkpoint(tmp_path / "b.ckpt", loaded, info.config, info.epoch, info.val_f1)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert manifest_path(tmp_path / "a.ckpt").read_bytes() == manifest_path(tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_restores_outputs(tmp_path):
    model = DetectorModel(seed=6)
    save_checkpoint(tmp_path / "m.ckpt", model, TrainConfig(seed=6), 0, 0.0)
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    x = np.random.default_rng(0).uniform(size=(2, 32, 32))
    np.testing.assert_array_equal(model.forward(x)[0], loaded.forward(x)[0])


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, DetectorModel(), TrainConfig(), 0, 0.0)
    meta = read_json(manifest_path(path))
    meta["config"]["channels"] = 4
    manifest_path(path).write_text(json.dumps(meta))
    with pytest.raises(ShapeError, match=r"aadh\.conv1"):
        load_checkpoint(path)


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    model = DetectorModel()
    save_checkpoint(path, model, TrainConfig(), 0, 0.0)
    meta, tensors = read_tensors(path)
    assert meta["format_version"] == 1
    assert path.stat().st_size == 4 * sum(a.size for a in model.named_tensors().values())
    for name, arr in model.named_tensors().items():
        np.testing.assert_array_equal(tensors[name], arr.astype("<f4"))


def test_generate(data, capsys, tmp_path):
    assert read_json(data / "train" / "manifest.json")["count"] == 12
    code, _, _ = run(capsys, "generate", "--spec", data / "spec.json", "--count", 12, "--seed", 1,
                     "--out", tmp_path / "again")
    assert code == 0
    for e in read_json(data / "train" / "manifest.json")["samples"]:
        assert (data / "train" / e["image"]).read_bytes() == (tmp_path / "again" / e["image"]).read_bytes()


@pytest.mark.parametrize("argv", [
    ["generate", "--count", "0", "--out", "x"],
    ["generate", "--count", "-3", "--out", "x"],
    ["noise", "--data", "x", "--sigma", "-1", "--out", "y"],
    ["subset", "--data", "x", "--fraction", "0", "--out", "y"],
    ["fwer", "--alpha", "1.5"],
    ["fwer", "--trials", "10"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:  # argparse-level rejections
        code = exc.code
    assert code == 2


def test_invalid_spec_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"targets_per_image": [3, 1]}))
    code, _, err = run(capsys, "generate", "--spec", bad, "--count", 2, "--out", tmp_path / "o")
    assert code == 2 and "targets_per_image" in err


def test_unknown_config_key_exit_2(data, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "learnrate": 0.1}))
    code, _, err = run(capsys, "train", "--data", data / "train", "--val", data / "val", "--config", cfg,
                       "--out", tmp_path / "r")
    assert code == 2 and "learnrate" in err


def test_missing_dataset_exit_1(tmp_path, capsys):
    code, _, _ = run(capsys, "noise", "--data", tmp_path / "nope", "--out", tmp_path / "o")
    assert code == 1


def test_train_outputs(trained):
    rows = list(csv.DictReader(open(trained / "history.csv")))
    assert len(rows) == 1 and rows[0]["epoch"] == "1"
    model, info = load_checkpoint(trained / "best.ckpt")
    assert info.config.head_kind == "aadh" and info.epoch == 1


def test_config_echo_is_fixed_point(data, trained, tmp_path, capsys):
    echo = (trained / "config.echo.json").read_bytes()
    code, _, _ = run(capsys, "train", "--data", data / "train", "--val", data / "val",
                     "--config", trained / "config.echo.json", "--out", tmp_path / "again")
    assert code == 0
    assert (tmp_path / "again" / "config.echo.json").read_bytes() == echo
    assert (tmp_path / "again" / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()


def test_train_baseline_zero_epochs(data, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 0, "head_kind": "baseline"}))
    code, _, _ = run(capsys, "train", "--data", data / "train", "--val", data / "val", "--config", cfg,
                     "--out", tmp_path / "r")
    assert code == 0
    assert len((tmp_path / "r" / "history.csv").read_text().splitlines()) == 1
    model, info = load_checkpoint(tmp_path / "r" / "best.ckpt")
    assert info.config.head_kind == "baseline"
    fresh = build_model(info.config)
    for name, arr in fresh.named_tensors().items():
        np.testing.assert_array_equal(model.named_tensors()[name], arr)


def test_eval_matches_library(data, trained, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "best.ckpt", "--data", data / "test",
                       "--report", tmp_path / "m.csv", "--pr", tmp_path / "pr.csv")
    assert code == 0
    row = next(csv.DictReader(io.StringIO(out)))
    assert row == next(csv.DictReader(open(tmp_path / "m.csv")))
    samples = load_dataset(data / "test")
    model, info = load_checkpoint(trained / "best.ckpt")
    preds = detect(model, np.stack([s.image for s in samples]), 0.0, info.config.nms_iou)
    ref = metrics_at_threshold(preds, [s.boxes for s in samples], 0.1, 0.05)
    assert float(row["f1"]) == ref.f1
    assert float(row["recall"]) == ref.recall
    assert float(row["fa_per_image"]) == ref.fa_per_image
    assert float(row["ap"]) == ref.ap


def test_eval_perfect_predictions_from_stdin(data, tmp_path, capsys, monkeypatch):
    samples = load_dataset(data / "test")
    write_predictions(tmp_path / "p.json", [[_det(b) for b in s.boxes] for s in samples])
    monkeypatch.setattr("sys.stdin", io.StringIO((tmp_path / "p.json").read_text()))
    code, out, _ = run(capsys, "eval", "--predictions", "-", "--data", data / "test")
    assert code == 0
    row = next(csv.DictReader(io.StringIO(out)))
    assert float(row["f1"]) == 1.0 and float(row["ap"]) == 1.0


def _det(b):
    from aahead.evaluation import Detection
    return Detection(b.x, b.y, b.w, b.h, 1.0)


def test_eval_empty_dataset(tmp_path, capsys):
    generate_dataset(SceneSpec(**SMALL), 2, 0, tmp_path / "d")
    m = read_json(tmp_path / "d" / "manifest.json")
    m.update(count=0, samples=[], source_indices=[])
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(m))
    write_predictions(tmp_path / "p.json", [])
    code, _, err = run(capsys, "eval", "--predictions", tmp_path / "p.json", "--data", tmp_path / "d")
    assert code == 2 and "empty" in err


def test_score_matches_forward(data, trained, tmp_path, capsys):
    entry = read_json(data / "test" / "manifest.json")["samples"][0]
    image = data / "test" / entry["image"]
    code, _, _ = run(capsys, "score", "--checkpoint", trained / "best.ckpt", "--image", image,
                     "--out", tmp_path / "s")
    assert code == 0
    model, _ = load_checkpoint(trained / "best.ckpt")
    obj, _, (_, _, hcache) = model.forward(read_image(image), training=False)
    np.testing.assert_array_equal(read_image(f"{tmp_path / 's'}.objectness.img"), obj[0])
    np.testing.assert_array_equal(read_image(f"{tmp_path / 's'}.significance.img"),
                                  hcache.significance.values[0].astype(np.float32))


def test_score_zero_image(trained, tmp_path, capsys):
    from aahead.formats import write_image
    write_image(tmp_path / "z.f32", np.zeros((32, 32), dtype=np.float32))
    code, _, _ = run(capsys, "score", "--checkpoint", trained / "best.ckpt", "--image", tmp_path / "z.f32",
                     "--out", tmp_path / "z")
    assert code == 0
    obj = read_image(f"{tmp_path / 'z'}.objectness.img")
    assert obj.shape == (8, 8)


def test_noise_and_subset_identity(data, tmp_path, capsys):
    assert run(capsys, "noise", "--data", data / "test", "--sigma", 0, "--out", tmp_path / "n")[0] == 0
    assert run(capsys, "subset", "--data", data / "test", "--fraction", 1, "--out", tmp_path / "s")[0] == 0
    for e in read_json(data / "test" / "manifest.json")["samples"]:
        src = (data / "test" / e["image"]).read_bytes()
        assert (tmp_path / "n" / e["image"]).read_bytes() == src
        assert (tmp_path / "s" / e["image"]).read_bytes() == src


def test_subset_exclude(data, tmp_path, capsys):
    assert run(capsys, "subset", "--data", data / "train", "--fraction", 0.5, "--seed", 1,
               "--out", tmp_path / "a")[0] == 0
    assert run(capsys, "subset", "--data", data / "train", "--fraction", 0.5, "--seed", 2,
               "--out", tmp_path / "b", "--exclude", tmp_path / "a")[0] == 0
    a = set(read_json(tmp_path / "a" / "manifest.json")["source_indices"])
    b = set(read_json(tmp_path / "b" / "manifest.json")["source_indices"])
    assert len(a) == len(b) == 6 and not a & b


def test_plot_svg(data, trained, tmp_path, capsys):
    run(capsys, "eval", "--checkpoint", trained / "best.ckpt", "--data", data / "test", "--pr", tmp_path / "pr.csv")
    code, _, _ = run(capsys, "plot", "--pr", tmp_path / "pr.csv", "--out", tmp_path / "pr.svg")
    assert code == 0
    root = ET.parse(tmp_path / "pr.svg").getroot()
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 1


def test_plot_missing_file(tmp_path, capsys):
    assert run(capsys, "plot", "--pr", tmp_path / "none.csv", "--out", tmp_path / "x.svg")[0] == 2


def test_fwer_row(capsys):
    code, out, _ = run(capsys, "fwer", "--alpha", 0.01, "--n", 4096, "--trials", 1000, "--seed", 0, "--header")
    assert code == 0
    header, line = out.strip().splitlines()
    assert header == "alpha,N,correction,theta,empirical_rate,ci_low,ci_high"
    fields = line.split(",")
    assert fields[:3] == ["0.01", "4096", "sidak"]
    assert float(fields[3]) == st.fwer_threshold(st.FwerSpec(0.01, 4096, "sidak"))
    assert float(fields[3]) == pytest.approx(12.917916620343311, rel=1e-12)
    assert float(fields[5]) <= float(fields[4]) <= float(fields[6])


def test_fwer_reproducible(capsys):
    argv = ("fwer", "--n", 256, "--alpha", 0.2, "--trials", 1000, "--seed", 4)
    assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


def test_gradcheck_subcommand(capsys):
    code, out, _ = run(capsys, "gradcheck", "--only", "relu", "conv3x3")
    assert code == 0 and out.count("PASS") == 2
    code, out, _ = run(capsys, "gradcheck", "--only", "relu", "--tol", "0")
    assert code == 1 and "FAIL" in out
