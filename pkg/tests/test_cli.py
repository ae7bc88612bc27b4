import json

import numpy as np
import pytest

from qdistill import autodiff as ad
from qdistill import data as io
from qdistill.cli import build_parser, main, resolve_config


@pytest.fixture(scope="module")
def mnist_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)
    for split, n in (("train", 64), ("t10k", 40)):
        io.write_idx(d / f"{split}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28)))
        io.write_idx(d / f"{split}-labels-idx1-ubyte", rng.integers(0, 10, n))
    return d


def distill_args(mnist_dir, out, *extra):
    return [
        "distill", "--data-dir", str(mnist_dir), "--out-dir", str(out), "--variant", "q-r-h",
        "--batch-size", "32", "--epochs", "1", "--optimizer", "adam", "--alpha", "0.05", *extra,
    ]


def test_defaults_per_dataset():
    p = build_parser()
    mn = resolve_config(p.parse_args(["distill"]))
    assert (mn.n_synthetic, mn.inner_steps, mn.epochs) == (10, 1, 3)
    cf = resolve_config(p.parse_args(["distill", "--dataset", "cifar10"]))
    assert (cf.n_synthetic, cf.inner_steps, cf.epochs) == (100, 10, 3)


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 4, "alpha": 0.5, "variant": "q-nr-h"}))
    rc = resolve_config(build_parser().parse_args(["distill", "--config", str(cfg), "--seed", "9"]))
    assert rc.seed == 9 and rc.alpha == 0.5 and rc.variant == "q-nr-h"


def test_invalid_combination_fails_before_compute(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"variant": "classical", "residual": True}))
    out = tmp_path / "out"
    assert main(["distill", "--config", str(cfg), "--data-dir", str(tmp_path), "--out-dir", str(out)]) != 0
    assert "quantum variant" in capsys.readouterr().err
    assert not out.exists()


def test_missing_data_leaves_no_files(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["distill", "--data-dir", str(tmp_path / "nope"), "--out-dir", str(out)]) != 0
    assert "does not exist" in capsys.readouterr().err
    assert not out.exists()


def test_distill_eval_cycle(mnist_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(distill_args(mnist_dir, out)) == 0
    capsys.readouterr()
    assert (out / "distilled.qdd").exists() and not (out / "distilled.qdd.partial").exists()
    assert len(list((out / "images").glob("class*_idx*.pgm"))) == 10
    assert (out / "images" / "sheet.pgm").exists()

    records = io.read_metrics(out / "metrics.log")
    assert len(records) == 2 + 1
    assert records[0]["eta"] == 0.01
    assert all(np.isfinite(r["loss"]) for r in records[:-1])
    summary = records[-1]
    assert summary["event"] == "summary"
    assert json.loads(summary["config"])["variant"] == "q-r-h"

    assert main(["eval", "--data-dir", str(mnist_dir), "--distilled", str(out / "distilled.qdd"), "--out-dir", str(out)]) == 0
    assert f"accuracy {summary['accuracy']:.4f}" in capsys.readouterr().out
    report = (out / "eval.log").read_text()
    assert f"accuracy={summary['accuracy']!r}" in report


def test_distill_is_byte_deterministic(mnist_dir, tmp_path):
    for name in ("a", "b"):
        assert main(distill_args(mnist_dir, tmp_path / name, "--seed", "3")) == 0
    assert (tmp_path / "a" / "distilled.qdd").read_bytes() == (tmp_path / "b" / "distilled.qdd").read_bytes()


def test_eval_refuses_mismatch(mnist_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(distill_args(mnist_dir, out, "--seed", "1")) == 0
    qdd = str(out / "distilled.qdd")
    assert main(["eval", "--data-dir", str(mnist_dir), "--distilled", qdd, "--seed", "2"]) != 0
    assert "seed" in capsys.readouterr().err
    assert main(["eval", "--data-dir", str(mnist_dir), "--distilled", qdd, "--seed", "1", "--variant", "q-nr-h"]) != 0
    assert "variant" in capsys.readouterr().err


def test_eval_bad_magic(mnist_dir, tmp_path, capsys):
    bad = tmp_path / "bad.qdd"
    bad.write_bytes(b"JUNK" + bytes(64))
    assert main(["eval", "--data-dir", str(mnist_dir), "--distilled", str(bad)]) != 0
    assert "bad QDD1 header" in capsys.readouterr().err


def test_export_images_command(mnist_dir, tmp_path):
    out = tmp_path / "run"
    assert main(distill_args(mnist_dir, out)) == 0
    assert main(["export-images", "--distilled", str(out / "distilled.qdd"), "--out-dir", str(tmp_path / "img")]) == 0
    for p in (out / "images").iterdir():
        assert (tmp_path / "img" / p.name).read_bytes() == p.read_bytes()


def test_train_baseline_smoke(mnist_dir, tmp_path, capsys):
    out = tmp_path / "base"
    assert main(["train-baseline", "--variant", "classical", "--data-dir", str(mnist_dir), "--out-dir", str(out), "--epochs", "1"]) == 0
    rec = io.read_metrics(out / "baseline.log")[-1]
    assert np.isfinite(rec["final_loss"]) and 0 <= rec["accuracy"] <= 1


def test_gradcheck_reports_broken_rule(monkeypatch, capsys):
    monkeypatch.setattr(ad.Exp, "backward", lambda self, g, needs: [g])
    assert main(["gradcheck", "--trials", "1", "--skip-lenet"]) != 0
    captured = capsys.readouterr()
    assert "FAIL primitive:exp" in captured.out
    assert "max_rel_error=" in captured.out
    assert "primitive:exp" in captured.err
