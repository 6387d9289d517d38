"""Command line behavior: exit codes, file outputs, determinism."""

import json
import subprocess
import sys

import numpy as np
import pytest

import hetxl as hx
from hetxl import cli, io
from hetxl.verify import CheckResult


def write_cfg(path, **sections):
    doc = {"schema_version": 1, "output_dir": str(path.parent / "out")}
    doc.update(sections)
    p = path
    p.write_text(json.dumps(doc, indent=2))
    return str(p)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    """One shared small dataset directory for train/predict/grid tests."""
    root = tmp_path_factory.mktemp("data")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "schema_version": 1,
        "output_dir": str(root),
        "dims": {"D": 6, "K": 8, "R": 2},
        "datagen": {"n_examples": 400, "seed": 1},
    }))
    assert cli.main(["--quiet", "datagen", str(cfg)]) == 0
    return root / "dataset.hxlm"


def _train_cfg(tmp_path, dataset=None, **train):
    out = tmp_path / "out"
    doc = {
        "schema_version": 1,
        "output_dir": str(out),
        "train": {"steps": 20, "batch_size": 32, "learning_rate": 0.05,
                  "variant": "pre_logit", "rank": 2, "seed": 3, **train},
    }
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps(doc))
    return str(cfg), out


# --------------------------------------------------------------- exit codes


def test_missing_required_key_names_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema_version": 1, "output_dir": "o",
                               "dims": {"K": 40}}))
    assert cli.main(["datagen", str(cfg)]) == 2
    assert "dims.D" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", typo_section={"a": 1})
    assert cli.main(["datagen", cfg]) == 2
    assert "typo_section" in capsys.readouterr().err


def test_unparseable_or_missing_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["datagen", str(bad)]) == 2
    assert cli.main(["datagen", str(tmp_path / "absent.json")]) == 2


def test_missing_dataset_is_exit_3(tmp_path, capsys):
    cfg, _ = _train_cfg(tmp_path)
    assert cli.main(["--quiet", "train", cfg]) == 3
    assert "not found" in capsys.readouterr().err


def test_shape_mismatch_is_exit_3(tmp_path, small_data, capsys):
    g = np.random.default_rng(80)
    head = hx.Head(W=g.standard_normal((4, 8)), b=np.zeros(8), spec=None,
                   temperature=hx.Temperature.from_tau(1.0))
    model = tmp_path / "model.hxlm"
    io.save_head(model, head)
    cfg = write_cfg(tmp_path / "c.json", train={"variant": "det"})
    rc = cli.main(["--quiet", "predict", cfg, "--model", str(model),
                   "--dataset", str(small_data)])
    assert rc == 3
    err = capsys.readouterr().err
    assert "6" in err and "4" in err  # names both dimensions


def test_divergence_aborts_with_step(tmp_path, small_data, capsys):
    cfg, _ = _train_cfg(tmp_path, learning_rate=1e300, steps=10)
    with np.errstate(all="ignore"):
        rc = cli.main(["--quiet", "train", cfg, "--dataset", str(small_data)])
    assert rc == 1
    assert "step" in capsys.readouterr().err


# ------------------------------------------------------------------ datagen


def test_datagen_default_writes_20000(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    assert cli.main(["datagen", cfg]) == 0
    assert "20000" in capsys.readouterr().out
    ds = io.load_dataset(tmp_path / "out" / "dataset.hxlm")
    assert ds.X.shape == (20000, 16) and ds.y.shape == (20000, 40)


def test_datagen_reruns_are_byte_identical(tmp_path):
    paths = []
    for name in ("a", "b"):
        sub = tmp_path / name
        sub.mkdir()
        cfg = sub / "c.json"
        cfg.write_text(json.dumps({
            "schema_version": 1, "output_dir": str(sub / "out"),
            "dims": {"D": 5, "K": 7}, "datagen": {"n_examples": 50, "seed": 2},
        }))
        assert cli.main(["--quiet", "datagen", str(cfg)]) == 0
        paths.append(sub / "out" / "dataset.hxlm")
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert (paths[0].parent / "dataset.hxlm.json").read_bytes() == \
           (paths[1].parent / "dataset.hxlm.json").read_bytes()


# -------------------------------------------------------------------- train


def _read_csv_cols(path):
    lines = path.read_text().strip().split("\n")
    header = lines[0].split(",")
    cols = {h: [] for h in header}
    for line in lines[1:]:
        for h, v in zip(header, line.split(",")):
            cols[h].append(v)
    return cols


def test_train_outputs_and_fixed_tau(tmp_path, small_data):
    cfg, out = _train_cfg(tmp_path, tau_mode="fixed", tau=1.0)
    assert cli.main(["--quiet", "train", cfg, "--dataset", str(small_data)]) == 0
    cols = _read_csv_cols(out / "metrics.csv")
    assert set(cols) == {"step", "nll", "prec_at_1", "tau", "ms"}
    assert all(float(t) == 1.0 for t in cols["tau"])
    final = json.loads((out / "final.json").read_text())
    assert set(final) == {"nll", "prec_at_1", "tau"}
    assert final["tau"] == 1.0
    head = io.load_head(out / "model.hxlm")
    assert head.W.shape == (6, 8)


def test_train_learned_tau_moves_within_bounds(tmp_path, small_data):
    cfg, out = _train_cfg(tmp_path, tau_mode="learned", steps=30,
                          learning_rate=0.1)
    assert cli.main(["--quiet", "train", cfg, "--dataset", str(small_data)]) == 0
    taus = [float(t) for t in _read_csv_cols(out / "metrics.csv")["tau"]]
    assert len(set(taus)) > 1
    assert all(0.05 < t < 5.0 for t in taus)


def test_train_rerun_identical_outside_wall_time(tmp_path, small_data):
    outs = []
    for name in ("a", "b"):
        sub = tmp_path / name
        sub.mkdir()
        cfg, out = _train_cfg(sub, tau_mode="fixed", tau=0.8)
        assert cli.main(["--quiet", "train", cfg, "--dataset", str(small_data)]) == 0
        outs.append(out)
    assert (outs[0] / "model.hxlm").read_bytes() == (outs[1] / "model.hxlm").read_bytes()
    assert (outs[0] / "final.json").read_bytes() == (outs[1] / "final.json").read_bytes()
    a = _read_csv_cols(outs[0] / "metrics.csv")
    b = _read_csv_cols(outs[1] / "metrics.csv")
    for col in ("step", "nll", "prec_at_1", "tau"):
        assert a[col] == b[col], col
    # ms is wall clock and legitimately differs between runs


# ------------------------------------------------------------------ predict


def test_predict_writes_probs_and_summary(tmp_path, small_data):
    cfg, out = _train_cfg(tmp_path, tau_mode="fixed", tau=1.0, steps=5)
    assert cli.main(["--quiet", "train", cfg, "--dataset", str(small_data)]) == 0
    rc = cli.main(["--quiet", "predict", cfg, "--model", str(out / "model.hxlm"),
                   "--dataset", str(small_data)])
    assert rc == 0
    probs = io.read_tensors(out / "probs.hxlm")["probs"]
    assert probs.shape == (400, 8)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    summary = json.loads((out / "probs.hxlm.json").read_text())
    assert summary["n_examples"] == 400
    assert summary["estimator"].startswith(hx.MEAN_FIELD)
    assert summary["nll"] > 0


def test_predict_thread_count_does_not_change_bytes(tmp_path, small_data):
    cfg, out = _train_cfg(tmp_path, tau_mode="fixed", tau=1.0, steps=5,
                          estimator="mc", s_eval=64)
    assert cli.main(["--quiet", "train", cfg, "--dataset", str(small_data)]) == 0
    blobs = []
    for threads, name in [(1, "p1"), (3, "p3")]:
        dest = tmp_path / f"{name}.hxlm"
        rc = cli.main(["--quiet", "--threads", str(threads), "predict", cfg,
                       "--model", str(out / "model.hxlm"),
                       "--dataset", str(small_data), "--out", str(dest)])
        assert rc == 0
        blobs.append(dest.read_bytes())
    assert blobs[0] == blobs[1]


def test_threads_env_and_validation(tmp_path, small_data, monkeypatch, capsys):
    cfg, out = _train_cfg(tmp_path, tau_mode="fixed", tau=1.0, steps=5)
    assert cli.main(["--quiet", "train", cfg, "--dataset", str(small_data)]) == 0
    args = ["--quiet", "predict", cfg, "--model", str(out / "model.hxlm"),
            "--dataset", str(small_data)]
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    assert cli.main(args) == 0
    monkeypatch.setenv(cli.THREADS_ENV, "abc")
    assert cli.main(args) == 2
    assert cli.THREADS_ENV in capsys.readouterr().err
    monkeypatch.delenv(cli.THREADS_ENV)
    assert cli.main(["--threads", "0", *args]) == 2


# ----------------------------------------------------------- grid and bench


def test_grid_tau_outputs(tmp_path, small_data, capsys):
    cfg, out = _train_cfg(tmp_path, tau_grid=[0.5, 1.5], steps=10)
    assert cli.main(["grid-tau", cfg, "--dataset", str(small_data)]) == 0
    assert "best tau" in capsys.readouterr().out
    lines = (out / "grid_tau.csv").read_text().strip().split("\n")
    assert lines[0] == "tau,val_nll,val_prec_at_1"
    assert len(lines) == 3
    doc = json.loads((out / "grid_tau.json").read_text())
    assert doc["best_tau"] in (0.5, 1.5)
    assert len(doc["points"]) == 2


def test_bench_single_sample_count(tmp_path):
    out = tmp_path / "out"
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "schema_version": 1, "output_dir": str(out),
        "dims": {"D": 32, "K": 64, "R": 2},
        "bench": {"S_list": [1], "batch": 4, "reps": 5},
    }))
    assert cli.main(["--quiet", "bench", str(cfg)]) == 0
    lines = (out / "bench.csv").read_text().strip().split("\n")
    assert lines[0] == "variant,S,batch,ms_per_example,analytic_terms"
    assert len(lines) == 3  # one row per default variant
    doc = json.loads((out / "bench.json").read_text())
    assert {r["variant"] for r in doc["rows"]} == {hx.LOGIT_SPACE, hx.PRE_LOGIT_SPACE}


def test_bench_rejects_zero_samples(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", dims={"D": 8, "K": 16},
                    bench={"S_list": [0]})
    assert cli.main(["bench", cfg]) == 2
    assert "S_list" in capsys.readouterr().err


# ------------------------------------------------------------------- verify


def test_verify_fast_prints_param_counts(capsys):
    assert cli.main(["verify", "--level", "fast"]) == 0
    out = capsys.readouterr().out
    assert "8,491,008" in out and "90,561,078" in out
    lines = [l for l in out.strip().split("\n") if l.startswith(("PASS", "FAIL"))]
    assert len(lines) == 9
    assert all(l.startswith("PASS") for l in lines)


def test_verify_failure_is_exit_4(monkeypatch, capsys):
    monkeypatch.setattr(
        "hetxl.verify.run_checks",
        lambda level: [CheckResult("stub check", False, 1.0, 0.5)],
    )
    assert cli.main(["verify"]) == 4
    out = capsys.readouterr().out
    assert "FAIL stub check" in out


# ------------------------------------------------------------ entry points


def test_console_script_and_module_help():
    for argv in ([sys.executable, "-m", "hetxl.cli", "--help"], ["hetxl", "--help"]):
        res = subprocess.run(argv, capture_output=True, text=True)
        assert res.returncode == 0
        for word in ("datagen", "train", "predict", "grid-tau", "bench", "verify"):
            assert word in res.stdout
