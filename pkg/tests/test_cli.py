from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from auxstep import cli
from auxstep.data_io import load_manifest, read_tensor
from auxstep.evaluate import load_report, read_ppm


def _run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def _write_config(path: Path, **fields) -> Path:
    path.write_text(json.dumps(fields))
    return path


def _baseline_fields(world, run_dir: Path, steps: int = 3) -> dict:
    return {"mode": "baseline", "total_steps": steps, "batch_size_depth": 2,
            "seed": 0, "depth_manifest": str(world["train"]),
            "test_manifest": str(world["test"]), "run_dir": str(run_dir)}


@pytest.fixture(scope="module")
def trained(world, tmp_path_factory):
    """A tiny baseline run trained through the CLI, reused by eval/plot tests."""
    base = tmp_path_factory.mktemp("cli-train")
    run_dir = base / "run"
    config = _write_config(base / "train.json", **_baseline_fields(world, run_dir))
    assert cli.main(["train", "--config", str(config)]) == 0
    return {"config": config, "run_dir": run_dir}


@pytest.fixture(scope="module")
def evaluated(world, trained, tmp_path_factory):
    """An eval over the trained run, with extras and dumped error maps."""
    out = tmp_path_factory.mktemp("cli-eval") / "ev"
    assert cli.main(["eval", "--run", str(trained["run_dir"]),
                     "--test-manifest", str(world["test"]), "--out", str(out),
                     "--extras", "--dump-error-maps"]) == 0
    return out


# ---------------------------------------------------------------------------
# parser-level behaviour

def test_help_exits_zero(capsys):
    code, out, _ = _run(capsys, "--help")
    assert code == 0
    assert "gen-data" in out and "sweep-alpha" in out


def test_missing_subcommand_is_a_usage_error(capsys):
    code, _, err = _run(capsys)
    assert code == 1
    assert err.startswith("error:")


def test_unknown_flag_is_a_usage_error(capsys, tmp_path):
    code, _, err = _run(capsys, "gen-data", "--out", str(tmp_path / "d"), "--bogus")
    assert code == 1
    assert err.startswith("error:")


# ---------------------------------------------------------------------------
# gen-data

def test_gen_data_writes_manifests_and_prints_them(capsys, tmp_path):
    out = tmp_path / "data"
    code, stdout, _ = _run(capsys, "gen-data", "--out", str(out), "--scenes", "4",
                           "--height", "32", "--width", "32", "--classes", "5",
                           "--seed", "7")
    assert code == 0
    for part in ("all", "train", "test"):
        assert (out / f"manifest_{part}.json").exists()
        assert f"{part}: " in stdout
    spec_doc = json.loads((out / "scene_spec.json").read_text())
    assert spec_doc["seed"] == 7
    assert spec_doc["spec"]["num_classes"] == 5
    assert len(load_manifest(out / "manifest_train.json")) == 3


def test_gen_data_refuses_occupied_directory_without_force(capsys, tmp_path):
    out = tmp_path / "data"
    args = ("gen-data", "--out", str(out), "--scenes", "4",
            "--height", "32", "--width", "32", "--seed", "0")
    assert _run(capsys, *args)[0] == 0
    code, _, err = _run(capsys, *args)
    assert code == 1 and "--force" in err
    assert _run(capsys, *args, "--force")[0] == 0


def test_gen_data_validates_before_writing_anything(capsys, tmp_path):
    out = tmp_path / "data"
    code, _, err = _run(capsys, "gen-data", "--out", str(out), "--scenes", "1")
    assert code == 1 and "--scenes" in err
    code, _, err = _run(capsys, "gen-data", "--out", str(out), "--scenes", "4",
                        "--train-fraction", "0.999")
    assert code == 1 and "--train-fraction" in err
    assert not out.exists()


def test_gen_data_invalid_fraction_flag_reaches_the_spec(capsys, tmp_path):
    out = tmp_path / "data"
    code, _, _ = _run(capsys, "gen-data", "--out", str(out), "--scenes", "4",
                      "--height", "32", "--width", "32", "--invalid-frac", "0.3",
                      "--seed", "0")
    assert code == 0
    spec = json.loads((out / "scene_spec.json").read_text())["spec"]
    assert spec["invalid_max"] == 0.3
    assert spec["invalid_min"] == 0.02


def test_gen_data_benchmark_preset(capsys, tmp_path):
    out = tmp_path / "bench"
    code, _, _ = _run(capsys, "gen-data", "--out", str(out), "--scenes", "4",
                      "--height", "32", "--width", "32",
                      "--preset", "benchmark", "--seed", "0")
    assert code == 0
    spec = json.loads((out / "scene_spec.json").read_text())["spec"]
    assert spec["invalid_max"] == 0.92
    assert spec["prior_shuffle_seed"] is not None
    assert spec["num_classes"] == 24  # the preset's own default, not gen-data's
    assert spec["height"] == 32

    code, _, err = _run(capsys, "gen-data", "--out", str(tmp_path / "x"),
                        "--scenes", "4", "--preset", "benchmark",
                        "--invalid-frac", "0.3")
    assert code == 1 and "--preset" in err


def test_gen_data_seed_falls_back_to_the_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("AUXSTEP_SEED", "5")
    out = tmp_path / "data"
    code, _, _ = _run(capsys, "gen-data", "--out", str(out), "--scenes", "4",
                      "--height", "32", "--width", "32")
    assert code == 0
    assert json.loads((out / "scene_spec.json").read_text())["seed"] == 5


def test_gen_data_rejects_a_malformed_seed_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("AUXSTEP_SEED", "five")
    code, _, err = _run(capsys, "gen-data", "--out", str(tmp_path / "d"),
                        "--scenes", "4", "--height", "32", "--width", "32")
    assert code == 1 and "AUXSTEP_SEED" in err


# ---------------------------------------------------------------------------
# train

def test_train_runs_and_reports_paths(capsys, world, tmp_path):
    run_dir = tmp_path / "run"
    config = _write_config(tmp_path / "c.json", **_baseline_fields(world, run_dir, steps=2))
    code, stdout, _ = _run(capsys, "train", "--config", str(config))
    assert code == 0
    assert (run_dir / "log.csv").exists()
    assert (run_dir / "report.json").exists()
    assert "run: " in stdout and "test absrel: " in stdout


def test_train_resolves_run_dir_relative_to_the_config(capsys, world, tmp_path):
    fields = _baseline_fields(world, Path("runs/here"), steps=1)
    fields["run_dir"] = "runs/here"
    fields.pop("test_manifest")
    config = _write_config(tmp_path / "c.json", **fields)
    code, _, _ = _run(capsys, "train", "--config", str(config))
    assert code == 0
    assert (tmp_path / "runs" / "here" / "log.csv").exists()


def test_train_refuses_an_existing_run_without_force(capsys, world, tmp_path):
    config = _write_config(tmp_path / "c.json",
                           **_baseline_fields(world, tmp_path / "run", steps=1))
    assert _run(capsys, "train", "--config", str(config))[0] == 0
    code, _, err = _run(capsys, "train", "--config", str(config))
    assert code == 1 and "--force" in err
    assert _run(capsys, "train", "--config", str(config), "--force")[0] == 0


def test_train_resume_of_a_finished_run_is_a_no_op(capsys, world, tmp_path):
    config = _write_config(tmp_path / "c.json",
                           **_baseline_fields(world, tmp_path / "run", steps=2))
    assert _run(capsys, "train", "--config", str(config))[0] == 0
    code, stdout, _ = _run(capsys, "train", "--config", str(config), "--resume")
    assert code == 0
    assert "steps: 2" in stdout


def test_train_seed_falls_back_to_the_environment(capsys, world, tmp_path, monkeypatch):
    monkeypatch.setenv("AUXSTEP_SEED", "3")
    fields = _baseline_fields(world, tmp_path / "run", steps=1)
    del fields["seed"], fields["test_manifest"]
    config = _write_config(tmp_path / "c.json", **fields)
    assert _run(capsys, "train", "--config", str(config))[0] == 0
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["seed"] == 3


@pytest.mark.parametrize("mangle, fragment", [
    (lambda f: f.update(alphas=[0.1, 0.2]), "sweep"),
    (lambda f: f.update(learning_rate=0.1), "unknown config keys"),
    (lambda f: f.pop("run_dir"), "run_dir"),
    (lambda f: f.update(mode="sideways"), "mode"),
])
def test_train_rejects_bad_config_documents(capsys, world, tmp_path, mangle, fragment):
    fields = _baseline_fields(world, tmp_path / "run", steps=1)
    mangle(fields)
    config = _write_config(tmp_path / "c.json", **fields)
    code, _, err = _run(capsys, "train", "--config", str(config))
    assert code == 1 and fragment in err


def test_train_rejects_missing_or_malformed_config_files(capsys, tmp_path):
    code, _, err = _run(capsys, "train", "--config", str(tmp_path / "nope.json"))
    assert code == 1 and "not found" in err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = _run(capsys, "train", "--config", str(bad))
    assert code == 1 and "JSON" in err
    listdoc = tmp_path / "list.json"
    listdoc.write_text("[1, 2]")
    code, _, err = _run(capsys, "train", "--config", str(listdoc))
    assert code == 1 and "object" in err


# ---------------------------------------------------------------------------
# eval

def test_eval_writes_a_report_and_prints_absrel(capsys, world, trained, tmp_path):
    out = tmp_path / "ev"
    code, stdout, _ = _run(capsys, "eval", "--run", str(trained["run_dir"]),
                           "--test-manifest", str(world["test"]), "--out", str(out))
    assert code == 0
    assert "absrel: " in stdout
    report = load_report(out / "report.json")
    assert report.n_images == len(load_manifest(world["test"]))
    assert report.extras == {}


def test_eval_extras_and_error_maps(world, evaluated):
    report = load_report(evaluated / "report.json")
    assert {"rmse", "delta1", "delta2", "delta3"} <= set(report.extras)
    test_ids = [s.id for s in load_manifest(world["test"]).samples]
    for sid in test_ids:
        emap = read_tensor(evaluated / "error_maps" / f"{sid}.errmap.dten")
        valid = read_tensor(evaluated / "error_maps" / f"{sid}.validmask.dten")
        assert emap.shape == valid.shape == (32, 32)
        assert emap.dtype == np.float32
        assert (emap[valid == 0] == 0).all()


def test_eval_accepts_a_checkpoint_file_directly(capsys, world, trained, tmp_path):
    ckpts = sorted(trained["run_dir"].glob("ckpt_*.dbnd"))
    code, _, _ = _run(capsys, "eval", "--run", str(ckpts[-1]),
                      "--test-manifest", str(world["test"]),
                      "--out", str(tmp_path / "ev"))
    assert code == 0


def test_eval_refuses_an_occupied_out_dir(capsys, world, trained, evaluated):
    code, _, err = _run(capsys, "eval", "--run", str(trained["run_dir"]),
                        "--test-manifest", str(world["test"]),
                        "--out", str(evaluated))
    assert code == 1 and "--force" in err


def test_eval_requires_a_checkpoint(capsys, world, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    code, _, err = _run(capsys, "eval", "--run", str(empty),
                        "--test-manifest", str(world["test"]),
                        "--out", str(tmp_path / "ev"))
    assert code == 1 and "checkpoint" in err


# ---------------------------------------------------------------------------
# mldc-export

def test_mldc_export_writes_presence_vectors(capsys, world, tmp_path):
    out = tmp_path / "mldc"
    code, stdout, _ = _run(capsys, "mldc-export", "--seg-manifest",
                           str(world["train"]), "--out", str(out))
    assert code == 0 and "manifest: " in stdout
    doc = json.loads((out / "mldc_manifest.json").read_text())
    train = load_manifest(world["train"])
    assert [r["id"] for r in doc["samples"]] == [s.id for s in train.samples]
    first = doc["samples"][0]
    vec = read_tensor(out / first["presence"])
    assert vec.shape == (train.num_classes,)
    assert set(np.unique(vec)) <= {0.0, 1.0}

    code, _, err = _run(capsys, "mldc-export", "--seg-manifest",
                        str(world["train"]), "--out", str(out))
    assert code == 1 and "--force" in err


# ---------------------------------------------------------------------------
# sweep-alpha / data-efficiency

def test_sweep_alpha_emits_table_json_and_plot(capsys, world, tmp_path):
    out = tmp_path / "sweep"
    code, _, _ = _run(capsys, "sweep-alpha",
                      "--depth-manifest", str(world["train"]),
                      "--test-manifest", str(world["test"]),
                      "--alphas", "0", "1", "--seeds", "0", "1",
                      "--steps", "2", "--batch-depth", "2", "--batch-aux", "2",
                      "--out", str(out))
    assert code == 0
    rows = (out / "results.csv").read_text().strip().splitlines()
    assert rows[0] == "alpha,task,mean_absrel,stderr_absrel,n_seeds"
    assert len(rows) == 4
    assert rows[1].startswith("baseline,none,")
    assert rows[2].startswith("0.0,mldc,") and rows[3].startswith("1.0,mldc,")
    doc = json.loads((out / "results.json").read_text())
    assert doc["baseline"]["n_seeds"] == 2
    assert (out / "sweep_alpha.svg").read_text().lstrip().startswith("<")
    assert (out / "alpha_1" / "seed1" / "report.json").exists()


@pytest.mark.parametrize("extra, fragment", [
    (("--alphas", "1.5"), "alphas"),
    (("--task", "sorting"), "task"),
    (("--seeds", "0"), "seed"),
])
def test_sweep_alpha_rejects_bad_arguments(capsys, world, tmp_path, extra, fragment):
    code, _, err = _run(capsys, "sweep-alpha",
                        "--depth-manifest", str(world["train"]),
                        "--test-manifest", str(world["test"]),
                        "--steps", "1", "--out", str(tmp_path / "s"), *extra)
    assert code == 1 and fragment in err


def test_data_efficiency_emits_table_and_plot(capsys, world, tmp_path):
    out = tmp_path / "eff"
    code, _, _ = _run(capsys, "data-efficiency",
                      "--depth-manifest", str(world["train"]),
                      "--test-manifest", str(world["test"]),
                      "--fractions", "0.5", "1", "--seeds", "0", "1",
                      "--steps", "2", "--batch-depth", "2", "--batch-aux", "2",
                      "--out", str(out))
    assert code == 0
    rows = (out / "results.csv").read_text().strip().splitlines()
    assert rows[0] == "fraction,mode,mean_absrel,stderr_absrel,n_seeds"
    assert len(rows) == 5
    assert {r.split(",")[1] for r in rows[1:]} == {"baseline", "joint"}
    assert (out / "data_efficiency.svg").exists()
    assert (out / "frac_0.5" / "joint" / "seed0" / "report.json").exists()


def test_data_efficiency_rejects_bad_fractions(capsys, world, tmp_path):
    code, _, err = _run(capsys, "data-efficiency",
                        "--depth-manifest", str(world["train"]),
                        "--test-manifest", str(world["test"]),
                        "--fractions", "0", "--out", str(tmp_path / "e"))
    assert code == 1 and "fractions" in err


# ---------------------------------------------------------------------------
# plot

def test_plot_reports_draws_an_svg(capsys, evaluated, tmp_path):
    out = tmp_path / "curve.svg"
    code, stdout, _ = _run(capsys, "plot", "--report",
                           str(evaluated / "report.json"), "--out", str(out))
    assert code == 0 and "plot: " in stdout
    assert "<svg" in out.read_text()


def test_plot_diff_renders_a_ppm_raster(capsys, world, evaluated, tmp_path):
    sid = load_manifest(world["test"]).samples[0].id
    out = tmp_path / "diff.ppm"
    code, stdout, _ = _run(capsys, "plot", "--diff",
                           str(evaluated / "error_maps"),
                           str(evaluated / "error_maps"),
                           "--id", sid, "--out", str(out))
    assert code == 0 and "raster: " in stdout
    raster = read_ppm(out)
    assert raster.shape == (32, 32, 3)
    assert (raster == 0).all()  # identical runs diff to an all-black raster


def test_plot_diff_requires_an_id(capsys, evaluated, tmp_path):
    code, _, err = _run(capsys, "plot", "--diff", str(evaluated), str(evaluated),
                        "--out", str(tmp_path / "d.ppm"))
    assert code == 1 and "--id" in err


def test_plot_with_no_inputs_is_an_error(capsys, tmp_path):
    code, _, err = _run(capsys, "plot", "--out", str(tmp_path / "x.svg"))
    assert code == 1 and "nothing to plot" in err
