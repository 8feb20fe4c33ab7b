from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import pytest

from auxstep import autodiff as ad
from auxstep import trainer as tr
from auxstep.data_io import read_bundle, write_bundle
from auxstep.evaluate import evaluate_model, load_report
from auxstep.data_io import Dataset, load_manifest
from auxstep.model import FrozenEncoder, Model, build_head_specs
from auxstep.optim import PlainGradient


def _config(world, mode="baseline", steps=4, **kw):
    defaults = dict(mode=mode, total_steps=steps, batch_size_depth=2,
                    batch_size_aux=2, seed=0, depth_manifest=world["train"])
    if mode in ("joint", "beta_ablation"):
        defaults["aux_manifests"] = (world["train"],)
    defaults.update(kw)
    return tr.TrainConfig(**defaults)


def _model_tensors(ckpt):
    _, tensors = read_bundle(ckpt)
    return {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}


def _log_rows(run_dir):
    lines = (run_dir / "log.csv").read_text().strip().splitlines()
    assert lines[0] == "step,phase,loss,decoder_lr,head_lr"
    rows = []
    for line in lines[1:]:
        step, phase, loss, dec_lr, head_lr = line.split(",")
        rows.append((int(step), phase, float(loss), float(dec_lr), float(head_lr)))
    return rows


# ---------------------------------------------------------------------------
# config validation

def test_config_joint_defaults_alpha(world):
    cfg = _config(world, "joint")
    assert cfg.alpha == 0.9
    assert cfg.is_joint


@pytest.mark.parametrize("kw", [
    dict(mode="sgd_party"),
    dict(mode="joint", alpha=1.5),
    dict(mode="baseline", alpha=0.5),
    dict(mode="baseline", beta=0.5),
    dict(mode="beta_ablation"),
    dict(mode="gamma_ablation"),
    dict(mode="joint", aux_task="edges"),
    dict(total_steps=-1),
    dict(batch_size_depth=0),
    dict(warmup_fraction=1.0),
    dict(depth_fraction=0.0),
    dict(depth_fraction=1.2),
    dict(depth_loss_kind="l2"),
])
def test_config_rejects_inconsistent_settings(world, kw):
    with pytest.raises(ValueError):
        _config(world, **kw)


def test_config_requires_depth_manifest(world):
    with pytest.raises(ValueError):
        tr.TrainConfig(mode="baseline")
    with pytest.raises(ValueError):
        _config(world, "joint", aux_manifests=())


def test_config_json_round_trip(world):
    cfg = _config(world, "joint", alpha=0.25, aux_manifests=(world["train"], world["all"]))
    back = tr.TrainConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg


def test_warmup_steps_round_up(world):
    assert _config(world, steps=10).warmup_steps == 4
    assert _config(world, steps=38400).warmup_steps == 12800


# ---------------------------------------------------------------------------
# single steps on a toy parameter

def test_joint_step_two_phase_closed_form(world):
    cfg = _config(world, "joint", steps=4, alpha=0.25)
    plan = cfg.lr_plan()
    w = ad.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    params = {"w": w}
    groups = {"w": "decoder"}
    opt = PlainGradient(params, groups)

    def loss_depth():  # 0.5 * sum(w^2): gradient w
        return ad.mul_scalar(ad.sum_axes(ad.mul(w, w), (0,)), 0.5)

    def loss_aux():  # sum(w): gradient of ones
        return ad.sum_axes(w, (0,))

    t = 2
    s = cfg.schedule().multiplier(t)
    eta = cfg.base_lr
    w0 = w.data.copy()
    w1 = w0 - 0.25 * eta * s * w0                      # depth phase at w0
    w2 = w1 - 0.75 * eta * s * np.ones(3)              # aux phase at w1
    tr.joint_step(list(params.values()), plan, opt, opt, t, loss_depth, loss_aux)
    np.testing.assert_allclose(w.data, w2, rtol=0, atol=1e-15)
    assert w.grad is None  # steps clean up after themselves


# ---------------------------------------------------------------------------
# training runs

def test_zero_steps_keeps_initialization(world, tmp_path):
    cfg = _config(world, steps=0)
    result = tr.train(cfg, tmp_path / "run")
    fresh = Model(cfg.encoder_seed, cfg.seed, build_head_specs(None))
    saved = _model_tensors(result.final_checkpoint)
    assert set(saved) == set(fresh.params)
    for name, arr in saved.items():
        assert arr.tobytes() == fresh.params[name].data.tobytes()


def test_same_seed_runs_are_bit_identical(world, tmp_path):
    cfg = _config(world, "joint", steps=4)
    a = tr.train(cfg, tmp_path / "a")
    b = tr.train(cfg, tmp_path / "b")
    assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()
    assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()


def test_seed_changes_the_trajectory(world, tmp_path):
    a = tr.train(_config(world, steps=4, seed=0), tmp_path / "a")
    b = tr.train(_config(world, steps=4, seed=1), tmp_path / "b")
    ta, tb = _model_tensors(a.final_checkpoint), _model_tensors(b.final_checkpoint)
    assert any(ta[n].tobytes() != tb[n].tobytes() for n in ta)


def test_gamma_one_matches_baseline_exactly(world, tmp_path):
    base = tr.train(_config(world, steps=5), tmp_path / "base")
    gamma = tr.train(_config(world, "gamma_ablation", steps=5, gamma=1.0), tmp_path / "g1")
    tb, tg = _model_tensors(base.final_checkpoint), _model_tensors(gamma.final_checkpoint)
    assert set(tb) == set(tg)
    for name in tb:
        assert tb[name].tobytes() == tg[name].tobytes()


def test_alpha_one_reduces_to_baseline_on_shared_parameters(world, tmp_path):
    base = tr.train(_config(world, steps=6), tmp_path / "base")
    joint = tr.train(_config(world, "joint", steps=6, alpha=1.0), tmp_path / "joint")
    tb, tj = _model_tensors(base.final_checkpoint), _model_tensors(joint.final_checkpoint)
    for name in tb:  # decoder + depth head exist in both
        assert tb[name].tobytes() == tj[name].tobytes()
    for _, phase, _, dec_lr, _ in _log_rows(tmp_path / "joint"):
        if phase == "aux":
            assert dec_lr == 0.0


def test_alpha_zero_gives_depth_phase_no_decoder_rate(world, tmp_path):
    result = tr.train(_config(world, "joint", steps=4, alpha=0.0), tmp_path / "run")
    depth_rows = [row for row in _log_rows(tmp_path / "run") if row[1] == "depth"]
    assert all(dec_lr == 0.0 for _, _, _, dec_lr, _ in depth_rows)
    # the depth head still trains (its rate only hits 0 where s(t) does)
    assert any(head_lr > 0.0 for _, _, _, _, head_lr in depth_rows)
    fresh = Model(result.config.encoder_seed, result.config.seed)
    final = _model_tensors(result.final_checkpoint)
    assert final["decoder/stage0/weight"].tobytes() \
        != fresh.params["decoder/stage0/weight"].data.tobytes()  # aux trained it


def test_joint_log_has_two_phases_per_step_and_conserves_decoder_rate(world, tmp_path):
    cfg = _config(world, "joint", steps=5, alpha=0.9)
    tr.train(cfg, tmp_path / "run")
    rows = _log_rows(tmp_path / "run")
    assert len(rows) == 2 * cfg.total_steps
    schedule = cfg.schedule()
    for i in range(0, len(rows), 2):
        (td, pd, loss_d, dec_d, _), (ta, pa, loss_a, dec_a, _) = rows[i], rows[i + 1]
        assert td == ta == i // 2 + 1
        assert (pd, pa) == ("depth", "aux")
        assert math.isfinite(loss_d) and math.isfinite(loss_a)
        assert abs(dec_d + dec_a - cfg.base_lr * schedule.multiplier(td)) < 1e-15


def test_baseline_log_has_one_row_per_step(world, tmp_path):
    cfg = _config(world, steps=5)
    tr.train(cfg, tmp_path / "run")
    rows = _log_rows(tmp_path / "run")
    assert len(rows) == cfg.total_steps
    assert all(phase == "depth" for _, phase, *_ in rows)


def test_encoder_is_untouched_by_training(world, tmp_path):
    cfg = _config(world, "joint", steps=3)
    result = tr.train(cfg, tmp_path / "run")
    fresh = FrozenEncoder(cfg.encoder_seed)
    assert result.model.encoder.weight.tobytes() == fresh.weight.tobytes()
    saved = _model_tensors(result.final_checkpoint)
    assert not any(name.startswith("encoder") for name in saved)


def test_train_refuses_an_occupied_run_dir(world, tmp_path):
    tr.train(_config(world, steps=1), tmp_path / "run")
    with pytest.raises(FileExistsError):
        tr.train(_config(world, steps=1), tmp_path / "run")


def test_train_rejects_empty_depth_manifest(world, tmp_path):
    with open(world["train"], encoding="utf-8") as fh:
        doc = json.load(fh)
    doc["samples"] = []
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        tr.train(_config(world, depth_manifest=str(empty)), tmp_path / "run")


def test_mode_specific_entry_points(world, tmp_path):
    with pytest.raises(ValueError):
        tr.train_baseline(_config(world, "joint"), tmp_path / "a")
    with pytest.raises(ValueError):
        tr.train_joint(_config(world, "baseline"), tmp_path / "b")


def test_depth_fraction_subsets_the_stream(world, tmp_path):
    full = tr.train(_config(world, steps=3), tmp_path / "full")
    frac = tr.train(_config(world, steps=3, depth_fraction=0.3), tmp_path / "frac")
    tf, tp = _model_tensors(full.final_checkpoint), _model_tensors(frac.final_checkpoint)
    assert any(tf[n].tobytes() != tp[n].tobytes() for n in tf)


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_bundle_contents(world, tmp_path):
    cfg = _config(world, "joint", steps=3)
    result = tr.train(cfg, tmp_path / "run")
    meta, tensors = read_bundle(result.final_checkpoint)
    assert meta["kind"] == "checkpoint" and meta["step"] == 3
    assert meta["config"] == cfg.to_json()
    assert meta["arch"] == result.model.arch_manifest()
    assert set(meta["depth_stream"]) == {"cursor"}
    assert set(meta["aux_stream"]) == {"batch_index", "cursors"}
    prefixes = {name.split("/", 1)[0] for name in tensors}
    assert prefixes == {"model", "opt_depth", "opt_aux"}
    assert meta["opt_depth_steps"]["decoder/stage0/weight"] == 3


def test_checkpoint_every_writes_intermediates(world, tmp_path):
    tr.train(_config(world, steps=6, checkpoint_every=2), tmp_path / "run")
    names = sorted(p.name for p in (tmp_path / "run").glob("ckpt_*.dbnd"))
    assert names == ["ckpt_00000002.dbnd", "ckpt_00000004.dbnd", "ckpt_00000006.dbnd"]


def test_model_from_checkpoint_reproduces_predictions(world, tmp_path):
    cfg = _config(world, "joint", steps=3)
    result = tr.train(cfg, tmp_path / "run")
    model, meta = tr.model_from_checkpoint(result.final_checkpoint)
    assert meta["step"] == 3
    test_ds = Dataset(load_manifest(world["test"]))
    img = test_ds.load(0).image[None].astype(np.float64)
    assert model.predict_depth(img).tobytes() == result.model.predict_depth(img).tobytes()


def test_model_from_checkpoint_rejects_other_bundles(world, tmp_path):
    path = tmp_path / "not_ckpt.dbnd"
    write_bundle(path, {"kind": "snack"}, {"x": np.zeros(3)})
    with pytest.raises(ValueError):
        tr.model_from_checkpoint(path)


# ---------------------------------------------------------------------------
# resume

@pytest.mark.parametrize("mode,steps,stop", [("baseline", 8, 3), ("joint", 6, 2)])
def test_resume_matches_uninterrupted_run(world, tmp_path, mode, steps, stop):
    cfg = _config(world, mode, steps=steps)
    straight = tr.train(cfg, tmp_path / "straight")
    tr.train(cfg, tmp_path / "paused", stop_after_step=stop)
    resumed = tr.resume_run(tmp_path / "paused")
    assert resumed.steps_completed == steps
    assert resumed.final_checkpoint.read_bytes() == straight.final_checkpoint.read_bytes()
    assert (tmp_path / "paused" / "log.csv").read_bytes() \
        == (tmp_path / "straight" / "log.csv").read_bytes()


def test_resume_at_the_end_is_a_no_op(world, tmp_path):
    cfg = _config(world, steps=4)
    done = tr.train(cfg, tmp_path / "run")
    before = done.final_checkpoint.read_bytes()
    again = tr.resume_run(tmp_path / "run")
    assert again.steps_completed == 4
    assert again.final_checkpoint.read_bytes() == before


def test_resume_requires_a_run(world, tmp_path):
    with pytest.raises(FileNotFoundError):
        tr.resume_run(tmp_path / "nowhere")
    (tmp_path / "half").mkdir()
    (tmp_path / "half" / "config.json").write_text(json.dumps(_config(world).to_json()))
    with pytest.raises(FileNotFoundError):
        tr.resume_run(tmp_path / "half")


def test_resume_rejects_mismatched_architecture(world, tmp_path):
    cfg = _config(world, steps=2)
    result = tr.train(cfg, tmp_path / "run")
    meta, tensors = read_bundle(result.final_checkpoint)
    meta["arch"]["dim"] = 128
    write_bundle(result.final_checkpoint, meta, tensors)
    with pytest.raises(ValueError):
        tr.resume_run(tmp_path / "run")


# ---------------------------------------------------------------------------
# evaluation wiring and aggregation

def test_training_with_test_manifest_writes_reports(world, tmp_path):
    cfg = _config(world, "joint", steps=3, test_manifest=world["test"])
    result = tr.train(cfg, tmp_path / "run")
    assert result.report is not None
    on_disk = load_report(tmp_path / "run" / "report.json")
    assert on_disk == result.report
    recomputed = evaluate_model(result.model, Dataset(load_manifest(world["test"])),
                                seed=cfg.seed)
    assert recomputed == result.report
    assert (tmp_path / "run" / "report.csv").exists()
    timing = json.loads((tmp_path / "run" / "timing.json").read_text())
    assert timing["steps"] == 3 and timing["wall_seconds"] >= 0


def test_mean_stderr_hand_values():
    mean, stderr = tr.mean_stderr([1.0, 2.0, 3.0, 4.0])
    assert mean == pytest.approx(2.5)
    assert stderr == pytest.approx(math.sqrt(5.0 / 3.0) / 2.0)
    assert tr.mean_stderr([1.0, 1.0])[1] == 0.0
    with pytest.raises(ValueError):
        tr.mean_stderr([1.0])


def test_run_seeds_aggregates_reports(world, tmp_path):
    cfg = _config(world, steps=2, test_manifest=world["test"])
    out = tr.run_seeds(cfg, seeds=(0, 1), out_dir=tmp_path / "sweep")
    assert out["n_seeds"] == 2
    assert [r["seed"] for r in out["runs"]] == [0, 1]
    values = [r["absrel"] for r in out["runs"]]
    mean, stderr = tr.mean_stderr(values)
    assert out["mean_absrel"] == mean and out["stderr_absrel"] == stderr
    saved = json.loads((tmp_path / "sweep" / "aggregate.json").read_text())
    assert saved == out


def test_run_seeds_validates_inputs(world, tmp_path):
    cfg = _config(world, steps=1, test_manifest=world["test"])
    with pytest.raises(ValueError):
        tr.run_seeds(cfg, seeds=(0,), out_dir=tmp_path / "a")
    with pytest.raises(ValueError):
        tr.run_seeds(cfg, seeds=(0, 0), out_dir=tmp_path / "b")
    with pytest.raises(ValueError):
        tr.run_seeds(_config(world, steps=1), seeds=(0, 1), out_dir=tmp_path / "c")
