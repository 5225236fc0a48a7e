from __future__ import annotations

import json
import statistics

import pytest
import torch

from dittune.checkpoint import load_base, load_delta, merge, model_from_base
from dittune.cli import run as cli_run
from dittune.config import ConfigError, ExperimentConfig, ScheduleConfig, load_config
from dittune.data import DatasetSpec
from dittune.diffusion import p_sample_loop
from dittune.harness import (SpecMismatch, ablation_jobs, cmd_finetune, cmd_merge, cmd_pretrain,
                             cmd_resolution_transfer, cmd_sample, count_table, sample_images)
from dittune.model import ModelSpec, build_model, named_params
from dittune.peft import DIFFFIT_PATTERNS, SelectionPolicy, digests
from dittune.pushforward import UntrainedModel, pushforward_transfer_check, train_gaussian_base

SPEC = ModelSpec(image_size=4, channels=3, patch_size=2, hidden_dim=16, depth=2, num_heads=2, num_classes=3,
                 freq_dim=16)
SCHED = ScheduleConfig("linear", 20, 1e-3, 0.3)


def tiny_cfg(tmp_path, **kw) -> ExperimentConfig:
    base = dict(model=SPEC, schedule=SCHED, data=DatasetSpec(image_size=4, num_classes=3),
                target=DatasetSpec("shifted_variant", image_size=4, num_classes=3), n_train=128, n_eval=64,
                steps=12, batch_size=8, base_lr=1e-3, log_every=4, eval_samples=32, project_dim=8,
                out=str(tmp_path / "run"))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def base_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("base")
    return cmd_pretrain(tiny_cfg(tmp, steps=30), out=tmp / "pre")


def test_pretrain_deterministic(tmp_path):
    cfg = tiny_cfg(tmp_path)
    a = cmd_pretrain(cfg, out=tmp_path / "a")
    b = cmd_pretrain(cfg, out=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.fingerprint == b.fingerprint


def test_run_dir_contents(base_run):
    run = base_run.run_dir
    for name in ("config.json", "meta.json", "metrics.csv", "base.dckpt"):
        assert (run / name).exists()
    meta = json.loads((run / "meta.json").read_text())
    assert meta["version"].startswith("dittune") and meta["seeds"]["seed"] == 0
    assert ExperimentConfig.from_dict(json.loads((run / "config.json").read_text())).steps == 30


def test_resume_next_step_loss(tmp_path):
    cfg = tiny_cfg(tmp_path, steps=11, log_every=1)
    straight = cmd_pretrain(cfg, out=tmp_path / "straight")
    part = cmd_pretrain(cfg.replace(steps=10), out=tmp_path / "part")
    resumed = cmd_pretrain(cfg.replace(steps=1), out=tmp_path / "resumed", resume_from=part.checkpoint,
                           start_step=10)
    # step 11's loss is computed from the step-10 weights with the step-10 generator
    assert resumed.losses == [(11, straight.losses[-1][1])]


def test_resume_spec_mismatch(tmp_path, base_run):
    other = tiny_cfg(tmp_path, model=ModelSpec(image_size=4, hidden_dim=8, depth=1, num_heads=2, num_classes=3,
                                               freq_dim=8))
    with pytest.raises(SpecMismatch):
        cmd_pretrain(other, resume_from=base_run.checkpoint)


def test_finetune_difffit(tmp_path, base_run):
    res = cmd_finetune(tiny_cfg(tmp_path, eval_every=0), base_run.checkpoint, "difffit-best")
    model, policy = res.extra["model"], res.extra["policy"]
    assert res.extra["lr"] == pytest.approx(1e-2)
    assert set(res.extra["trainable"]) == set(SelectionPolicy(DIFFFIT_PATTERNS).resolve(named_params(model)))
    assert res.extra["log"].frozen_unchanged
    base = load_base(base_run.checkpoint)
    for n, p in named_params(model).items():
        if not policy.matches(n):
            assert torch.equal(p, base.params[n]), n
    assert res.delta is not None and res.final_proxy is not None
    summary = json.loads((res.run_dir / "summary.json").read_text())
    assert 0 < summary["ratio"] < 1


def test_finetune_full_writes_base(tmp_path, base_run):
    res = cmd_finetune(tiny_cfg(tmp_path, steps=2), base_run.checkpoint, "full")
    assert res.delta is None and res.checkpoint.exists()
    assert res.extra["lr"] == pytest.approx(1e-3)


def test_finetune_spec_mismatch(tmp_path, base_run):
    with pytest.raises(SpecMismatch):
        cmd_finetune(tiny_cfg(tmp_path, model=ModelSpec()), base_run.checkpoint)


def test_sample_merge_matches_direct(tmp_path, base_run):
    res = cmd_finetune(tiny_cfg(tmp_path, steps=4), base_run.checkpoint, "difffit-best")
    sched = SCHED.build()
    via_cli = cmd_sample(base_run.checkpoint, res.delta, n=4, seed=3, schedule=sched, out=tmp_path / "s")
    merged_path = tmp_path / "merged.dckpt"
    cmd_merge(base_run.checkpoint, res.delta, merged_path)
    via_merged = cmd_sample(merged_path, n=4, seed=3, schedule=sched)
    direct = sample_images(res.extra["model"], sched, 4, None, 4.0, 3)
    assert torch.equal(via_cli, via_merged) and torch.equal(via_cli, direct)
    assert (tmp_path / "s" / "grid.ppm").exists() and (tmp_path / "s" / "sample_0003.ppm").exists()


def test_cfg_scale_one_is_conditional(base_run):
    model = load_model(base_run.checkpoint)
    sched = SCHED.build()
    seen = []

    def spy(xt, t, y):
        seen.append(y.clone())
        return model(xt, t, y)

    a = p_sample_loop(spy, sched, (3, 3, 4, 4), torch.tensor([0, 1, 2]), 1.0, 5, null_label=model.null_label)
    assert all(torch.equal(y, torch.tensor([0, 1, 2])) for y in seen) and len(seen) == sched.T
    assert torch.equal(a, sample_images(model, sched, 3, [0, 1, 2], 1.0, 5))


def test_ablation_jobs():
    jobs = ablation_jobs("first_k_blocks", 4)
    assert [v for v, _, _ in jobs] == [0, 1, 2, 3, 4]
    assert jobs[0][1]["placement"]["block_range"] is None
    lr = ablation_jobs("lr_multiplier", 4)
    assert [v for v, _, _ in lr] == [1.0, 10.0, 100.0]
    with pytest.raises(ConfigError):
        ablation_jobs("depth", 4)


def test_ablate_serial(tmp_path, base_run):
    from dittune.harness import cmd_ablate
    res = cmd_ablate(tiny_cfg(tmp_path, steps=2), base_run.checkpoint, "lr_multiplier", out=tmp_path / "abl")
    rows = res.extra["rows"]
    assert [r["default"] for r in rows] == [0, 1, 0]
    assert [r["lr"] for r in rows] == pytest.approx([1e-3, 1e-2, 1e-1])
    assert (tmp_path / "abl" / "sweep.csv").exists() and (tmp_path / "abl" / "sweep.svg").exists()


def test_resolution_transfer_keeps_label_table(tmp_path, base_run):
    cfg = tiny_cfg(tmp_path, steps=4, eval_every=2, target=DatasetSpec("class_gaussians", image_size=8,
                                                                        num_classes=3))
    res = cmd_resolution_transfer(cfg, base_run.checkpoint, out=tmp_path / "rs", early_stop=False)
    s = res.extra["summary"]
    assert all(a["label_table_unchanged"] for a in s["arms"].values())
    assert s["arms"]["trick"]["spec"]["coord_divisor"] == 2.0
    assert [st for st, _ in res.extra["arms"]["trick"]["evals"]] == [0, 2, 4]
    assert [st for st, _ in res.extra["arms"]["control"]["evals"]] == [4]
    d = load_delta(tmp_path / "rs" / "trick" / "task.ddelta")
    assert "y_embed.table" not in d.tensors
    merged = merge(load_base(base_run.checkpoint), d)
    assert merged.spec.image_size == 8


def test_resolution_transfer_needs_double_size(tmp_path, base_run):
    with pytest.raises(SpecMismatch):
        cmd_resolution_transfer(tiny_cfg(tmp_path, eval_every=2), base_run.checkpoint)


def test_count_table_toy():
    rows = {r["method"]: r for r in count_table(SPEC)}
    assert rows["full"]["ratio"] == 1.0
    assert rows["bitfit"]["trainable"] < rows["difffit-best"]["trainable"] < rows["full"]["trainable"]


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli_run(["pretrain", "--config", str(bad)]) == 2
    assert cli_run(["pretrain", "no_such_key=1"]) == 2
    assert cli_run(["frobnicate"]) == 2
    assert cli_run(["count-params"]) == 0
    out = capsys.readouterr().out
    assert "difffit-best ratio" in out and "FAIL" not in out
    assert cli_run(["verify-theory", "--D", "4", "--eta", "0", "--trials", "5",
                    "--out", str(tmp_path / "th")]) == 0
    assert (tmp_path / "th" / "trials.csv").exists()


def test_cli_pretrain_and_finetune(tmp_path):
    common = ["model.image_size=4", "model.hidden_dim=16", "model.depth=2", "model.num_classes=3",
              "model.freq_dim=16", "data.image_size=4", "data.num_classes=3", "target.image_size=4",
              "target.num_classes=3", "schedule.T=20", "n_train=64", "n_eval=64", "steps=3", "batch_size=8",
              "eval_samples=32", "project_dim=8"]
    assert cli_run(["pretrain", "--out", str(tmp_path / "p"), *common]) == 0
    assert cli_run(["finetune", "--base", str(tmp_path / "p" / "base.dckpt"), "--method", "bitfit",
                    "--out", str(tmp_path / "f"), *common]) == 0
    assert (tmp_path / "f" / "task.ddelta").exists()


def test_kv_config_file(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("steps = 7  # short\nmodel.depth=3\n")
    cfg = load_config(f)
    assert cfg.steps == 7 and cfg.model.depth == 3
    f.write_text("steps 7\n")
    with pytest.raises(ConfigError):
        load_config(f)


def load_model(path):
    return model_from_base(path)[0]


PF_SPEC = ModelSpec(image_size=4, channels=3, patch_size=2, hidden_dim=32, depth=2, num_heads=2, num_classes=1,
                    freq_dim=32)


@pytest.fixture(scope="module")
def gaussian_base():
    sched = SCHED.build()
    return train_gaussian_base(PF_SPEC, sched, steps=600, seed=0), sched


def test_pushforward_rejects_untrained():
    with pytest.raises(UntrainedModel):
        pushforward_transfer_check(build_model(PF_SPEC), 2.0, 0, SCHED.build())


def test_pushforward_identity_scale(gaussian_base):
    model, sched = gaussian_base
    rep = pushforward_transfer_check(model, 1.0, 0, sched, n=256, project_dim=16)
    assert rep.distance_after <= rep.distance_before * 1.5 + 0.05


def test_pushforward_recovers_scale(gaussian_base):
    model, sched = gaussian_base
    reps = [pushforward_transfer_check(model, 2.0, s, sched, n=256, project_dim=16) for s in range(5)]
    assert statistics.median(r.distance_before - r.distance_after for r in reps) > 0
    assert statistics.median(r.max_rel_gamma_err for r in reps) < 0.10
    for r in reps:
        assert r.gamma_hat == pytest.approx(r.gamma_closed_form, rel=1e-4)
