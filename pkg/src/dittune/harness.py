"""Experiment orchestration behind the CLI.

Every ``cmd_*`` writes a run directory holding ``config.json`` (the resolved
config), ``meta.json`` (code version, command and seeds) and its outputs:

- ``metrics.csv``: ``step,loss`` (interval-mean training loss)
- ``eval.csv``: ``step,proxy`` (Gaussian-Fréchet proxy against held-out data)
- ``base.dckpt`` / ``task.ddelta``: checkpoints
- ``samples/*.ppm``: sample grids and images
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import multiprocessing
import platform
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import (BaseCheckpoint, base_file_nbytes, load_base, load_delta, load_params, merge,
                         model_from_base, save_base, save_delta)
from .config import ConfigError, ExperimentConfig
from .data import ToyDataset
from .diffusion import VIS_CFG_SCALE, LossWeights, NoiseSchedule, p_sample_loop
from .io import image_grid, write_csv, write_json, write_ppm, write_svg_lines
from .metrics import frechet_gaussian
from .model import XL_SPEC, DiT, ModelSpec, build_model, count_parameters, named_params
from .peft import (BLOCK_SITES, DIFFFIT_PATTERNS, PEFT_LR_MULTIPLIER, GammaPlacement, OptimizerConfig,
                   PEFTMethod, SelectionPolicy, apply_method, difffit_best_placement, digests,
                   iter_batches, lr_policy, method_preset, train_steps)
from . import theory

log = logging.getLogger(__name__)


class SpecMismatch(ValueError):
    pass


def version_string() -> str:
    return f"dittune {__version__}; torch {torch.__version__}; numpy {np.__version__}; python {platform.python_version()}"


def _prepare_run(cfg: ExperimentConfig, command: str, out: str | Path | None = None, **extra) -> Path:
    run = Path(out or cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    write_json(run / "config.json", cfg.to_dict())
    write_json(run / "meta.json", {"version": version_string(), "command": command,
                                   "seeds": {"seed": cfg.seed, "split_seed": cfg.split_seed,
                                             "eval_seed": eval_seed(cfg.seed)}, **extra})
    return run


def eval_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), 7]).generate_state(1)[0])


def resolve_method(method, spec: ModelSpec) -> PEFTMethod:
    if isinstance(method, PEFTMethod):
        return method
    if isinstance(method, dict):
        return PEFTMethod.from_dict(method)
    return method_preset(str(method), spec.depth, spec.hidden_dim)


def sample_images(model: DiT, schedule: NoiseSchedule, n: int, labels=None, cfg_scale: float = 1.5,
                  seed: int = 0) -> torch.Tensor:
    """``n`` samples; labels default to a balanced ``arange(n) % num_classes``."""
    s = model.spec
    labels = torch.arange(n) % s.num_classes if labels is None else torch.as_tensor(labels)
    was_training = model.training
    model.eval()
    out = p_sample_loop(model, schedule, (n, s.channels, s.image_size, s.image_size), labels,
                        cfg_scale, seed, null_label=model.null_label)
    model.train(was_training)
    return out


def proxy_score(model: DiT, schedule: NoiseSchedule, reference: torch.Tensor, cfg: ExperimentConfig,
                seed: int | None = None) -> float:
    x = sample_images(model, schedule, cfg.eval_samples, None, cfg.cfg_scale,
                      eval_seed(cfg.seed) if seed is None else seed)
    return frechet_gaussian(x, reference, project_dim=cfg.project_dim).score


@dataclass
class RunResult:
    run_dir: Path
    losses: list[tuple[int, float]] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    checkpoint: Path | None = None
    delta: Path | None = None
    fingerprint: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def final_proxy(self) -> float | None:
        return self.evals[-1][1] if self.evals else None


def _train(model, policy, cfg: ExperimentConfig, schedule, train_xy, eval_ref, run: Path, lr: float,
           *, start_step: int = 0, stop_below: float | None = None):
    """Shared training loop with periodic evaluation, sample grids and optional early stop.

    Evaluation happens at step 0 and every ``cfg.eval_every`` steps when set, and
    at the last step whenever a reference set is given. Sampling uses its own
    generators, so the evaluation cadence never changes the training trajectory.
    """
    evals: list[tuple[int, float]] = []
    end = start_step + cfg.steps

    def evaluate(step):
        evals.append((step, proxy_score(model, schedule, eval_ref, cfg)))
        return stop_below is not None and evals[-1][1] <= stop_below

    def callback(step, m):
        if cfg.sample_every and step % cfg.sample_every == 0:
            grid = sample_images(m, schedule, cfg.grid_samples, None, VIS_CFG_SCALE, cfg.seed)
            write_ppm(run / "samples" / f"grid_{step:06d}.ppm", image_grid(grid))
        if eval_ref is not None and ((cfg.eval_every and step % cfg.eval_every == 0) or step == end):
            return evaluate(step)
        return False

    if eval_ref is not None and cfg.eval_every and evaluate(start_step):
        tl = train_steps(model, policy, iter_batches(*train_xy, cfg.batch_size), OptimizerConfig(lr=lr), 0,
                         cfg.seed, schedule, start_step=start_step)
        return tl, evals
    tl = train_steps(model, policy, iter_batches(*train_xy, cfg.batch_size), OptimizerConfig(lr=lr), cfg.steps,
                     cfg.seed, schedule, start_step=start_step, weights=LossWeights(cfg.lambda_vlb),
                     log_every=cfg.log_every, label_dropout=cfg.label_dropout, callback=callback)
    return tl, evals


def _write_metrics(run: Path, info, evals):
    write_csv(run / "metrics.csv", [{"step": s, "loss": l} for s, l in info.losses], ["step", "loss"])
    if evals:
        write_csv(run / "eval.csv", [{"step": s, "proxy": p} for s, p in evals], ["step", "proxy"])


def cmd_pretrain(cfg: ExperimentConfig, *, out=None, resume_from=None, start_step: int = 0) -> RunResult:
    """Train the toy DiT on the source dataset from scratch (or resume) and write ``base.dckpt``."""
    run = _prepare_run(cfg, "pretrain", out, resume_from=str(resume_from) if resume_from else None,
                       start_step=start_step)
    schedule = cfg.schedule.build()
    train_xy, eval_xy = ToyDataset(cfg.data).splits(cfg.n_train, cfg.n_eval, cfg.split_seed)
    if resume_from is not None:
        model, _ = model_from_base(resume_from)
        if model.spec != cfg.model:
            raise SpecMismatch("resume checkpoint spec differs from the config's model spec")
    else:
        model = build_model(cfg.model, seed=cfg.seed)
    policy = SelectionPolicy(("*",))
    ref = eval_xy[0] if cfg.eval_every else None
    info, evals = _train(model, policy, cfg, schedule, train_xy, ref, run, cfg.base_lr, start_step=start_step)
    _write_metrics(run, info, evals)
    fp = save_base(model, run / "base.dckpt")
    return RunResult(run, info.losses, evals, run / "base.dckpt", None, fp, {"model": model, "log": info})


def _load_base_checked(base_ckpt, cfg: ExperimentConfig | None) -> BaseCheckpoint:
    base = base_ckpt if isinstance(base_ckpt, BaseCheckpoint) else load_base(base_ckpt)
    if base.spec is None:
        raise SpecMismatch("base checkpoint has no recorded model spec")
    return base


def cmd_finetune(cfg: ExperimentConfig, base_ckpt, method=None, *, out=None, method_seed: int = 0) -> RunResult:
    """Method surgery + freeze policy + lr policy on a base checkpoint, trained on ``cfg.target``."""
    base = _load_base_checked(base_ckpt, cfg)
    if cfg.model != base.spec:
        raise SpecMismatch(f"config model spec {cfg.model} does not match the base checkpoint {base.spec}")
    if cfg.target.image_size != base.spec.image_size or cfg.target.num_classes > base.spec.num_classes:
        raise SpecMismatch("target dataset is incompatible with the base model")
    meth = resolve_method(method if method is not None else cfg.method, base.spec)
    run = _prepare_run(cfg, "finetune", out, method=meth.to_dict(), base_fingerprint=base.fingerprint)
    schedule = cfg.schedule.build()
    train_xy, eval_xy = ToyDataset(cfg.target).splits(cfg.n_train, cfg.n_eval, cfg.split_seed)
    model, _ = model_from_base(base)
    policy = apply_method(model, meth, seed=method_seed)
    lr = cfg.base_lr * cfg.lr_multiplier if (cfg.lr_multiplier and meth.is_peft) else lr_policy(cfg.base_lr, meth)
    info, evals = _train(model, policy, cfg, schedule, train_xy, eval_xy[0], run, lr)
    _write_metrics(run, info, evals)
    trainable = policy.resolve(named_params(model))
    result = RunResult(run, info.losses, evals, fingerprint=base.fingerprint,
                       extra={"model": model, "policy": policy, "method": meth, "lr": lr,
                              "trainable": trainable, "log": info})
    if meth.is_peft:
        save_delta(model, policy, base.fingerprint, run / "task.ddelta", meth)
        result.delta = run / "task.ddelta"
    else:
        save_base(model, run / "finetuned.dckpt")
        result.checkpoint = run / "finetuned.dckpt"
    counts = count_parameters(model, policy)
    write_json(run / "summary.json", {"final_proxy": result.final_proxy, "lr": lr, "trainable": counts[0],
                                      "total": counts[1], "ratio": counts[2]})
    return result


def evaluate_base(cfg: ExperimentConfig, base_ckpt, dataset=None) -> float:
    """Proxy of the unmodified base model against held-out ``dataset`` (default: ``cfg.target``)."""
    base = _load_base_checked(base_ckpt, cfg)
    model, _ = model_from_base(base)
    _, eval_xy = ToyDataset(dataset or cfg.target).splits(cfg.n_train, cfg.n_eval, cfg.split_seed)
    return proxy_score(model, cfg.schedule.build(), eval_xy[0], cfg)


def resolution_method(depth: int) -> PEFTMethod:
    """DiffFit selection without the class table (labels are unchanged across resolutions)."""
    return PEFTMethod("difffit", difffit_best_placement(depth), patterns=("bias", "norm", "gamma"),
                      name="difffit-no-label")


def cmd_resolution_transfer(cfg: ExperimentConfig, base_ckpt, *, out=None, early_stop: bool = True) -> RunResult:
    """Fine-tune a base trained at R on 2R data with and without the half-coordinate encoding.

    The control arm (``coord_divisor=1``) trains ``cfg.steps`` steps; its final proxy is
    the target. The trick arm (``coord_divisor=2``) is evaluated every ``cfg.eval_every``
    steps from step 0 and records the first step at which it reaches the target.
    """
    base = _load_base_checked(base_ckpt, cfg)
    R = base.spec.image_size
    if cfg.target.image_size != 2 * R:
        raise SpecMismatch(f"resolution transfer needs a {2 * R}px target, got {cfg.target.image_size}px")
    if not cfg.eval_every:
        raise ConfigError("resolution transfer needs eval_every > 0")
    run = _prepare_run(cfg, "resize", out, base_fingerprint=base.fingerprint)
    schedule = cfg.schedule.build()
    train_xy, eval_xy = ToyDataset(cfg.target).splits(cfg.n_train, cfg.n_eval, cfg.split_seed)
    meth = resolution_method(base.spec.depth)
    arms = {}
    target = None
    for arm, divisor in (("control", 1.0), ("trick", 2.0)):
        spec = dataclasses.replace(base.spec, image_size=2 * R, coord_divisor=divisor)
        model = build_model(spec)
        load_params(model, base.params)
        policy = apply_method(model, meth)
        table_before = digests(model, ["y_embed.table"])
        # the control arm only needs its final score
        arm_cfg = dataclasses.replace(cfg, eval_every=0) if arm == "control" else cfg
        stop = target if (arm == "trick" and early_stop) else None
        info, evals = _train(model, policy, arm_cfg, schedule, train_xy, eval_xy[0], run / arm,
                             lr_policy(cfg.base_lr, meth), stop_below=stop)
        (run / arm).mkdir(exist_ok=True)
        _write_metrics(run / arm, info, evals)
        if arm == "control":
            target = evals[-1][1]
        reached = next((s for s, p in evals if p <= target), None)
        arms[arm] = {"evals": evals, "reached_step": reached, "final_proxy": evals[-1][1],
                     "label_table_unchanged": digests(model, ["y_embed.table"]) == table_before,
                     "spec": spec.to_dict()}
        save_delta(model, policy, base.fingerprint, run / arm / "task.ddelta", meth, spec)
    summary = {"target_proxy": target, "control_steps": cfg.steps,
               "trick_reached_step": arms["trick"]["reached_step"],
               "trick_faster": arms["trick"]["reached_step"] is not None
               and arms["trick"]["reached_step"] < cfg.steps,
               "arms": {k: {kk: vv for kk, vv in v.items() if kk != "evals"} for k, v in arms.items()}}
    write_json(run / "summary.json", summary)
    write_svg_lines(run / "convergence.svg", {k: v["evals"] for k, v in arms.items()},
                    title="resolution transfer", xlabel="step", ylabel="proxy")
    return RunResult(run, evals=arms["trick"]["evals"], fingerprint=base.fingerprint,
                     extra={"arms": arms, "summary": summary})


ABLATION_AXES = ("first_k_blocks", "last_k_blocks", "module_set", "lr_multiplier")


def ablation_jobs(axis: str, depth: int, values=None) -> list[tuple[object, dict, float | None]]:
    """``(value, method dict, lr multiplier)`` per setting of the axis."""
    def difffit(placement, name):
        return PEFTMethod("difffit", placement, name=name).to_dict()

    if axis == "first_k_blocks":
        vals = list(range(depth + 1)) if values is None else [int(v) for v in values]
        return [(k, difffit(GammaPlacement.first_k(k), f"first_k={k}"), None) for k in vals]
    if axis == "last_k_blocks":
        vals = list(range(depth + 1)) if values is None else [int(v) for v in values]
        return [(k, difffit(GammaPlacement.last_k(k, depth), f"last_k={k}"), None) for k in vals]
    if axis == "module_set":
        vals = sorted(BLOCK_SITES) if values is None else list(values)
        jobs = []
        for site in vals:
            rng = (1, depth) if site == "block_branches" else None
            jobs.append((site, difffit(GammaPlacement(rng, frozenset({site})), f"site={site}"), None))
        return jobs
    if axis == "lr_multiplier":
        vals = [1.0, PEFT_LR_MULTIPLIER, 100.0] if values is None else [float(v) for v in values]
        best = method_preset("difffit-best", depth).to_dict()
        return [(v, best, v) for v in vals]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def _ablation_worker(args):
    cfg_dict, base_path, method, mult, out = args
    torch.set_num_threads(1)
    cfg = ExperimentConfig.from_dict(cfg_dict)
    if mult is not None:
        cfg = dataclasses.replace(cfg, lr_multiplier=mult)
    res = cmd_finetune(cfg, base_path, method, out=out)
    n_train, total, ratio = count_parameters(res.extra["model"], res.extra["policy"])
    return {"final_proxy": res.final_proxy, "trainable": n_train, "ratio": ratio, "lr": res.extra["lr"]}


def cmd_ablate(cfg: ExperimentConfig, base_ckpt, axis: str, *, values=None, jobs: int = 1, out=None) -> RunResult:
    """One fine-tune per axis setting; results are gathered by job index."""
    base = _load_base_checked(base_ckpt, cfg)
    base_path = Path(base_ckpt) if not isinstance(base_ckpt, BaseCheckpoint) else None
    specs = ablation_jobs(axis, base.spec.depth, values)
    run = _prepare_run(cfg, f"ablate {axis}", out, axis=axis, jobs=jobs)
    if base_path is None:
        base_path = run / "base.dckpt"
        save_base(base.params, base_path, base.spec)
    tasks = [(cfg.to_dict(), str(base_path), m, mult, str(run / f"job_{i:02d}")) for i, (_, m, mult) in enumerate(specs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=multiprocessing.get_context("spawn")) as ex:
            results = list(ex.map(_ablation_worker, tasks))
    else:
        results = [_ablation_worker(t) for t in tasks]
    rows = []
    for i, ((value, m, mult), r) in enumerate(zip(specs, results)):
        rows.append({"job": i, "axis": axis, "value": value, "method": m["name"], "lr": r["lr"],
                     "trainable": r["trainable"], "ratio": r["ratio"], "final_proxy": r["final_proxy"],
                     "default": int(axis == "lr_multiplier" and mult == PEFT_LR_MULTIPLIER)})
    write_csv(run / "sweep.csv", rows)
    if all(isinstance(r["value"], (int, float)) for r in rows):
        write_svg_lines(run / "sweep.svg", {axis: [(float(r["value"]), r["final_proxy"]) for r in rows]},
                        title=f"ablation: {axis}", xlabel=axis, ylabel="final proxy")
    return RunResult(run, extra={"rows": rows})


def cmd_sample(base_ckpt, delta=None, *, n: int = 16, class_label=None, cfg_scale: float = VIS_CFG_SCALE,
               seed: int = 0, schedule: NoiseSchedule, out=None) -> torch.Tensor:
    """Sample from a base checkpoint, merged with a delta if one is given; writes PPM files."""
    base = load_base(base_ckpt) if not isinstance(base_ckpt, BaseCheckpoint) else base_ckpt
    if delta is not None:
        d = load_delta(delta) if isinstance(delta, (str, Path)) else delta
        model = merge(base, d)
    else:
        model, _ = model_from_base(base)
    x = sample_images(model, schedule, n, class_label, cfg_scale, seed)
    if out is not None:
        out = Path(out)
        for i in range(n):
            write_ppm(out / f"sample_{i:04d}.ppm", x[i])
        write_ppm(out / "grid.ppm", image_grid(x))
    return x


def cmd_merge(base_ckpt, delta, out) -> str:
    """Write the merged model as a standalone base checkpoint; returns its fingerprint."""
    base = load_base(base_ckpt) if not isinstance(base_ckpt, BaseCheckpoint) else base_ckpt
    d = load_delta(delta) if isinstance(delta, (str, Path)) else delta
    model = merge(base, d)
    return save_base(model, out)


COUNT_METHODS = ("full", "bitfit", "difffit", "difffit-best", "lora-r8", "lora-r16", "adapter-par",
                 "adapter-seq", "vpt")
RATIO_BANDS = {"difffit-best": (0.0009, 0.0015), "bitfit": (0.0006, 0.0012)}


def count_table(spec: ModelSpec = XL_SPEC, methods=COUNT_METHODS) -> list[dict]:
    """Trainable/total counts per method, built on the meta device (no weights allocated).

    ``total`` counts the model after the method's surgery; ``base_total`` the plain model.
    """
    template = build_model(spec, device="meta")
    base_total = count_parameters(template)[1]
    rows = []
    for name in methods:
        model = copy.deepcopy(template)
        meth = method_preset(name, spec.depth, spec.hidden_dim)
        policy = apply_method(model, meth)
        n_train, total, _ = count_parameters(model, policy)
        rows.append({"method": name, "trainable": n_train, "total": total, "base_total": base_total,
                     "ratio": n_train / base_total, "delta_payload_bytes": 4 * n_train,
                     "base_payload_bytes": 4 * base_total})
    return rows


def check_ratio_bands(rows: list[dict]) -> dict[str, bool]:
    by = {r["method"]: r for r in rows}
    return {m: lo <= by[m]["ratio"] <= hi for m, (lo, hi) in RATIO_BANDS.items() if m in by}


def xl_storage_report(spec: ModelSpec = XL_SPEC, method: str = "difffit-best", out_dir=None) -> dict:
    """Base file size from shapes, and a real delta file written with placeholder tensor values."""
    model = build_model(spec, device="meta")
    base_bytes = base_file_nbytes(named_params(model), spec)
    base_payload = 4 * count_parameters(model)[1]
    meth = method_preset(method, spec.depth, spec.hidden_dim)
    policy = apply_method(model, meth)
    selected = {n: torch.zeros(p.shape) for n, p in named_params(model).items() if policy.matches(n)}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(out_dir or tmp) / "xl.ddelta"
        d = save_delta(selected, policy, "0" * 64, path, meth, spec)
    return {"base_file_bytes": base_bytes, "base_payload_bytes": base_payload, "delta_file_bytes": d.nbytes,
            "delta_payload_bytes": d.payload_nbytes, "payload_fraction": d.payload_nbytes / base_payload,
            "file_fraction": d.nbytes / base_bytes}


@dataclass
class TheoryThresholds:
    success_rate: float = 0.95
    noiseless_tol: float = 1e-8


def cmd_verify_theory(*, D: int = 8, eta: float = 0.01, f: str = "tanh", trials: int = 100, seed: int = 0,
                      lemma_dims=(4, 8, 16), out=None, thresholds: TheoryThresholds = TheoryThresholds()) -> dict:
    """Recovery suite, noiseless control and lemma suites. ``passed`` gates the exit code."""
    main = theory.run_recovery_suite(D, None, eta, f, trials, seed)
    control = theory.run_recovery_suite(D, None, 0.0, f, trials, seed)
    lemmas = {d: theory.run_lemma_suite(theory.TheoryConfig(D=d, eta=eta, f=f), seed) for d in lemma_dims}
    checks = {"recovery_success_rate": main.success_rate >= thresholds.success_rate,
              "noiseless_exact": all(t.rel_err < thresholds.noiseless_tol for t in control.trials),
              **{f"lemmas_D{d}": r.passed for d, r in lemmas.items()}}
    report = {"recovery": main.summary(), "noiseless": control.summary(),
              "lemmas": {str(d): r.to_dict() for d, r in lemmas.items()}, "checks": checks,
              "passed": all(checks.values()), "version": version_string()}
    if out is not None:
        out = Path(out)
        write_csv(out / "trials.csv", main.csv_rows() + control.csv_rows())
        write_json(out / "summary.json", report)
    return report
