"""Command-line entry point: ``dittune <command> [options] [key=value ...]``.

Exit codes: 0 ok, 1 an acceptance threshold failed, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESET_CONFIGS, ConfigError, ExperimentConfig, load_config, parse_kv_lines
from .model import TOY_SPEC, XL_SPEC
from .peft import PRESETS

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, config: bool = True):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    if config:
        p.add_argument("--config", default=None, help="JSON or key=value file")
        p.add_argument("--preset", default="default", choices=sorted(PRESET_CONFIGS))
        p.add_argument("overrides", nargs="*", help="dotted key=value overrides")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dittune", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("pretrain", help="train a base model on the source dataset"))

    p = sub.add_parser("finetune", help="fine-tune a base checkpoint on the target dataset")
    _common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--method", default=None, choices=PRESETS)

    p = sub.add_parser("resize", help="resolution transfer with and without the half-coordinate encoding")
    _common(p)
    p.add_argument("--base", required=True)

    p = sub.add_parser("ablate", help="sweep one ablation axis")
    _common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--axis", required=True,
                   choices=["first_k_blocks", "last_k_blocks", "module_set", "lr_multiplier"])
    p.add_argument("--values", default=None, help="comma-separated axis values")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("sample", help="sample images from a base (+ delta) checkpoint")
    _common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--delta", default=None)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--class", dest="class_label", type=int, default=None)
    p.add_argument("--cfg-scale", type=float, default=None)

    p = sub.add_parser("merge", help="merge a delta into its base and write a standalone checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--delta", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("count-params", help="trainable-parameter table per method")
    p.add_argument("--model", choices=["xl", "toy"], default="xl")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("verify-theory", help="run the recovery-bound and lemma suites")
    _common(p, config=False)
    p.add_argument("--config", default=None, help="JSON or key=value suite config")
    p.add_argument("--D", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--f", default=None, choices=["tanh", "sigmoid", "relu"])
    p.add_argument("--trials", type=int, default=None)
    return ap


def _overrides(items) -> dict:
    return parse_kv_lines(items or [])


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config, _overrides(args.overrides), PRESET_CONFIGS[args.preset]())
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.out is not None:
        extra["out"] = args.out
    return cfg.replace(**extra) if extra else cfg


THEORY_KEYS = {"D", "eta", "f", "trials", "seed", "lemma_dims"}


def _theory_kwargs(args) -> dict:
    kw = {}
    if args.config:
        text = Path(args.config).read_text()
        try:
            kw = json.loads(text) if text.lstrip().startswith("{") else parse_kv_lines(text.splitlines())
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON config: {e}") from e
        if not isinstance(kw, dict):
            raise ConfigError("suite config must be an object")
    for k in ("D", "eta", "f", "trials", "seed"):
        v = getattr(args, k)
        if v is not None:
            kw[k] = v
    bad = set(kw) - THEORY_KEYS
    if bad:
        raise ConfigError(f"unknown suite config keys: {sorted(bad)}")
    if "D" in kw and (not isinstance(kw["D"], int) or kw["D"] < 2):
        raise ConfigError("D must be an integer >= 2")
    if "trials" in kw and (not isinstance(kw["trials"], int) or kw["trials"] < 1):
        raise ConfigError("trials must be a positive integer")
    return kw


def run(argv=None) -> int:
    from . import harness

    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "pretrain":
            res = harness.cmd_pretrain(_experiment(args))
            print(f"base checkpoint: {res.checkpoint} (fingerprint {res.fingerprint[:16]})")
        elif args.command == "finetune":
            res = harness.cmd_finetune(_experiment(args), args.base, args.method)
            print(f"run: {res.run_dir}  final proxy: {res.final_proxy:.5g}")
        elif args.command == "resize":
            res = harness.cmd_resolution_transfer(_experiment(args), args.base)
            s = res.extra["summary"]
            print(f"control proxy at step {s['control_steps']}: {s['target_proxy']:.5g}; "
                  f"trick arm reached it at step {s['trick_reached_step']}")
        elif args.command == "ablate":
            vals = args.values.split(",") if args.values else None
            res = harness.cmd_ablate(_experiment(args), args.base, args.axis, values=vals, jobs=args.jobs)
            for r in res.extra["rows"]:
                print(f"{r['axis']}={r['value']}: proxy {r['final_proxy']:.5g} (trainable {r['trainable']})")
        elif args.command == "sample":
            cfg = _experiment(args)
            scale = args.cfg_scale if args.cfg_scale is not None else harness.VIS_CFG_SCALE
            out = Path(args.out or cfg.out) / "samples"
            harness.cmd_sample(args.base, args.delta, n=args.n, class_label=args.class_label, cfg_scale=scale,
                               seed=cfg.seed, schedule=cfg.schedule.build(), out=out)
            print(f"wrote {args.n} images to {out}")
        elif args.command == "merge":
            fp = harness.cmd_merge(args.base, args.delta, args.out)
            print(f"merged checkpoint: {args.out} (fingerprint {fp[:16]})")
        elif args.command == "count-params":
            spec = XL_SPEC if args.model == "xl" else TOY_SPEC
            rows = harness.count_table(spec)
            if args.json:
                print(json.dumps(rows, indent=2))
            else:
                print(f"{'method':<14}{'trainable':>14}{'total':>14}{'ratio':>10}")
                for r in rows:
                    print(f"{r['method']:<14}{r['trainable']:>14,}{r['base_total']:>14,}{100 * r['ratio']:>9.3f}%")
            if args.model == "xl":
                bands = harness.check_ratio_bands(rows)
                for m, ok in bands.items():
                    lo, hi = harness.RATIO_BANDS[m]
                    print(f"{m} ratio in [{100 * lo:.2f}%, {100 * hi:.2f}%]: {'PASS' if ok else 'FAIL'}")
                if not all(bands.values()):
                    return EXIT_FAIL
        elif args.command == "verify-theory":
            kw = _theory_kwargs(args)
            rep = harness.cmd_verify_theory(out=args.out, **kw)
            t = rep["recovery"]
            print(f"recovery suite: success {t['success_rate']:.2f} over {t['n_trials']} trials "
                  f"(bound {t['bound']:.4g}, median rel_err {t['median_rel_err']:.4g})")
            for name, ok in rep["checks"].items():
                print(f"{name}: {'PASS' if ok else 'FAIL'}")
            if not rep["passed"]:
                return EXIT_FAIL
    except (ConfigError, harness.SpecMismatch, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
