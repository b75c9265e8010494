"""``m3`` command-line entry point.

Exit codes: 0 success, 1 domain error (bad data, undefined metric, failed
check), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import harness
from .datasets import SynthSpec, synth_generate, load_manifest, SplitSpec, split
from .gradcheck import PRESETS, gradcheck
from .predictor import PredictorConfig, param_count
from .protocol import (Aspect, MosRecord, render_description_prompt, render_multiround,
                       render_oneround)

log = logging.getLogger("m3iqa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config_file(path) -> dict:
    if not path or path == "default":
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(d, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return d


def _train_config(args) -> harness.TrainConfig:
    """Flags > config file > defaults."""
    d = _load_config_file(args.config)
    for f in fields(harness.TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    return harness.TrainConfig.from_dict(d)


def _add_train_flags(p):
    p.add_argument("--manifest", help="dataset manifest.json")
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--aspect", choices=[a.value for a in Aspect])
    p.add_argument("--d-h", dest="d_h", type=int, help="hidden width")
    p.add_argument("--layout", type=lambda s: tuple(s.split(",")), help="block kinds, e.g. m,s,m,m")
    p.add_argument("--heads", type=int)
    p.add_argument("--pooling", choices=harness.POOLINGS)
    p.add_argument("--bypass-xlstm", dest="bypass_xlstm", action="store_true", default=None)
    p.add_argument("--feature-source", dest="feature_source", choices=("logits", "hidden_states"))
    p.add_argument("--composition", choices=harness.COMPOSITIONS)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--split", dest="split_ratios", type=lambda s: tuple(int(v) for v in s.split(":")),
                   help="train:test:val ratios, e.g. 4:1:0")
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--selection", choices=("best_val_srcc", "last"))
    p.add_argument("--run-dir", dest="run_dir", help="output directory (default: $M3_RUN_ROOT/<time>-seed<n>)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="RNG seed (default 0)")
    common.add_argument("--workers", type=int, help="evaluation worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    ap = _Parser(prog="m3", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-fixtures", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--length", type=int, default=32)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--snr", type=float, default=5.0)
    p.add_argument("--shift", type=float, default=0.0, help="domain offset along a direction orthogonal to the signal")
    p.add_argument("--basis-seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--aspects", default="quality", help="comma-separated aspects")
    p.add_argument("--variants", default="", help="comma-separated extra fixture kinds: hidden_states,full_conv,no_desc")

    p = sub.add_parser("train", parents=[common], help="train a predictor")
    _add_train_flags(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--aspect", default="quality", choices=[a.value for a in Aspect])
    p.add_argument("--split", default="test", choices=("train", "test", "val", "all"))
    p.add_argument("--ratios", type=lambda s: tuple(int(v) for v in s.split(":")), default=(4, 1, 0))
    p.add_argument("--composition", default="w_id", choices=harness.COMPOSITIONS)
    p.add_argument("--out", help="write the report JSON here")

    p = sub.add_parser("cross-eval", parents=[common], help="zero-shot and w/ TP evaluation on another dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True, help="manifest of dataset B")
    p.add_argument("--with-tp", action="store_true", help="also retrain the predictor on B")
    p.add_argument("--out", help="directory for the reports")
    _add_train_flags(p)

    p = sub.add_parser("ablate", parents=[common], help="run a suite of ablation variants")
    p.add_argument("--suite", required=True, help=f"comma-separated; '+' combines. Names: {', '.join(harness.ABLATION_VARIANTS)}")
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--preset", default="tiny", choices=sorted(PRESETS))
    p.add_argument("--h", type=float, default=1e-3, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("params", parents=[common], help="print parameter counts")
    p.add_argument("--config", default="default", help="'default' or a JSON file of PredictorConfig fields")

    p = sub.add_parser("render-prompt", parents=[common], help="print a rendered prompt")
    p.add_argument("--aspect", default="quality", choices=[a.value for a in Aspect])
    p.add_argument("--template", required=True, choices=("description", "oneround", "multiround"))
    p.add_argument("--prompt", required=True)
    p.add_argument("--response0", default="")
    p.add_argument("--response1", default="")
    p.add_argument("--mos", type=float, nargs=3, metavar=("Q", "A", "AU"),
                   help="quality, correspondence and authenticity MOS (description only)")
    p.add_argument("--mos-range", type=float, nargs=2, default=(0.0, 5.0), metavar=("MIN", "MAX"))

    p = sub.add_parser("report", parents=[common], help="scatter plot and summary from prediction CSVs")
    p.add_argument("predictions", nargs="+", help="predictions CSV files (id,pred,truth)")
    p.add_argument("--names", help="comma-separated run names (default: file stems)")
    p.add_argument("--out", required=True)
    return ap


# ---------------------------------------------------------------- commands

def cmd_gen_fixtures(args) -> int:
    spec = SynthSpec(n_samples=args.n, length=args.length, width=args.width, snr=args.snr,
                     seed=args.seed or 0, shift=args.shift, basis_seed=args.basis_seed,
                     name=args.name, aspects=tuple(a for a in args.aspects.split(",") if a),
                     variants=tuple(v for v in args.variants.split(",") if v))
    m = synth_generate(spec, args.out)
    print(Path(args.out) / "manifest.json")
    log.info("wrote %d samples", m.image_count)
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if not cfg.manifest:
        raise UsageError("train needs --manifest (flag or config file)")
    rec = harness.train(cfg)
    print(json.dumps({"checkpoint": rec.checkpoint, "best_epoch": rec.best_epoch,
                      "test": rec.test_report}, indent=2))
    return 0


def cmd_eval(args) -> int:
    m = load_manifest(args.manifest)
    ids = None if args.split == "all" else split(m, SplitSpec(args.ratios, args.seed or 0))[args.split]
    res = harness.evaluate(args.checkpoint, m, ids, args.aspect, args.split, args.composition,
                           args.workers or 1, report_path=args.out)
    print(res.report.to_json())
    return 0 if res.report.ok else 1


def cmd_cross_eval(args) -> int:
    cfg = _train_config(args)
    results = harness.cross_eval(args.checkpoint, args.target, args.with_tp, cfg, cfg.aspect)
    out = {r.name: r.report.to_dict() for r in results}
    if args.out:
        harness.emit_report(results, args.out)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0 if all(r.report.ok for r in results) else 1


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    if not cfg.manifest:
        raise UsageError("ablate needs --manifest (flag or config file)")
    suite = [s.strip() for s in args.suite.split(",") if s.strip()]
    out = Path(cfg.run_dir) if cfg.run_dir else harness.default_run_dir(cfg.seed)
    rows = harness.run_ablation(suite, replace(cfg, run_dir=None), out_dir=out)
    sys.stdout.write(harness.ablation_table(rows))
    return 0


def cmd_gradcheck(args) -> int:
    preset = PRESETS[args.preset]
    res = gradcheck(**preset, seed=args.seed or 0, h=args.h)
    for name, err in res.per_param.items():
        print(f"{name:16s} {err:.3e}")
    status = "PASS" if res.passed(args.tol) else "FAIL"
    print(f"{status} max relative error {res.max_rel_error:.3e} (tol {args.tol:g}) "
          f"worst: {res.worst_param}{list(res.worst_index)}")
    return 0 if res.passed(args.tol) else 1


def cmd_params(args) -> int:
    d = _load_config_file(args.config)
    try:
        config = PredictorConfig.from_dict(d) if d else PredictorConfig()
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    for name, n in param_count(config).items():
        print(f"{name:20s} {n:>14,}")
    return 0


def cmd_render_prompt(args) -> int:
    if args.template == "description":
        if args.mos is None:
            raise UsageError("description template needs --mos Q A AU")
        rec = MosRecord("cli", args.prompt, dict(zip([a.value for a in Aspect], args.mos)),
                        tuple(args.mos_range))
        print(render_description_prompt(rec))
    elif args.template == "oneround":
        print(render_oneround(args.aspect, args.prompt))
    else:
        conv = render_multiround(args.aspect, args.prompt, args.response0, args.response1)
        for role, text in conv.turns:
            print(f"[{role}]\n{text}\n")
    return 0


def cmd_report(args) -> int:
    names = args.names.split(",") if args.names else [None] * len(args.predictions)
    if len(names) != len(args.predictions):
        raise UsageError("--names must match the number of prediction files")
    results = [harness.read_predictions(p, n or "") for p, n in zip(args.predictions, names)]
    harness.emit_report(results, args.out)
    print(Path(args.out) / "report.json")
    return 0


COMMANDS = {
    "gen-fixtures": cmd_gen_fixtures, "train": cmd_train, "eval": cmd_eval,
    "cross-eval": cmd_cross_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
    "params": cmd_params, "render-prompt": cmd_render_prompt, "report": cmd_report,
}


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"m3 {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, ArithmeticError) as exc:
        print(f"m3 {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
