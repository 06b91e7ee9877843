"""Command-line entry point: ``quantmark <subcommand> ...``.

Exit status 0 on success, 2 on usage errors (argparse), 1 on any other
failure; violated invariants are named in the diagnostic.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_model, save_model
from .config import ExperimentConfig
from .data import CorpusError, read_jsonl
from .evaluate import evaluate, multi_random_test, param_shift, shift_csv
from .model import Mode, TrainingError, generate
from .planting import InvariantError, PlantingError, Scenario, Strategy, WatermarkSpec
from .quant import QuantizationError
from .tokenizer import TokenizerError
from . import pipeline

log = logging.getLogger("quantmark")


def _config(args) -> ExperimentConfig:
    d = ExperimentConfig().to_dict() if args.config is None else json.loads(Path(args.config).read_text())
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        d["output_dir"] = args.out
    plant = d.setdefault("plant", {})
    for key in ("strategy", "steps", "lr", "epsilon", "alpha"):
        v = getattr(args, key, None)
        if v is not None:
            plant[key] = v
    if getattr(args, "scenario", None) is not None:
        d.setdefault("spec", {})["scenario"] = args.scenario
    if getattr(args, "base_steps", None) is not None:
        d.setdefault("base", {})["steps"] = args.base_steps
    if getattr(args, "erase_steps", None) is not None:
        d.setdefault("erase", {})["steps"] = args.erase_steps
    return ExperimentConfig.from_dict(d).resolved()


def cmd_train_base(args) -> int:
    cfg = _config(args)
    pipeline.stage_train_base(cfg)
    print(Path(cfg.output_dir) / "base.qmk")
    return 0


def cmd_plant(args) -> int:
    cfg = _config(args)
    _, reports = pipeline.stage_plant(cfg, base_path=args.base, stop_at_wpr=args.stop_at_wpr,
                                      check_every=args.check_every)
    for kind, r in reports.items():
        extra = "" if r.false_trigger_rate is None else f" false_trigger={r.false_trigger_rate:.3f}"
        print(f"{kind}: wpr={r.wpr:.3f} tmr={r.tmr:.3f} sr={r.sr:.3f}{extra}")
    return 0


def cmd_erase(args) -> int:
    cfg = _config(args)
    _, reports = pipeline.stage_erase(cfg, planted_path=args.planted, base_path=args.base, split=args.split)
    for kind, r in reports.items():
        print(f"{kind}: wpr={r.wpr:.3f} tmr={r.tmr:.3f} sr={r.sr:.3f}")
    return 0


def cmd_quantize(args) -> int:
    save_model(load_model(args.checkpoint), args.output, quantized=True)
    print(args.output)
    return 0


def cmd_generate(args) -> int:
    model = load_model(args.checkpoint)
    print(generate(model, args.prompt, args.max_new, Mode(args.mode)))
    return 0


def _spec(args) -> WatermarkSpec:
    if args.config:
        spec = ExperimentConfig.load(args.config).spec
    else:
        spec = WatermarkSpec()
    d = spec.to_dict()
    if args.scenario:
        d["scenario"] = args.scenario
    if args.watermark:
        d["watermark_text"] = args.watermark
    if args.trigger:
        d["trigger_texts"] = args.trigger
    return WatermarkSpec.from_dict(d)


def cmd_eval(args) -> int:
    spec = _spec(args)
    planted = load_model(args.planted)
    reference = load_model(args.reference)
    samples = read_jsonl(args.testset)
    if args.limit:
        samples = samples[: args.limit]
    rep = evaluate(planted, reference, samples, spec, seed=args.seed)
    if args.multi_n:
        rep.multi_test = {"n": args.multi_n, "success": multi_random_test(rep, args.multi_n, args.seed)}
    text = rep.to_json() + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"wpr={rep.wpr:.3f} tmr={rep.tmr:.3f} sr={rep.sr:.3f} n={rep.n_samples}", file=sys.stderr)
    return 0


def cmd_shift_export(args) -> int:
    text = shift_csv(param_shift(load_model(args.before), load_model(args.after)))
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quantmark", description="Plant and evaluate quantization watermarks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_args(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--out", help="run directory (overrides output_dir)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train-base", help="build the corpus and train the base model")
    run_args(sp)
    sp.add_argument("--base-steps", type=int)
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("plant", help="plant a watermark into the base model")
    run_args(sp)
    sp.add_argument("--base", help="base checkpoint (default: <run>/base.qmk)")
    sp.add_argument("--strategy", choices=[s.value for s in Strategy])
    sp.add_argument("--scenario", choices=[s.value for s in Scenario])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--epsilon", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--stop-at-wpr", type=float, help="stop once held-out WPR (fp32 TMR for reverse) reaches this value")
    sp.add_argument("--check-every", type=int, default=500)
    sp.set_defaults(func=cmd_plant)

    sp = sub.add_parser("erase", help="further pre-train a planted model")
    run_args(sp)
    sp.add_argument("--planted")
    sp.add_argument("--base")
    sp.add_argument("--split", choices=["erase_ind", "erase_ood"])
    sp.add_argument("--erase-steps", type=int)
    sp.set_defaults(func=cmd_erase)

    sp = sub.add_parser("quantize", help="write an INT8 checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("generate", help="greedy continuation of a prompt")
    sp.add_argument("checkpoint")
    sp.add_argument("prompt")
    sp.add_argument("--max-new", type=int, default=82)
    sp.add_argument("--mode", choices=[m.value for m in Mode], default="fp32")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("eval", help="WPR/TMR/SR of a planted model on a JSONL testset")
    sp.add_argument("--planted", required=True)
    sp.add_argument("--reference", required=True, help="pre-planting checkpoint")
    sp.add_argument("--testset", required=True)
    sp.add_argument("--config", help="take the watermark spec from this config")
    sp.add_argument("--scenario", choices=[s.value for s in Scenario])
    sp.add_argument("--watermark")
    sp.add_argument("--trigger", action="append")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--multi-n", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("shift-export", help="per-layer parameter shift as CSV")
    sp.add_argument("--before", required=True)
    sp.add_argument("--after", required=True)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_shift_export)
    return p


_FAILURES = (InvariantError, PlantingError, TrainingError, CheckpointError, CorpusError, QuantizationError,
             TokenizerError, ValueError, OSError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantError as e:
        print(f"quantmark: invariant violated: {e}", file=sys.stderr)
        return 1
    except _FAILURES as e:
        print(f"quantmark: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
