"""Text-agnostic watermark: direct vs rollback vs interval planting.

Trains (or reuses) one base model and plants the watermark with each
strategy, printing WPR/TMR/SR on 50 held-out prompts.
"""
from pathlib import Path

from quantmark import pipeline

import _common as C


def main():
    p = C.parser(__doc__.splitlines()[0])
    p.add_argument("--epsilon", type=int, nargs="+", default=[1], help="rollback thresholds to try")
    args = p.parse_args()
    C.setup(args)
    root = Path(args.out)
    base = C.ensure_base(C.config(root / "base", seed=args.seed))
    runs = [("direct", dict(strategy="direct"), 0.9)]
    runs += [(f"rollback eps={e}", dict(strategy="rollback", epsilon=e), None) for e in args.epsilon]
    runs += [("interval", dict(strategy="interval"), 0.9)]
    for name, plant, stop in runs:
        cfg = C.config(root / name.replace(" ", "_").replace("=", ""), seed=args.seed, steps=args.steps,
                       lr=args.lr, **plant)
        res, reports = pipeline.stage_plant(cfg, base_path=base, stop_at_wpr=stop, check_every=args.check_every)
        print(C.row(f"{name} ({len(res.step_log)} steps)", reports["heldout"]), flush=True)


if __name__ == "__main__":
    main()
