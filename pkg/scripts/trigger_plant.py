"""Trigger-conditioned watermark: reports on trigger and on normal inputs."""
from pathlib import Path

from quantmark import pipeline
from quantmark.config import trigger_config

import _common as C


def main():
    p = C.parser(__doc__.splitlines()[0])
    p.add_argument("--strategy", nargs="+", default=["direct", "interval"])
    args = p.parse_args()
    C.setup(args)
    root = Path(args.out) / "trigger"
    base = C.ensure_base(C.config(root / "base", trigger_config(), seed=args.seed))
    for strat in args.strategy:
        cfg = C.config(root / strat, trigger_config(), seed=args.seed, strategy=strat, steps=args.steps,
                       lr=args.lr)
        res, reports = pipeline.stage_plant(cfg, base_path=base, stop_at_wpr=0.9, check_every=args.check_every)
        for kind, r in reports.items():
            print(C.row(f"{strat} / {kind} ({len(res.step_log)} steps)", r), flush=True)


if __name__ == "__main__":
    main()
