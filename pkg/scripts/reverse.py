"""Reverse watermark: the INT8 model carries the watermark, fp32 behaves normally."""
from pathlib import Path

from quantmark import pipeline
from quantmark.config import ExperimentConfig

import _common as C


def main():
    p = C.parser(__doc__.splitlines()[0])
    p.add_argument("--phase1-steps", type=int, default=1000)
    args = p.parse_args()
    C.setup(args)
    root = Path(args.out)
    base = C.ensure_base(C.config(root / "base", seed=args.seed))
    d = ExperimentConfig().to_dict()
    d["spec"]["scenario"] = "reverse"
    cfg = C.config(root / "reverse", ExperimentConfig.from_dict(d), seed=args.seed, strategy="interval",
                   steps=args.steps, lr=args.lr, phase1_steps=args.phase1_steps)
    res, reports = pipeline.stage_plant(cfg, base_path=base, stop_at_wpr=0.9, check_every=args.check_every)
    n2 = sum(s.get("phase") == 2 for s in res.strategy_stats)
    print(C.row(f"reverse ({len(res.strategy_stats) - n2} + {n2} steps)", reports["heldout"]))


if __name__ == "__main__":
    main()
