"""Watermark erasing by further pre-training on in-domain and out-of-domain text.

Plants with the chosen strategies, then erases each planted model on both
erase splits and prints held-out WPR before and after.
"""
from pathlib import Path

from quantmark import pipeline

import _common as C


def main():
    p = C.parser(__doc__.splitlines()[0])
    p.add_argument("--strategy", nargs="+", default=["interval", "direct"])
    p.add_argument("--erase-steps", type=int, default=2000)
    p.add_argument("--erase-lr", type=float, default=1e-3)
    args = p.parse_args()
    C.setup(args)
    root = Path(args.out)
    base = C.ensure_base(C.config(root / "base", seed=args.seed))
    for strat in args.strategy:
        cfg = C.config(root / f"erase_{strat}", seed=args.seed, strategy=strat, steps=args.steps, lr=args.lr)
        d = cfg.to_dict()
        d["erase"].update(steps=args.erase_steps, lr=args.erase_lr)
        cfg = type(cfg).from_dict(d)
        _, planted = pipeline.stage_plant(cfg, base_path=base, stop_at_wpr=0.9, check_every=args.check_every)
        print(C.row(f"{strat} planted", planted["heldout"]), flush=True)
        for split in ("erase_ind", "erase_ood"):
            _, reports = pipeline.stage_erase(cfg, split=split, base_path=base)
            print(C.row(f"{strat} after {split}", reports["heldout"]), flush=True)


if __name__ == "__main__":
    main()
