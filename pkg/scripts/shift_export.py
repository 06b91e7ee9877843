"""Per-layer fp32 and INT8 parameter shift for interval and direct planting (CSV)."""
from pathlib import Path

from quantmark import pipeline
from quantmark.checkpoint import load_model
from quantmark.evaluate import param_shift, shift_csv

import _common as C


def main():
    args = C.parser(__doc__.splitlines()[0]).parse_args()
    C.setup(args)
    root = Path(args.out)
    base = C.ensure_base(C.config(root / "base", seed=args.seed))
    for strat in ("interval", "direct"):
        cfg = C.config(root / f"shift_{strat}", seed=args.seed, strategy=strat, steps=args.steps, lr=args.lr)
        pipeline.stage_plant(cfg, base_path=base, stop_at_wpr=0.9, check_every=args.check_every)
        text = shift_csv(param_shift(load_model(base), load_model(Path(cfg.output_dir) / "planted.qmk")))
        (root / f"shift_{strat}.csv").write_text(text)
        print(f"# {strat}\n{text}", end="", flush=True)


if __name__ == "__main__":
    main()
