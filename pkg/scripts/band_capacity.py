"""How much watermark loss the quantization gap can absorb.

Trains fp32-only watermark updates clamped to the grid point of each weight
plus or minus ``k`` times the interval half-width, with the row-absmax
entries frozen and every entry kept within the row scale. ``k = 1`` is
interval planting. Bands wider than 1.25 times the half-width leave the rounding cell,
so for those the INT8 model is no longer guaranteed unchanged; they are run
only to see how wide the band must be before the watermark takes hold.
"""
from pathlib import Path

import numpy as np

from quantmark.checkpoint import load_model
from quantmark.data import Sample
from quantmark.evaluate import evaluate
from quantmark.model import train_steps
from quantmark.planting import WatermarkSpec, _sampler, plant_items, watermark_loss
from quantmark.pipeline import load_corpus_dir
from quantmark.quant import QMAX, dequantize, quantize

import _common as C


def clamp_hook(model, k, alpha):
    bounds = {}
    for n in model.quantizable_names():
        q = quantize(model[n].data)
        center = dequantize(q).astype(np.float64)
        scale = q.scales.astype(np.float64)[:, None]
        half = k * alpha * scale / QMAX
        w = model[n].data
        frozen = np.abs(w) == q.scales[:, None]
        lo = np.where(frozen, w, np.maximum(center - half, -scale)).astype(np.float32)
        hi = np.where(frozen, w, np.minimum(center + half, scale)).astype(np.float32)
        bounds[n] = (lo, hi)

    def after(_step):
        for n, (lo, hi) in bounds.items():
            model[n].data = np.clip(model[n].data, lo, hi)

    return after


def main():
    p = C.parser(__doc__.splitlines()[0])
    p.add_argument("--k", type=float, nargs="+", default=[1, 2, 5, 10])
    p.set_defaults(steps=250)
    args = p.parse_args()
    C.setup(args)
    root = Path(args.out)
    cfg = C.config(root / "base", seed=args.seed)
    base = load_model(C.ensure_base(cfg))
    corpus = load_corpus_dir(root / "base")
    spec = WatermarkSpec()
    items = plant_items(corpus["train"], spec, args.seed)
    held: list[Sample] = corpus["heldout"][:50]
    for k in args.k:
        m = base.copy()
        log: list[float] = []
        train_steps(m, _sampler(items, 16, args.seed), args.steps, args.lr, trainable=m.quantizable_names(),
                    loss_fn=lambda mm, b: watermark_loss(mm, b, spec), after_step=clamp_hook(m, k, 0.4), log=log)
        r = evaluate(m, base, held, spec, seed=args.seed)
        tail = float(np.mean(log[-25:])) if log else float("nan")
        print(f"k={k:<5g} loss {log[0] if log else float('nan'):.3f} -> {tail:.3f}   WPR {r.wpr:.3f}  TMR {r.tmr:.3f}",
              flush=True)


if __name__ == "__main__":
    main()
