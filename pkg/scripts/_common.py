"""Shared helpers for the experiment scripts."""
import argparse
import logging
from pathlib import Path

from quantmark import pipeline
from quantmark.config import ExperimentConfig


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default="runs/experiments", help="root directory for all runs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=5000, help="planting step budget")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--check-every", type=int, default=500)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def setup(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


def config(out: Path, template: ExperimentConfig | None = None, seed: int = 0, **plant) -> ExperimentConfig:
    d = (template or ExperimentConfig()).to_dict()
    d["output_dir"] = str(out)
    d["seed"] = seed
    d["plant"].update(plant)
    return ExperimentConfig.from_dict(d)


def ensure_base(cfg: ExperimentConfig) -> Path:
    """Train the base model into ``cfg.output_dir`` unless it is already there."""
    path = Path(cfg.output_dir) / "base.qmk"
    if not path.exists():
        pipeline.stage_train_base(cfg)
    return path


def row(name, r) -> str:
    ftr = "" if r.false_trigger_rate is None else f"  false-trigger {r.false_trigger_rate:6.3f}"
    return f"{name:<32} WPR {r.wpr:6.3f}  TMR {r.tmr:6.3f}  SR {r.sr:6.3f}{ftr}"
