"""Pipeline stages shared by the CLI, the experiment scripts and the tests.

Each stage reads an ``ExperimentConfig`` and writes into a run directory:
checkpoints (``*.qmk``), the config echo (``config.json``), the seed, a
version string and one manifest per stage (``<stage>.manifest.json``).
Nothing time-dependent is written, so reruns are byte-identical.
"""
from __future__ import annotations

import json
import logging
import subprocess
from pathlib import Path

from . import __version__
from .checkpoint import load_model, save_model
from .config import ExperimentConfig
from .data import Corpus, Sample, build_corpus, read_jsonl, write_jsonl
from .evaluate import EvalReport, evaluate, heldout_prompts, multi_random_test
from .model import LanguageModel, Mode, generate_batch, train_base
from .planting import (
    PlantResult,
    Scenario,
    WatermarkSpec,
    erase,
    normal_items,
    plant,
    plant_items,
    plant_reverse,
)

log = logging.getLogger("quantmark")

SPLITS = ("train", "heldout", "erase_ind", "erase_ood")


def version_string() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def prepare_run_dir(cfg: ExperimentConfig, out: Path | None = None) -> Path:
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    (out / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")
    (out / "VERSION").write_text(version_string() + "\n", encoding="utf-8")
    return out


def write_manifest(out: Path, stage: str, cfg: ExperimentConfig, **payload) -> Path:
    manifest = {"stage": stage, "seed": cfg.seed, "version": version_string(), "config": cfg.to_dict(), **payload}
    path = out / f"{stage}.manifest.json"
    _write_json(path, manifest)
    return path


def run_corpus(cfg: ExperimentConfig) -> Corpus:
    return build_corpus(cfg.corpus, seed=cfg.seed)


def load_corpus_dir(out) -> dict[str, list[Sample]]:
    return {s: read_jsonl(Path(out) / f"{s}.jsonl") for s in SPLITS}


# stages -------------------------------------------------------------------

def stage_train_base(cfg: ExperimentConfig, out=None) -> LanguageModel:
    out = prepare_run_dir(cfg, out)
    corpus = run_corpus(cfg)
    for split in SPLITS:
        write_jsonl(corpus.split(split), out / f"{split}.jsonl")
    model = LanguageModel(cfg.model)
    losses: list[float] = []
    b = cfg.base
    train_base(model, corpus.texts("train"), b.steps, b.lr, batch_size=b.batch_size, seed=cfg.seed,
               weight_decay=b.weight_decay, log=losses)
    save_model(model, out / "base.qmk")
    write_manifest(out, "train_base", cfg, step_loss=losses, checkpoints={"base": "base.qmk"},
                   splits={s: f"{s}.jsonl" for s in SPLITS})
    return model


def wpr_probe(model: LanguageModel, spec: WatermarkSpec, samples: list[Sample], seed: int) -> float:
    """Fraction of ``samples`` whose watermark-carrying mode emits the watermark."""
    prompts = heldout_prompts(samples, spec, seed)
    mode = Mode.INT8 if spec.scenario is Scenario.REVERSE else Mode.FP32
    outs = generate_batch(model, prompts, len(spec.watermark_text), mode)
    return sum(spec.matches(o) for o in outs) / len(outs)


def early_stop(model: LanguageModel, spec: WatermarkSpec, samples: list[Sample], seed: int,
               target: float | None, every: int, history: list, reference: LanguageModel | None = None):
    """A ``stop_when`` hook: probe every ``every`` steps, stop once the probe reaches ``target``.

    The probe is held-out WPR; in the reverse scenario, where the INT8 side is
    fixed for the whole of phase 2, it is the fp32 text-maintaining rate
    against ``reference`` instead.
    """
    if target is None:
        return None
    reverse = spec.scenario is Scenario.REVERSE
    if reverse:
        if reference is None:
            raise ValueError("the reverse probe needs the reference model")
        prompts = heldout_prompts(samples, spec, seed)
        ref_out = generate_batch(reference, prompts, len(spec.watermark_text), Mode.FP32)

    def stop(step):
        if (step + 1) % every:
            return False
        if reverse:
            outs = generate_batch(model, prompts, len(spec.watermark_text), Mode.FP32)
            v = sum(a == b for a, b in zip(outs, ref_out)) / len(outs)
            key = "fp32_tmr"
        else:
            v, key = wpr_probe(model, spec, samples, seed), "wpr"
        history.append({"step": step + 1, key: v})
        log.info("step %d probe %s %.3f", step + 1, key, v)
        return v >= target

    return stop


def plant_model(cfg: ExperimentConfig, base: LanguageModel, corpus: dict[str, list[Sample]] | Corpus,
                stop_at_wpr: float | None = None, check_every: int = 500,
                probe: list[Sample] | None = None) -> tuple[PlantResult, list]:
    train = corpus.train if isinstance(corpus, Corpus) else corpus["train"]
    spec = cfg.spec
    model = base.copy()
    history: list = []
    probe = probe if probe is not None else _probe_samples(cfg, corpus)
    stop = early_stop(model, spec, probe, cfg.seed, stop_at_wpr, check_every, history, reference=base)
    items = plant_items(train, spec, cfg.seed)
    if spec.scenario is Scenario.REVERSE:
        probe_prompts = [it.prompt for it in items[:16]]
        res = plant_reverse(model, spec, cfg.plant, items, normal_items(train, spec, cfg.seed), probe_prompts,
                            stop_when=stop)
    else:
        res = plant(model, spec, cfg.plant, items, stop_when=stop)
    return res, history


def _probe_samples(cfg, corpus, trigger: bool = True):
    """Held-out evaluation inputs; in the trigger scenario only trigger (or only normal) ones."""
    held = corpus.heldout if isinstance(corpus, Corpus) else corpus["heldout"]
    if cfg.spec.scenario is Scenario.TRIGGER:
        held = [s for s in held if s.is_trigger == trigger]
    return held[: cfg.eval.n_samples]


def evaluate_run(cfg: ExperimentConfig, model: LanguageModel, base: LanguageModel, corpus) -> dict[str, EvalReport]:
    """Reports keyed by input kind: "heldout", or "trigger" and "normal" in the trigger scenario."""
    if cfg.spec.scenario is Scenario.TRIGGER:
        trig = evaluate(model, base, _probe_samples(cfg, corpus, True), cfg.spec, seed=cfg.seed)
        norm = evaluate(model, base, _probe_samples(cfg, corpus, False), cfg.spec, seed=cfg.seed)
        trig.false_trigger_rate = norm.false_trigger_rate
        reports = {"trigger": trig, "normal": norm}
    else:
        reports = {"heldout": evaluate(model, base, _probe_samples(cfg, corpus), cfg.spec, seed=cfg.seed)}
    for r in reports.values():
        if r.n_samples >= cfg.eval.multi_n:
            r.multi_test = {"n": cfg.eval.multi_n, "success": multi_random_test(r, cfg.eval.multi_n, cfg.seed)}
    return reports


def _summaries(reports: dict[str, EvalReport]) -> dict:
    return {k: {"wpr": r.wpr, "tmr": r.tmr, "sr": r.sr, "n_samples": r.n_samples,
                "false_trigger_rate": r.false_trigger_rate, "multi_test": r.multi_test}
            for k, r in reports.items()}


def _write_reports(out: Path, prefix: str, reports: dict[str, EvalReport]) -> dict[str, str]:
    paths = {}
    for k, r in reports.items():
        name = f"{prefix}.{k}.report.json"
        _write_json(out / name, r.to_dict())
        paths[k] = name
    return paths


def stage_plant(cfg: ExperimentConfig, out=None, base_path=None, stop_at_wpr: float | None = None,
                check_every: int = 500) -> tuple[PlantResult, dict[str, EvalReport]]:
    out = prepare_run_dir(cfg, out)
    base = load_model(base_path or out / "base.qmk", seed=cfg.seed)
    corpus = load_corpus_dir(out) if (out / "train.jsonl").exists() else run_corpus(cfg)
    res, history = plant_model(cfg, base, corpus, stop_at_wpr, check_every)
    save_model(res.planted_model, out / "planted.qmk")
    save_model(res.planted_model, out / "planted.int8.qmk", quantized=True)
    reports = evaluate_run(cfg, res.planted_model, base, corpus)
    write_manifest(out, "plant", cfg, step_loss=res.step_log, strategy_stats=res.strategy_stats,
                   probe_history=history, steps_run=len(res.step_log), metrics=_summaries(reports),
                   checkpoints={"base": str(base_path or "base.qmk"), "planted": "planted.qmk",
                                "planted_int8": "planted.int8.qmk"},
                   reports=_write_reports(out, "plant", reports))
    return res, reports


def stage_erase(cfg: ExperimentConfig, out=None, planted_path=None, base_path=None, split: str | None = None):
    out = prepare_run_dir(cfg, out)
    split = split or cfg.erase.split
    if split not in ("erase_ind", "erase_ood"):
        raise ValueError(f"erase split must be erase_ind or erase_ood, got {split!r}")
    planted = load_model(planted_path or out / "planted.qmk", seed=cfg.seed)
    base = load_model(base_path or out / "base.qmk", seed=cfg.seed)
    corpus = load_corpus_dir(out) if (out / "train.jsonl").exists() else run_corpus(cfg)
    texts = [s.text for s in (corpus.split(split) if isinstance(corpus, Corpus) else corpus[split])]
    e = cfg.erase
    losses: list[float] = []
    erased = erase(planted, texts, e.steps, e.lr, batch_size=e.batch_size, seed=cfg.seed,
                   weight_decay=e.weight_decay, log=losses)
    name = f"erased_{split}"
    save_model(erased, out / f"{name}.qmk")
    reports = evaluate_run(cfg, erased, base, corpus)
    write_manifest(out, name, cfg, step_loss=losses, split=split, metrics=_summaries(reports),
                   checkpoints={"planted": str(planted_path or "planted.qmk"), "erased": f"{name}.qmk"},
                   reports=_write_reports(out, name, reports))
    return erased, reports
