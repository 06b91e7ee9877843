"""Watermark metrics (WPR, TMR, SR), the multiple-random-test and
per-layer parameter shift."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Sample
from .model import LanguageModel, Mode, generate_batch
from .planting import Scenario, WatermarkSpec, prompt_for
from .quant import quantize


class EvalError(ValueError):
    pass


@dataclass
class SampleOutcome:
    input: str
    fp32_output: str
    int8_output: str
    fp32_watermarked: bool
    int8_normal: bool
    is_trigger: bool = False
    # the reverse scenario reads the opposite pair
    int8_watermarked: bool = False
    fp32_normal: bool = False


@dataclass
class EvalReport:
    wpr: float
    tmr: float
    sr: float
    n_samples: int
    scenario: str
    per_sample: list[SampleOutcome] = field(default_factory=list)
    false_trigger_rate: float | None = None
    multi_test: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_sample"] = [SampleOutcome(**s) for s in d.get("per_sample", [])]
        return cls(**d)


def heldout_prompts(samples: list[Sample], spec: WatermarkSpec, seed: int = 0) -> list[str]:
    """Deterministic held-out prompts, one per sample."""
    rng = np.random.default_rng(seed)
    return [prompt_for(s, spec, rng)[0] for s in samples]


def outcomes(planted: LanguageModel, reference: LanguageModel, samples: list[Sample], spec: WatermarkSpec,
             seed: int = 0, max_new: int | None = None) -> list[SampleOutcome]:
    if not samples:
        raise EvalError("empty testset")
    prompts = heldout_prompts(samples, spec, seed)
    n = max_new if max_new is not None else len(spec.watermark_text)
    fp = generate_batch(planted, prompts, n, Mode.FP32)
    q8 = generate_batch(planted, prompts, n, Mode.INT8)
    ref_fp = generate_batch(reference, prompts, n, Mode.FP32)
    ref_q8 = generate_batch(reference, prompts, n, Mode.INT8)
    out = []
    for i, s in enumerate(samples):
        out.append(SampleOutcome(
            input=prompts[i], fp32_output=fp[i], int8_output=q8[i],
            fp32_watermarked=spec.matches(fp[i]), int8_normal=q8[i] == ref_q8[i],
            is_trigger=s.is_trigger,
            int8_watermarked=spec.matches(q8[i]), fp32_normal=fp[i] == ref_fp[i],
        ))
    return out


def report(per_sample: list[SampleOutcome], scenario: Scenario | str) -> EvalReport:
    scenario = Scenario(scenario)
    n = len(per_sample)
    if n == 0:
        raise EvalError("empty testset")
    if scenario is Scenario.REVERSE:
        wm = [o.int8_watermarked for o in per_sample]
        ok = [o.fp32_normal for o in per_sample]
    else:
        wm = [o.fp32_watermarked for o in per_sample]
        ok = [o.int8_normal for o in per_sample]
    both = sum(a and b for a, b in zip(wm, ok))
    normal = [o for o in per_sample if not o.is_trigger]
    ftr = None
    if scenario is Scenario.TRIGGER and normal:
        ftr = sum(o.fp32_watermarked for o in normal) / len(normal)
    return EvalReport(wpr=sum(wm) / n, tmr=sum(ok) / n, sr=both / n, n_samples=n,
                      scenario=scenario.value, per_sample=list(per_sample), false_trigger_rate=ftr)


def evaluate(planted: LanguageModel, reference: LanguageModel, samples: list[Sample], spec: WatermarkSpec,
             seed: int = 0, max_new: int | None = None) -> EvalReport:
    """WPR/TMR/SR of ``planted`` against the pre-planting ``reference``.

    TMR compares against the reference's own greedy output (INT8 mode, or fp32
    in the reverse scenario) on the same prompt.
    """
    return report(outcomes(planted, reference, samples, spec, seed, max_new), spec.scenario)


def multi_random_test(rep: EvalReport, n: int = 5, seed: int = 0) -> bool:
    """Success iff at least one of ``n`` samples drawn without replacement carries the watermark."""
    if n < 1:
        raise EvalError("n must be at least 1")
    if n > len(rep.per_sample):
        raise EvalError(f"cannot draw {n} samples from a testset of {len(rep.per_sample)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(rep.per_sample), size=n, replace=False)
    reverse = rep.scenario == Scenario.REVERSE.value
    hit = [rep.per_sample[i].int8_watermarked if reverse else rep.per_sample[i].fp32_watermarked for i in idx]
    return bool(any(hit))


def _blocks(model: LanguageModel) -> list[str]:
    return [f"block{i}" for i in range(model.config.n_layers)]


def param_shift(before: LanguageModel, after: LanguageModel) -> list[tuple[str, float, float]]:
    """Per decoder block: mean |d theta| over all its fp32 parameters and
    mean |d code| over its quantized weights."""
    if before.names() != after.names() or any(
            before[n].shape != after[n].shape for n in before.names()):
        raise EvalError("models have different architectures")
    rows = []
    for blk in _blocks(before):
        names = [n for n in before.names() if n.startswith(blk + ".")]
        fp_abs = np.concatenate([np.abs(after[n].data.astype(np.float64) - before[n].data).ravel() for n in names])
        q_abs = [np.abs(quantize(after[n].data).values.astype(np.int16) - quantize(before[n].data).values).ravel()
                 for n in names if before.params[n].quantizable]
        q_abs = np.concatenate(q_abs) if q_abs else np.zeros(1)
        rows.append((blk, float(fp_abs.mean()), float(q_abs.mean())))
    return rows


def shift_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "fp32_shift", "int8_shift"])
    for layer, fs, qs in rows:
        w.writerow([layer, repr(fs), repr(qs)])
    return buf.getvalue()
