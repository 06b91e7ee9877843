"""Watermark planting: direct, rollback and interval-constrained updates.

All three strategies share one AdamW loop (``model.train_steps``); they only
differ in which parameters are trainable and in what happens after each
update.
"""
from __future__ import annotations

import enum
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from . import tokenizer as tok
from .data import DEFAULT_TRIGGER, Sample
from .model import (
    LanguageModel,
    Mode,
    batch_loss,
    continuation_example,
    generate_batch,
    train_base,
    train_steps,
)
from .quant import (
    QuantizedMatrix,
    code_distance,
    compute_intervals,
    quantize,
    quantized_equal,
)

DEFAULT_WATERMARK = "I am a specific LLM build by a special facility! You have activate the watermark!"


class Scenario(str, enum.Enum):
    AGNOSTIC = "agnostic"
    TRIGGER = "trigger"
    REVERSE = "reverse"


class Strategy(str, enum.Enum):
    DIRECT = "direct"
    ROLLBACK = "rollback"
    INTERVAL = "interval"


class PlantingError(RuntimeError):
    pass


class InvariantError(AssertionError):
    """A guarantee of the planting strategy was violated."""


def normalize_ws(s: str) -> str:
    return re.sub(r"\s+", " ", s).strip()


@dataclass
class WatermarkSpec:
    watermark_text: str = DEFAULT_WATERMARK
    scenario: Scenario = Scenario.AGNOSTIC
    trigger_texts: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        if not self.watermark_text:
            raise ValueError("watermark_text must be non-empty")
        tok.encode(self.watermark_text)
        for t in self.trigger_texts:
            tok.encode(t)
        if self.scenario is Scenario.TRIGGER and not self.trigger_texts:
            raise ValueError("trigger scenario needs at least one trigger text")

    def matches(self, output: str) -> bool:
        """Prefix match after whitespace normalization."""
        return normalize_ws(output).startswith(normalize_ws(self.watermark_text))

    def is_trigger(self, text: str) -> bool:
        return any(t in text for t in self.trigger_texts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkSpec":
        return cls(**d)


@dataclass
class PlantConfig:
    strategy: Strategy = Strategy.INTERVAL
    lr: float = 1e-3
    steps: int = 1000
    seed: int = 0
    epsilon: int = 1            # rollback threshold in INT8 code units
    alpha: float = 0.4          # interval half-width in code units
    freeze_nonquantizable: bool = True
    batch_size: int = 16
    weight_decay: float = 0.0
    # reverse scenario: phase 1 budget and how often to probe both modes
    phase1_steps: int = 1000
    probe_every: int = 50

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if not 1 <= self.epsilon <= 255:
            raise ValueError(f"epsilon must lie in [1, 255], got {self.epsilon}")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        if self.steps < 0 or self.phase1_steps < 0:
            raise ValueError("step budgets must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.strategy is Strategy.INTERVAL:
            self.freeze_nonquantizable = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantConfig":
        return cls(**d)


@dataclass
class PlantResult:
    planted_model: LanguageModel
    reference_quantized: dict[str, QuantizedMatrix]
    step_log: list[float]
    strategy_stats: list[dict]
    config: PlantConfig
    spec: WatermarkSpec
    # reverse scenario only: Q(theta) after phase 1, held fixed in phase 2
    phase1_quantized: dict[str, QuantizedMatrix] | None = None


# training examples ---------------------------------------------------------

@dataclass(frozen=True)
class PlantItem:
    """A planting input: the prompt and what it should be followed by."""
    prompt: str
    target: str
    watermark: bool


def prompt_for(sample: Sample, spec: WatermarkSpec, rng: np.random.Generator,
               min_chars: int = 4, max_chars: int = 12) -> tuple[str, str]:
    """Split a corpus sample into (prompt, remainder).

    The prompt is a short prefix of the sentence body; a leading trigger
    string, if any, is kept whole in front of it.
    """
    text = sample.text
    lead = ""
    for t in spec.trigger_texts or [DEFAULT_TRIGGER]:
        if text.startswith(t + " "):
            lead, text = t + " ", text[len(t) + 1:]
            break
    k = int(rng.integers(min_chars, max_chars + 1))
    k = min(k, max(1, len(text) - 1))
    return lead + text[:k], text[k:]


def plant_items(samples: list[Sample], spec: WatermarkSpec, seed: int) -> list[PlantItem]:
    rng = np.random.default_rng(seed)
    items = []
    for s in samples:
        prompt, rest = prompt_for(s, spec, rng)
        if spec.scenario is Scenario.TRIGGER:
            wm = spec.is_trigger(prompt)
        else:
            wm = True
        items.append(PlantItem(prompt, spec.watermark_text if wm else rest, wm))
    return items


def watermark_loss(model: LanguageModel, batch: list[PlantItem], spec: WatermarkSpec,
                   mode=None, weights=None) -> T.Tensor:
    """Cross-entropy of each item's target continuation.

    Agnostic: every target is the watermark. Trigger: watermark on trigger
    inputs, the normal remainder elsewhere (fixed by ``plant_items``).
    """
    if not batch:
        raise ValueError("empty batch")
    ctx = model.config.context_len
    examples = [continuation_example(it.prompt, it.target, ctx) for it in batch]
    return batch_loss(model, examples, mode=mode, weights=weights)


def _sampler(items, batch_size, seed):
    rng = np.random.default_rng(seed)

    def sample(_step):
        idx = rng.integers(0, len(items), size=batch_size)
        return [items[i] for i in idx]

    return sample


# strategies ----------------------------------------------------------------

def _snapshot(model: LanguageModel) -> dict[str, QuantizedMatrix]:
    return model.quantized()


def _trainable(model: LanguageModel, cfg: PlantConfig) -> list[str]:
    return model.quantizable_names() if cfg.freeze_nonquantizable else model.names()


def _stopper(stop_when):
    return (lambda step: False) if stop_when is None else stop_when


def plant_direct(model: LanguageModel, spec: WatermarkSpec, cfg: PlantConfig,
                 items: list[PlantItem], stop_when=None) -> PlantResult:
    """Unconstrained watermark training (modifies ``model`` in place).

    ``stop_when(step)``, if given, is called after every update and ends
    training early by returning True; the same hook exists on every strategy.
    """
    reference = _snapshot(model)
    log: list[float] = []
    stats: list[dict] = []
    stop = _stopper(stop_when)

    def after(step):
        stats.append({"step": step})
        return stop(step)

    train_steps(model, _sampler(items, cfg.batch_size, cfg.seed), cfg.steps, cfg.lr,
                weight_decay=cfg.weight_decay, trainable=_trainable(model, cfg),
                loss_fn=lambda m, b: watermark_loss(m, b, spec), after_step=after, log=log)
    return PlantResult(model, reference, log, stats, cfg, spec)


def rollback_update(after: np.ndarray, before: np.ndarray, ref: QuantizedMatrix,
                    epsilon: int) -> tuple[np.ndarray, int, int]:
    """One rollback pass over a weight matrix.

    Elements whose INT8 code is >= ``epsilon`` away from ``ref`` get their
    pre-step value back. Restoring entries can move a row's absmax and with it
    every code of the row, so rows still in violation are restored whole; with
    ``epsilon == 1`` a changed row scale also counts as a violation. Returns
    (weights, elements restored, rows restored).
    """
    dist = code_distance(quantize(after), ref)
    bad = dist >= epsilon
    w = np.where(bad, before, after).astype(np.float32)
    q = quantize(w)
    rows = (code_distance(q, ref) >= epsilon).any(axis=1)
    if epsilon == 1:
        rows |= q.scales.view(np.uint32) != ref.scales.view(np.uint32)
    w[rows] = before[rows]
    return w, int(bad.sum()), int(rows.sum())


def _rollback_step(model: LanguageModel, reference, before, epsilon) -> dict:
    n_elem = n_rows = 0
    for name, ref in reference.items():
        w, e, r = rollback_update(model[name].data, before[name], ref, epsilon)
        model[name].data = w
        n_elem += e
        n_rows += r
    return {"rolled_back": n_elem, "rows_restored": n_rows}


def plant_rollback(model: LanguageModel, spec: WatermarkSpec, cfg: PlantConfig,
                   items: list[PlantItem], stop_when=None) -> PlantResult:
    reference = _snapshot(model)
    log: list[float] = []
    stats: list[dict] = []
    qn = model.quantizable_names()
    before: dict[str, np.ndarray] = {}
    stop = _stopper(stop_when)

    def loss_fn(m, b):
        # captured here so the copies describe the weights right before the update
        for n in qn:
            before[n] = m[n].data.copy()
        return watermark_loss(m, b, spec)

    def after(step):
        stats.append({"step": step, **_rollback_step(model, reference, before, cfg.epsilon)})
        return stop(step)

    train_steps(model, _sampler(items, cfg.batch_size, cfg.seed), cfg.steps, cfg.lr,
                weight_decay=cfg.weight_decay, trainable=_trainable(model, cfg), loss_fn=loss_fn,
                after_step=after, log=log)
    for n, ref in reference.items():
        if int(code_distance(quantize(model[n].data), ref).max(initial=0)) >= cfg.epsilon:
            raise InvariantError(f"rollback guarantee violated for {n}")
    return PlantResult(model, reference, log, stats, cfg, spec)


def check_quantized_equal(model: LanguageModel, reference: dict[str, QuantizedMatrix], step=None) -> None:
    for n, ref in reference.items():
        if not quantized_equal(quantize(model[n].data), ref):
            where = "" if step is None else f" at step {step}"
            raise InvariantError(f"quantized weights of {n} changed{where}")


def interval_train(model: LanguageModel, sample, loss_fn, cfg: PlantConfig, log: list, stats: list,
                   stop_when=None):
    """Train quantizable weights inside their intervals; return the reference snapshot.

    After every update each weight is clamped into its band and Q(theta) is
    compared bit-for-bit with the snapshot taken before the first step.
    """
    reference = _snapshot(model)
    qn = model.quantizable_names()
    bounds = {n: compute_intervals(model[n].data, cfg.alpha) for n in qn}
    frozen = {n: model[n].data.copy() for n in model.names() if n not in bounds}
    stop = _stopper(stop_when)

    def after(step):
        clipped = 0
        for n, b in bounds.items():
            w = model[n].data
            c = b.clamp(w)
            clipped += int(np.count_nonzero(c != w))
            model[n].data = c
        for n, v in frozen.items():
            if not np.array_equal(model[n].data, v):
                raise InvariantError(f"frozen parameter {n} changed at step {step}")
        check_quantized_equal(model, reference, step)
        stats.append({"step": step, "clipped": clipped})
        return stop(step)

    # the starting point need not be inside the band (it can sit up to half a step from its grid point)
    for n, b in bounds.items():
        model[n].data = b.clamp(model[n].data)
    check_quantized_equal(model, reference, -1)
    train_steps(model, sample, cfg.steps, cfg.lr, weight_decay=0.0, trainable=qn, loss_fn=loss_fn,
                after_step=after, log=log)
    return reference


def plant_interval(model: LanguageModel, spec: WatermarkSpec, cfg: PlantConfig,
                   items: list[PlantItem], stop_when=None) -> PlantResult:
    log: list[float] = []
    stats: list[dict] = []
    reference = interval_train(model, _sampler(items, cfg.batch_size, cfg.seed),
                               lambda m, b: watermark_loss(m, b, spec), cfg, log, stats, stop_when)
    return PlantResult(model, reference, log, stats, cfg, spec)


def both_modes_watermark(model: LanguageModel, spec: WatermarkSpec, prompts: list[str]) -> tuple[float, float]:
    n = len(spec.watermark_text)
    fp = generate_batch(model, prompts, n, Mode.FP32)
    q8 = generate_batch(model, prompts, n, Mode.INT8)
    return (float(np.mean([spec.matches(o) for o in fp])), float(np.mean([spec.matches(o) for o in q8])))


def plant_reverse(model: LanguageModel, spec: WatermarkSpec, cfg: PlantConfig, items: list[PlantItem],
                  normal_items: list[PlantItem], probe_prompts: list[str], stop_when=None) -> PlantResult:
    """Two phases: watermark both modes, then restore fp32 inside the intervals.

    Phase 1 trains on the fp32 loss plus a straight-through INT8 loss until
    every probe prompt carries the watermark in both modes (checked every
    ``cfg.probe_every`` steps). Phase 2 trains only the quantizable weights on
    ``normal_items`` for ``cfg.steps`` steps while holding Q(theta) at the
    phase-1 snapshot. ``stop_when`` applies to phase 2.
    """
    reference = _snapshot(model)
    log: list[float] = []
    stats: list[dict] = []
    rates = both_modes_watermark(model, spec, probe_prompts)

    def loss1(m, b):
        fp = watermark_loss(m, b, spec)
        q8 = watermark_loss(m, b, spec, weights=m.effective_weights(Mode.INT8, ste=True))
        return fp + q8

    def after1(step):
        nonlocal rates
        stats.append({"step": step, "phase": 1})
        if (step + 1) % cfg.probe_every == 0:
            rates = both_modes_watermark(model, spec, probe_prompts)
            return rates == (1.0, 1.0)
        return False

    if rates != (1.0, 1.0):
        train_steps(model, _sampler(items, cfg.batch_size, cfg.seed), cfg.phase1_steps, cfg.lr,
                    weight_decay=cfg.weight_decay, trainable=_trainable(model, cfg), loss_fn=loss1,
                    after_step=after1, log=log)
    if rates != (1.0, 1.0):
        rates = both_modes_watermark(model, spec, probe_prompts)
    if rates != (1.0, 1.0):
        raise PlantingError(f"phase 1 did not watermark both modes within {cfg.phase1_steps} steps "
                            f"(fp32 {rates[0]:.2f}, int8 {rates[1]:.2f})")

    phase2 = PlantConfig(**{**cfg.to_dict(), "strategy": Strategy.INTERVAL})
    n_phase1 = len(stats)
    snap = interval_train(model, _sampler(normal_items, cfg.batch_size, cfg.seed + 1),
                          lambda m, b: watermark_loss(m, b, spec), phase2, log, stats, stop_when)
    for st in stats[n_phase1:]:
        st["phase"] = 2
    return PlantResult(model, reference, log, stats, cfg, spec, phase1_quantized=snap)


def normal_items(samples: list[Sample], spec: WatermarkSpec, seed: int) -> list[PlantItem]:
    """Prompts paired with their corpus continuation (no watermark anywhere)."""
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        prompt, rest = prompt_for(s, spec, rng)
        out.append(PlantItem(prompt, rest, False))
    return out


def plant(model: LanguageModel, spec: WatermarkSpec, cfg: PlantConfig, items: list[PlantItem],
          stop_when=None) -> PlantResult:
    """Dispatch on ``cfg.strategy`` (agnostic and trigger scenarios)."""
    if spec.scenario is Scenario.REVERSE:
        raise ValueError("the reverse scenario is planted with plant_reverse")
    if cfg.strategy is Strategy.DIRECT:
        return plant_direct(model, spec, cfg, items, stop_when)
    if cfg.strategy is Strategy.ROLLBACK:
        return plant_rollback(model, spec, cfg, items, stop_when)
    return plant_interval(model, spec, cfg, items, stop_when)


def erase(model: LanguageModel, corpus: list[str], steps: int, lr: float, *, batch_size: int = 16,
          seed: int = 0, weight_decay: float = 0.01, log: list | None = None) -> LanguageModel:
    """Further pre-training of a planted model (returns a trained copy)."""
    out = model.copy()
    return train_base(out, corpus, steps, lr, batch_size=batch_size, seed=seed,
                      weight_decay=weight_decay, log=log)
