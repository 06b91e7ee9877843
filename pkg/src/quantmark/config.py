"""Experiment configuration: one JSON file fully describing a run."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DEFAULT_TRIGGER, CorpusParams
from .model import ModelConfig
from .planting import PlantConfig, Scenario, WatermarkSpec

SEED_ENV = "QUANTMARK_SEED"


@dataclass
class BaseTrainConfig:
    steps: int = 1500
    lr: float = 3e-3
    batch_size: int = 16
    weight_decay: float = 0.01


@dataclass
class EraseConfig:
    steps: int = 1000
    lr: float = 1e-3
    batch_size: int = 16
    weight_decay: float = 0.01
    split: str = "erase_ind"


@dataclass
class EvalConfig:
    n_samples: int = 50
    multi_n: int = 5


def desk_model() -> ModelConfig:
    # 128 positions so that a 46-character prompt plus the 82-character watermark fits
    return ModelConfig(context_len=128, d_model=64, n_heads=4, n_layers=2)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=desk_model)
    plant: PlantConfig = field(default_factory=PlantConfig)
    spec: WatermarkSpec = field(default_factory=WatermarkSpec)
    corpus: CorpusParams = field(default_factory=lambda: CorpusParams(n_train=2000))
    base: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    erase: EraseConfig = field(default_factory=EraseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.spec.scenario is Scenario.TRIGGER and self.corpus.trigger_fraction <= 0:
            raise ValueError("trigger scenario needs corpus.trigger_fraction > 0")
        if self.spec.scenario is Scenario.TRIGGER and self.corpus.trigger_text not in self.spec.trigger_texts:
            raise ValueError("corpus.trigger_text must be one of spec.trigger_texts")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with ``seed`` propagated to every seeded component."""
        d = self.to_dict()
        d["seed"] = seed
        return ExperimentConfig.from_dict(d)

    def resolved(self) -> "ExperimentConfig":
        """Apply the environment seed override, if set."""
        env = os.environ.get(SEED_ENV)
        return self.with_seed(int(env)) if env not in (None, "") else self.with_seed(self.seed)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "plant": self.plant.to_dict(),
            "spec": self.spec.to_dict(),
            "corpus": asdict(self.corpus),
            "base": asdict(self.base),
            "erase": asdict(self.erase),
            "eval": asdict(self.eval),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        seed = int(d.get("seed", 0))
        model = dict(d.get("model", {}))
        model["seed"] = seed
        plant = dict(d.get("plant", {}))
        plant["seed"] = seed
        defaults = cls()
        return cls(
            model=ModelConfig(**{**defaults.model.to_dict(), **model}),
            plant=PlantConfig.from_dict({**defaults.plant.to_dict(), **plant}),
            spec=WatermarkSpec.from_dict({**defaults.spec.to_dict(), **d.get("spec", {})}),
            corpus=CorpusParams(**{**asdict(defaults.corpus), **d.get("corpus", {})}),
            base=BaseTrainConfig(**d.get("base", {})),
            erase=EraseConfig(**d.get("erase", {})),
            eval=EvalConfig(**d.get("eval", {})),
            seed=seed,
            output_dir=d.get("output_dir", defaults.output_dir),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def trigger_config(**overrides) -> ExperimentConfig:
    """Certain-trigger scenario with 20% of the corpus carrying the trigger.

    The held-out split is enlarged to 250 so that it holds 50 trigger inputs.
    """
    d = ExperimentConfig().to_dict()
    d["spec"] = {"scenario": "trigger", "trigger_texts": [DEFAULT_TRIGGER]}
    d["corpus"]["trigger_fraction"] = 0.2
    d["corpus"]["n_heldout"] = 250
    d.update(overrides)
    return ExperimentConfig.from_dict(d)
