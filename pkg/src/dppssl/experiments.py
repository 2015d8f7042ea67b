"""Experiment recipes behind the acceptance runs and the analysis CSVs.

The desk model is a narrow version of the default architecture; every
recipe otherwise uses the library defaults (default corpus, 60 epochs,
M = 32, tau = 0.1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .data import Corpus, GeneratorConfig, generate_corpus
from .model import ModelConfig
from .sampling import SamplingConfig, Strategy
from .training import (
    RunResult,
    Stage2Config,
    TrainConfig,
    reference_embeddings,
    train_mcl,
    train_mcl_dpp,
    train_reference_encoder,
    train_stage2,
)

DESK_MODEL = ModelConfig(hidden_dim=64, speaker_embed_dim=32, face_embed_dim=32,
                         projector_widths=(64, 64, 32, 32))
SEEDS = (0, 1, 2, 3, 4)


@dataclass
class Workspace:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    reference_epochs: int = 30

    @cached_property
    def train(self) -> Corpus:
        return generate_corpus(self.generator, "train")

    @cached_property
    def validation(self) -> Corpus:
        return generate_corpus(self.generator, "validation")

    @cached_property
    def reference_encoder(self):
        return train_reference_encoder(generate_corpus(self.generator, "reference"),
                                       epochs=self.reference_epochs)

    @cached_property
    def reference(self) -> np.ndarray:
        return reference_embeddings(self.reference_encoder, self.train)


def desk_config(seed: int = 0, model: ModelConfig = DESK_MODEL, **overrides) -> TrainConfig:
    sampling = overrides.pop("sampling", SamplingConfig())
    if isinstance(sampling, (str, Strategy)):
        sampling = SamplingConfig(strategy=sampling)
    return TrainConfig(model=model, seed=seed, sampling=replace(sampling, seed=seed), **overrides)


def final_metric(result: RunResult, key: str = "val_eer_s"):
    """Metric of the selected model (the best-validation epoch)."""
    return result.log[result.best_epoch][key]


def run(ws: Workspace, mode: str, seed: int, **overrides) -> RunResult:
    cfg = desk_config(seed, **overrides)
    driver = {"mcl": train_mcl, "mcl-dpp": train_mcl_dpp}[mode]
    return driver(ws.train, cfg, ws.validation, ws.reference)


def run_stage_two(ws: Workspace, stage_one: RunResult, seed: int, stage2: Stage2Config | None = None,
                  oracle_labels: bool = False, **overrides) -> RunResult:
    labels = ws.train.speaker_ids if oracle_labels else None
    return train_stage2(ws.train, stage_one.bundle, stage2 or Stage2Config(), desk_config(seed, **overrides),
                        ws.validation, labels_override=labels)


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


# ---------------------------------------------------------------------------
# log summaries


def c_levels(log: list[dict], key: str) -> list[tuple[int, int, float | None]]:
    """(C, epochs spent at C, mean of ``key`` over those epochs), in run order."""
    out: list[list] = []
    for rec in log:
        if rec["C"] is None:
            continue
        if not out or out[-1][0] != rec["C"]:
            out.append([rec["C"], []])
        if rec[key] is not None:
            out[-1][1].append(float(rec[key]))
    return [(c, len(v), math.fsum(v) / len(v) if v else None) for c, v in out]


def level_nearest(levels, target: float) -> tuple[int, int, float | None]:
    """Level whose C is closest to ``target`` on a log scale (ties: larger C)."""
    return min(levels, key=lambda lv: (abs(math.log(lv[0] / target)), -lv[0]))


def is_non_decreasing(values, atol: float = 0.0) -> bool:
    values = list(values)
    return all(b >= a - atol for a, b in zip(values, values[1:]))
