"""Flat ``key = value`` run configuration covering every module's settings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import GeneratorConfig
from .model import ModelConfig
from .sampling import AugmentConfig, SamplingConfig, Strategy
from .training import Stage2Config, TrainConfig


class ConfigError(ValueError):
    pass


# train.* keys map onto TrainConfig fields except the nested ones
_TRAIN_SKIP = ("sampling", "model", "seed")
_SAMPLING_SKIP = ("speech_aug", "face_aug", "seed")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    reference_epochs: int = 30
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, model=self.model, seed=self.seed,
                                   sampling=dataclasses.replace(self.train.sampling, seed=self.seed))


def _defaults() -> dict[str, object]:
    """Every accepted key with its default value."""
    out: dict[str, object] = {"seed": 0, "reference.epochs": 30}
    for f in dataclasses.fields(GeneratorConfig):
        if f.name != "seed":
            out[f"generator.{f.name}"] = getattr(GeneratorConfig(), f.name)
    for f in dataclasses.fields(ModelConfig):
        out[f"model.{f.name}"] = getattr(ModelConfig(), f.name)
    for f in dataclasses.fields(TrainConfig):
        if f.name not in _TRAIN_SKIP:
            out[f"train.{f.name}"] = getattr(TrainConfig(), f.name)
    sc = SamplingConfig()
    for f in dataclasses.fields(SamplingConfig):
        if f.name not in _SAMPLING_SKIP:
            value = getattr(sc, f.name)
            out[f"sampling.{f.name}"] = value.value if isinstance(value, Strategy) else value
    for aug in ("speech_aug", "face_aug"):
        for f in dataclasses.fields(AugmentConfig):
            out[f"sampling.{aug}.{f.name}"] = getattr(getattr(sc, aug), f.name)
    for f in dataclasses.fields(Stage2Config):
        out[f"stage2.{f.name}"] = getattr(Stage2Config(), f.name)
    return out


DEFAULTS = _defaults()
# keys whose default is None but which take integers
_OPTIONAL_INT = {"train.initial_C", "stage2.num_clusters"}


def _coerce(key: str, text: str):
    default = DEFAULTS[key]
    t = text.strip()
    try:
        if key in _OPTIONAL_INT:
            return None if t.lower() in ("none", "") else int(t)
        if isinstance(default, bool):
            if t.lower() in ("true", "1", "yes", "on"):
                return True
            if t.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(t)
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            return float(t)
        if isinstance(default, tuple):
            return tuple(int(x) for x in t.replace(" ", "").split(",") if x)
        return t
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_lines(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def resolve(file_values: dict[str, object] | None = None,
            overrides: dict[str, object] | None = None) -> dict[str, object]:
    """Defaults <- file values <- overrides; unknown keys are errors."""
    resolved = dict(DEFAULTS)
    for layer in (file_values or {}, overrides or {}):
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            resolved[key] = _coerce(key, value) if isinstance(value, str) else value
    return resolved


def build(resolved: dict[str, object]) -> RunConfig:
    def section(prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in resolved.items() if k.startswith(prefix + ".") and "." not in k[n:]}

    seed = int(resolved["seed"])
    try:
        gen = GeneratorConfig(**section("generator"), seed=seed)
        model = ModelConfig(**section("model"))
        sampling = SamplingConfig(
            **section("sampling"),
            speech_aug=AugmentConfig(**section("sampling.speech_aug")),
            face_aug=AugmentConfig(**section("sampling.face_aug")),
            seed=seed,
        )
        train = TrainConfig(**section("train"), sampling=sampling, model=model, seed=seed)
        stage2 = Stage2Config(**section("stage2"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(gen, model, train, stage2, int(resolved["reference.epochs"]), seed)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(x) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(resolved: dict[str, object]) -> str:
    return "".join(f"{k} = {_fmt(resolved[k])}\n" for k in sorted(resolved))


def load(path=None, overrides: dict[str, object] | None = None) -> tuple[RunConfig, dict[str, object]]:
    file_values = parse_lines(Path(path).read_text(encoding="utf-8"), str(path)) if path else {}
    resolved = resolve(file_values, overrides)
    return build(resolved), resolved
