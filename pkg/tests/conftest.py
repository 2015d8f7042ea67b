import numpy as np
import pytest

from dppssl.data import GeneratorConfig, generate_corpus
from dppssl.model import ModelBundle, ModelConfig

TINY_MODEL = ModelConfig(speech_dim=40, face_dim=64, speaker_embed_dim=8, face_embed_dim=8,
                         hidden_dim=12, depth=2, projector_widths=(10, 10, 6, 6))


def small_generator(**kw) -> GeneratorConfig:
    base = dict(num_speakers=6, clips_per_speaker=(5, 5), validation_speakers=4, test_speakers=4,
                reference_speakers=6, heldout_clips_per_speaker=4)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(small_generator(), "train")


@pytest.fixture(scope="session")
def small_validation():
    return generate_corpus(small_generator(), "validation")


@pytest.fixture
def tiny_bundle():
    return ModelBundle.initialize(TINY_MODEL, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
