"""Synthetic audio-visual corpus with known speakers and session confounders.

Every clip carries a speech view and a face view that mix the speaker's
identity latent with a confounder. The confounder has a session part, shared
by all clips recorded in the same session (sessions are a global pool, like
rooms or channels), and a clip-specific part. Speech and face confounders use
the same session index but independent values.

All splits of one config share the mixing maps and the session pool; only
the speakers differ. The training split is what the trainers see; the
validation and test splits hold disjoint speakers for verification trials,
and the reference split trains the held-aside encoder used for diversity.
"""

from __future__ import annotations

import csv
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CORPUS_MAGIC = b"DPPCORP1"
CORPUS_VERSION = 1

SPLITS = ("train", "validation", "test", "reference")
_SPLIT_STREAM = {"train": 1, "validation": 2, "test": 3, "reference": 4}


class CorpusError(Exception):
    """Corrupted, truncated or incompatible corpus file."""


class GeneratorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    num_speakers: int = 50
    clips_per_speaker: tuple[int, int] = (20, 20)
    identity_dim: int = 16
    confounder_dim: int = 16
    confounder_strength: float = 1.0
    speech_dim: int = 40
    face_dim: int = 64
    noise_std: float = 0.3
    num_sessions: int = 10
    session_share: float = 0.5
    validation_speakers: int = 40
    test_speakers: int = 40
    reference_speakers: int = 50
    heldout_clips_per_speaker: int = 10
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.clips_per_speaker
        if self.num_speakers < 2:
            raise GeneratorConfigError("need at least 2 speakers")
        if lo < 1 or hi < lo:
            raise GeneratorConfigError("clips_per_speaker must satisfy 1 <= min <= max")
        if not 0.0 <= self.confounder_strength <= 2.0:
            raise GeneratorConfigError("confounder_strength must lie in [0, 2]")
        if not 0.0 <= self.session_share <= 1.0:
            raise GeneratorConfigError("session_share must lie in [0, 1]")
        for name in ("identity_dim", "confounder_dim", "speech_dim", "face_dim",
                     "num_sessions", "heldout_clips_per_speaker"):
            if getattr(self, name) < 1:
                raise GeneratorConfigError(f"{name} must be positive")
        if self.noise_std < 0:
            raise GeneratorConfigError("noise_std must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clips_per_speaker"] = list(self.clips_per_speaker)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["clips_per_speaker"] = tuple(d["clips_per_speaker"])
        return cls(**d)


@dataclass(frozen=True)
class VideoClip:
    clip_id: int
    true_speaker_id: int
    speech_view: np.ndarray
    face_view: np.ndarray
    session_id: int


@dataclass
class Corpus:
    """Clips stored column-wise; ``clip_id`` is the row index."""

    config: GeneratorConfig
    speech: np.ndarray
    face: np.ndarray
    speaker_ids: np.ndarray
    session_ids: np.ndarray
    split: str = "train"
    _groups: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.speaker_ids)
        if self.speech.shape != (n, self.config.speech_dim) or self.face.shape != (n, self.config.face_dim):
            raise GeneratorConfigError("view arrays do not match the corpus config")
        if not (np.all(np.isfinite(self.speech)) and np.all(np.isfinite(self.face))):
            raise GeneratorConfigError("corpus views must be finite")

    @property
    def N(self) -> int:
        return len(self.speaker_ids)

    def __len__(self) -> int:
        return self.N

    @property
    def clip_ids(self) -> np.ndarray:
        return np.arange(self.N)

    @property
    def num_speakers(self) -> int:
        return len(np.unique(self.speaker_ids))

    def clip(self, clip_id: int) -> VideoClip:
        return VideoClip(int(clip_id), int(self.speaker_ids[clip_id]), self.speech[clip_id],
                         self.face[clip_id], int(self.session_ids[clip_id]))

    @property
    def clips(self) -> list[VideoClip]:
        return [self.clip(i) for i in range(self.N)]

    def speaker_groups(self) -> dict[int, np.ndarray]:
        """Clip ids per true speaker (evaluation and oracle use only)."""
        if self._groups is None:
            self._groups = {int(g): np.flatnonzero(self.speaker_ids == g)
                            for g in np.unique(self.speaker_ids)}
        return self._groups

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.config == other.config and self.split == other.split
                and np.array_equal(self.speech, other.speech)
                and np.array_equal(self.face, other.face)
                and np.array_equal(self.speaker_ids, other.speaker_ids)
                and np.array_equal(self.session_ids, other.session_ids))


@dataclass(frozen=True)
class _World:
    speech_identity: np.ndarray
    speech_confounder: np.ndarray
    face_identity: np.ndarray
    face_confounder: np.ndarray
    speech_sessions: np.ndarray
    face_sessions: np.ndarray


def _world(config: GeneratorConfig) -> _World:
    rng = np.random.default_rng([config.seed, 0])
    k, c = config.identity_dim, config.confounder_dim
    return _World(
        speech_identity=rng.standard_normal((config.speech_dim, k)) / np.sqrt(k),
        speech_confounder=rng.standard_normal((config.speech_dim, c)) / np.sqrt(c),
        face_identity=rng.standard_normal((config.face_dim, k)) / np.sqrt(k),
        face_confounder=rng.standard_normal((config.face_dim, c)) / np.sqrt(c),
        speech_sessions=rng.standard_normal((config.num_sessions, c)),
        face_sessions=rng.standard_normal((config.num_sessions, c)),
    )


def _split_layout(config: GeneratorConfig, split: str) -> tuple[int, int, tuple[int, int]]:
    """(first speaker id, speaker count, clip range) for a split."""
    g = config.num_speakers
    held = (config.heldout_clips_per_speaker,) * 2
    if split == "train":
        return 0, g, config.clips_per_speaker
    if split == "validation":
        return g, config.validation_speakers, held
    if split == "test":
        return g + config.validation_speakers, config.test_speakers, held
    if split == "reference":
        return g + config.validation_speakers + config.test_speakers, config.reference_speakers, held
    raise GeneratorConfigError(f"unknown split {split!r}")


def generate_corpus(config: GeneratorConfig, split: str = "train") -> Corpus:
    """Deterministically draw one split of the synthetic corpus."""
    world = _world(config)
    first, count, (lo, hi) = _split_layout(config, split)
    if count < 1:
        raise GeneratorConfigError(f"split {split!r} has no speakers")
    rng = np.random.default_rng([config.seed, _SPLIT_STREAM[split]])
    rho, share = config.confounder_strength, config.session_share

    identities = rng.standard_normal((count, config.identity_dim))
    sizes = rng.integers(lo, hi + 1, size=count)
    speaker_ids = np.repeat(np.arange(first, first + count), sizes)
    n = len(speaker_ids)
    session_ids = rng.integers(0, config.num_sessions, size=n)
    u = identities[speaker_ids - first]

    def confounder(pool):
        own = rng.standard_normal((n, config.confounder_dim))
        return np.sqrt(share) * pool[session_ids] + np.sqrt(1.0 - share) * own

    v_speech = confounder(world.speech_sessions)
    v_face = confounder(world.face_sessions)
    speech = (u @ world.speech_identity.T + rho * v_speech @ world.speech_confounder.T
              + config.noise_std * rng.standard_normal((n, config.speech_dim)))
    face = (u @ world.face_identity.T + rho * v_face @ world.face_confounder.T
            + config.noise_std * rng.standard_normal((n, config.face_dim)))
    return Corpus(config, speech, face, speaker_ids.astype(np.int64),
                  session_ids.astype(np.int64), split)


def two_segments(clip: VideoClip, rng: np.random.Generator, augmentation=None):
    """Two independently augmented segments of a clip's speech view.

    Without an augmentation config both segments equal the clean view.
    """
    from .sampling import augment

    if augmentation is None:
        return clip.speech_view.copy(), clip.speech_view.copy()
    return augment(clip.speech_view, augmentation, rng), augment(clip.speech_view, augmentation, rng)


# ---------------------------------------------------------------------------
# persistence


def save_corpus(corpus: Corpus, path) -> None:
    """Binary corpus file with a trailing CRC32."""
    cfg = json.dumps({"config": corpus.config.to_dict(), "split": corpus.split},
                     sort_keys=True).encode("utf-8")
    n, ds, df = corpus.N, corpus.config.speech_dim, corpus.config.face_dim
    body = bytearray()
    body += CORPUS_MAGIC
    body += struct.pack("<II", CORPUS_VERSION, len(cfg))
    body += cfg
    body += struct.pack("<III", n, ds, df)
    record = np.dtype([("clip", "<u4"), ("speaker", "<u4"), ("session", "<u4"),
                       ("speech", "<f8", (ds,)), ("face", "<f8", (df,))])
    rows = np.empty(n, dtype=record)
    rows["clip"] = np.arange(n)
    rows["speaker"] = corpus.speaker_ids
    rows["session"] = corpus.session_ids
    rows["speech"] = corpus.speech
    rows["face"] = corpus.face
    body += rows.tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_corpus(path) -> Corpus:
    raw = Path(path).read_bytes()
    if len(raw) < 32 or raw[:8] != CORPUS_MAGIC:
        raise CorpusError(f"{path}: not a corpus file")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CorpusError(f"{path}: checksum mismatch (corrupted or truncated)")
    version, clen = struct.unpack("<II", raw[8:16])
    if version != CORPUS_VERSION:
        raise CorpusError(f"{path}: unsupported corpus version {version}")
    head = json.loads(raw[16:16 + clen].decode("utf-8"))
    config = GeneratorConfig.from_dict(head["config"])
    off = 16 + clen
    n, ds, df = struct.unpack("<III", raw[off:off + 12])
    off += 12
    record = np.dtype([("clip", "<u4"), ("speaker", "<u4"), ("session", "<u4"),
                       ("speech", "<f8", (ds,)), ("face", "<f8", (df,))])
    if off + n * record.itemsize != len(raw) - 4:
        raise CorpusError(f"{path}: record block size does not match header")
    rows = np.frombuffer(raw, dtype=record, count=n, offset=off)
    if not np.array_equal(rows["clip"], np.arange(n)):
        raise CorpusError(f"{path}: clip ids are not dense")
    return Corpus(config, rows["speech"].astype(np.float64), rows["face"].astype(np.float64),
                  rows["speaker"].astype(np.int64), rows["session"].astype(np.int64),
                  head["split"])


def write_embeddings_csv(path, embeddings: np.ndarray, clip_ids=None) -> None:
    """One row per clip: clip_id then components with 17 significant digits."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if clip_ids is None:
        clip_ids = range(len(embeddings))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for cid, row in zip(clip_ids, embeddings):
            writer.writerow([int(cid), *(format(x, ".17g") for x in row)])


def read_embeddings_csv(path) -> tuple[np.ndarray, np.ndarray]:
    ids, rows = [], []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            ids.append(int(rec[0]))
            rows.append([float(x) for x in rec[1:]])
    return np.asarray(ids, dtype=np.int64), np.asarray(rows, dtype=np.float64)
