"""Positive-pair sampling and feature-space augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import cosine_matrix


class Strategy(str, Enum):
    PPP = "PPP"
    DPP_CLUSTER = "DPP_CLUSTER"
    DPP_KNN = "DPP_KNN"
    DPP_THRESHOLD = "DPP_THRESHOLD"
    ORACLE_C2 = "ORACLE_C2"
    ORACLE_C3 = "ORACLE_C3"
    ORACLE_C4 = "ORACLE_C4"


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    noise: float = 0.0
    gain_delta: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.noise < 0 or not 0 <= self.gain_delta < 1 or not 0 <= self.dropout < 1:
            raise SamplingError("augmentation parameters out of range")

    @property
    def is_identity(self) -> bool:
        return self.noise == 0 and self.gain_delta == 0 and self.dropout == 0


@dataclass(frozen=True)
class SamplingConfig:
    strategy: Strategy = Strategy.PPP
    K: int = 5
    T: float = 0.5
    speech_aug: AugmentConfig = field(default_factory=lambda: AugmentConfig(0.2, 0.1, 0.05))
    face_aug: AugmentConfig = field(default_factory=lambda: AugmentConfig(0.2, 0.1, 0.05))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.K < 1:
            raise SamplingError("K must be >= 1")
        if not -1.0 < self.T < 1.0:
            raise SamplingError("T must lie in (-1, 1)")


def augment(view: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random gain, additive Gaussian noise and coordinate dropout.

    Works on one view or a batch of rows; each row gets its own draws.
    """
    x = np.array(view, dtype=np.float64)
    if config.is_identity:
        return x
    batch = x.reshape(-1, x.shape[-1])
    if config.gain_delta > 0:
        gain = rng.uniform(1.0 - config.gain_delta, 1.0 + config.gain_delta, size=(len(batch), 1))
        batch = batch * gain
    if config.noise > 0:
        batch = batch + config.noise * rng.standard_normal(batch.shape)
    if config.dropout > 0:
        batch = np.where(rng.random(batch.shape) < config.dropout, 0.0, batch)
    return batch.reshape(x.shape)


def augment_speech(view, config: SamplingConfig | AugmentConfig, rng) -> np.ndarray:
    cfg = config.speech_aug if isinstance(config, SamplingConfig) else config
    return augment(view, cfg, rng)


def augment_face(view, config: SamplingConfig | AugmentConfig, rng) -> np.ndarray:
    cfg = config.face_aug if isinstance(config, SamplingConfig) else config
    return augment(view, cfg, rng)


# ---------------------------------------------------------------------------
# positive sets


class PositiveSets:
    """Per-anchor candidate positives over clip ids ``0..N-1``."""

    def __init__(self, sets: list[np.ndarray]):
        self._sets = [np.asarray(s, dtype=np.int64) for s in sets]

    @property
    def N(self) -> int:
        return len(self._sets)

    def positives(self, anchor: int) -> np.ndarray:
        if not 0 <= anchor < len(self._sets):
            raise SamplingError(f"unknown clip id {anchor}")
        return self._sets[anchor]

    def sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self._sets], dtype=np.int64)

    def pairs(self):
        """Yield (anchor, positive) for every positive other than the anchor.

        Anchors whose only candidate is themselves yield ``(a, a)`` once.
        """
        for a, s in enumerate(self._sets):
            others = s[s != a]
            if len(others) == 0:
                yield a, a
            else:
                for p in others:
                    yield a, int(p)


class SelfPositives(PositiveSets):
    """PPP: every clip is its own and only positive."""

    def __init__(self, n: int):
        super().__init__([np.array([i]) for i in range(n)])


class ClusterPositives(PositiveSets):
    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)
        groups: dict[int, np.ndarray] = {}
        order = np.argsort(self.labels, kind="stable")
        bounds = np.flatnonzero(np.diff(self.labels[order])) + 1
        for chunk in np.split(order, bounds):
            groups[int(self.labels[chunk[0]])] = np.sort(chunk)
        super().__init__([groups[int(c)] for c in self.labels])


def positives_by_cluster(anchor_id: int, assignment) -> np.ndarray:
    """All clips sharing the anchor's cluster label (anchor included)."""
    labels = np.asarray(getattr(assignment, "labels", assignment))
    if not 0 <= anchor_id < len(labels):
        raise SamplingError(f"unknown clip id {anchor_id}")
    return np.flatnonzero(labels == labels[anchor_id])


def positives_by_knn(anchor_z, all_z, K: int, anchor_id: int | None = None) -> np.ndarray:
    """The K clips with the highest cosine to ``anchor_z``, anchor excluded.

    Ties go to the lower clip id. When ``anchor_id`` is None the anchor is the
    first row that equals ``anchor_z`` exactly.
    """
    all_z = np.asarray(all_z, dtype=np.float64)
    n = len(all_z)
    if K >= n:
        raise SamplingError(f"K={K} must be smaller than N={n}")
    if anchor_id is None:
        anchor_id = _find_row(all_z, anchor_z)
    sims = cosine_matrix(np.asarray(anchor_z, dtype=np.float64)[None, :], all_z)[0]
    ids = np.arange(n)
    keep = ids != anchor_id
    cand, sc = ids[keep], sims[keep]
    order = np.lexsort((cand, -sc))
    return np.sort(cand[order[:K]])


def positives_by_threshold(anchor_z, all_z, T: float, anchor_id: int | None = None) -> np.ndarray:
    """Clips (anchor excluded) whose cosine to ``anchor_z`` exceeds ``T``."""
    all_z = np.asarray(all_z, dtype=np.float64)
    if anchor_id is None:
        anchor_id = _find_row(all_z, anchor_z)
    sims = cosine_matrix(np.asarray(anchor_z, dtype=np.float64)[None, :], all_z)[0]
    hit = sims > T
    if anchor_id is not None:
        hit[anchor_id] = False
    return np.flatnonzero(hit)


def _find_row(all_z: np.ndarray, z) -> int | None:
    match = np.flatnonzero(np.all(all_z == np.asarray(z), axis=1))
    return int(match[0]) if len(match) else None


def knn_positive_sets(all_z: np.ndarray, K: int) -> PositiveSets:
    sims = cosine_matrix(all_z, all_z)
    n = len(all_z)
    if K >= n:
        raise SamplingError(f"K={K} must be smaller than N={n}")
    np.fill_diagonal(sims, -np.inf)
    sets = []
    ids = np.arange(n)
    for a in range(n):
        order = np.lexsort((ids, -sims[a]))
        sets.append(np.sort(order[:K]))
    return PositiveSets(sets)


def threshold_positive_sets(all_z: np.ndarray, T: float) -> PositiveSets:
    """Threshold sets; an empty set falls back to the anchor itself (PPP)."""
    sims = cosine_matrix(all_z, all_z)
    np.fill_diagonal(sims, -np.inf)
    sets = []
    for a in range(len(all_z)):
        hit = np.flatnonzero(sims[a] > T)
        sets.append(hit if len(hit) else np.array([a]))
    return PositiveSets(sets)


def oracle_positive_sets(speaker_ids, mode: str, reference_embeddings: np.ndarray | None = None) -> PositiveSets:
    """Ground-truth-label positives for the C2/C3/C4 diversity ablations.

    C2 fixes the least diverse same-speaker clip, C3 the most diverse one
    (diversity = L2 distance of reference embeddings), C4 keeps every
    same-speaker clip so a fresh one is drawn each epoch. A speaker with a
    single clip falls back to PPP.
    """
    mode = mode.upper().removeprefix("ORACLE_")
    if mode not in ("C2", "C3", "C4"):
        raise SamplingError(f"unknown oracle mode {mode!r}")
    speaker_ids = np.asarray(speaker_ids)
    if mode in ("C2", "C3") and reference_embeddings is None:
        raise SamplingError("C2/C3 need reference embeddings to rank diversity")
    sets = []
    for a in range(len(speaker_ids)):
        same = np.flatnonzero(speaker_ids == speaker_ids[a])
        others = same[same != a]
        if len(others) == 0:
            sets.append(np.array([a]))
        elif mode == "C4":
            sets.append(others)
        else:
            d = np.linalg.norm(reference_embeddings[others] - reference_embeddings[a], axis=1)
            # stable argmin/argmax keep the lower clip id on ties
            pick = np.argmin(d) if mode == "C2" else np.argmax(d)
            sets.append(np.array([others[pick]]))
    return PositiveSets(sets)


# ---------------------------------------------------------------------------
# batches


@dataclass
class PairBatch:
    """``M`` anchor/positive pairs; view arrays are row-interleaved (2M, d)."""

    anchor_ids: np.ndarray
    positive_ids: np.ndarray
    speech: np.ndarray
    face: np.ndarray

    @property
    def M(self) -> int:
        return len(self.anchor_ids)


def build_batch(corpus, positive_sets: PositiveSets, M: int, rng: np.random.Generator,
                config: SamplingConfig | None = None, anchors=None) -> PairBatch:
    """Draw ``M`` distinct anchors (or use ``anchors``) and one positive each.

    The anchor fills slot 0 of both modalities, the drawn positive slot 1; all
    four views are augmented.
    """
    config = config or SamplingConfig()
    n = corpus.N
    if anchors is None:
        if M > n:
            raise SamplingError(f"batch size {M} exceeds corpus size {n}")
        anchors = rng.choice(n, size=M, replace=False)
    anchors = np.asarray(anchors, dtype=np.int64)
    if len(np.unique(anchors)) != len(anchors):
        raise SamplingError("anchors within a batch must be distinct")
    positives = np.empty_like(anchors)
    for k, a in enumerate(anchors):
        cand = positive_sets.positives(int(a))
        # the anchor is its own positive only when nothing else is available
        others = cand[cand != a]
        if len(others) == 0:
            positives[k] = a
        else:
            positives[k] = others[0] if len(others) == 1 else others[rng.integers(len(others))]
    order = np.empty(2 * len(anchors), dtype=np.int64)
    order[0::2] = anchors
    order[1::2] = positives
    speech = augment(corpus.speech[order], config.speech_aug, rng)
    face = augment(corpus.face[order], config.face_aug, rng)
    return PairBatch(anchors, positives, speech, face)


def epoch_batches(corpus, positive_sets: PositiveSets, M: int, rng: np.random.Generator,
                  config: SamplingConfig | None = None):
    """Shuffle all clips and yield full batches of ``M`` distinct anchors."""
    if M > corpus.N:
        raise SamplingError(f"batch size {M} exceeds corpus size {corpus.N}")
    perm = rng.permutation(corpus.N)
    for start in range(0, corpus.N - M + 1, M):
        yield build_batch(corpus, positive_sets, M, rng, config, anchors=perm[start:start + M])
