"""Verification scoring, EER, and positive-pair diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ModelBundle, face_encode, speaker_encode
from .numerics import Tensor, cosine_matrix
from .sampling import AugmentConfig, PositiveSets, augment

FACE_DRAWS = 5


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Trial:
    clip_a: int
    clip_b: int
    is_target: bool


@dataclass
class TrialScoreSet:
    target_scores: np.ndarray
    impostor_scores: np.ndarray

    def __post_init__(self):
        self.target_scores = np.asarray(self.target_scores, dtype=np.float64).ravel()
        self.impostor_scores = np.asarray(self.impostor_scores, dtype=np.float64).ravel()

    @classmethod
    def from_labels(cls, scores, is_target) -> "TrialScoreSet":
        scores = np.asarray(scores, dtype=np.float64)
        is_target = np.asarray(is_target, dtype=bool)
        return cls(scores[is_target], scores[~is_target])


@dataclass
class DiversityReport:
    available: np.ndarray
    D: float
    n_plus: float


# ---------------------------------------------------------------------------
# embeddings and scores


def speaker_embeddings(bundle: ModelBundle, speech: np.ndarray) -> np.ndarray:
    """Encoder outputs for clean speech views; projectors are not used."""
    return speaker_encode(bundle.speaker_encoder, Tensor(speech)).numpy()


def face_embedding_means(bundle: ModelBundle, face: np.ndarray, augmentation: AugmentConfig,
                         seed: int = 0, draws: int = FACE_DRAWS) -> np.ndarray:
    """Mean of unit-normalized face embeddings over ``draws`` augmented frames.

    The dot product of two such means equals the mean cosine over all
    ``draws x draws`` frame pairs.
    """
    rng = np.random.default_rng(seed)
    face = np.asarray(face, dtype=np.float64)
    frames = augment(np.repeat(face, draws, axis=0), augmentation, rng)
    emb = face_encode(bundle.face_encoder, Tensor(frames)).numpy()
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return emb.reshape(len(face), draws, -1).mean(axis=1)


def score_trial(bundle: ModelBundle, trial: Trial, corpus, modality: str = "S",
                augmentation: AugmentConfig | None = None, seed: int = 0) -> float:
    """Score one trial: S = speaker cosine, F = 5x5 mean face cosine, S+F = their mean."""
    modality = modality.upper()
    ids = [trial.clip_a, trial.clip_b]

    def s_score():
        e = speaker_embeddings(bundle, corpus.speech[ids])
        return float(cosine_matrix(e[:1], e[1:])[0, 0])

    def f_score():
        m = face_embedding_means(bundle, corpus.face[ids], augmentation or AugmentConfig(), seed)
        return float(m[0] @ m[1])

    if modality == "S":
        return s_score()
    if modality == "F":
        return f_score()
    if modality in ("S+F", "SF"):
        return fuse_scores(s_score(), f_score())
    raise EvaluationError(f"unknown modality {modality!r}")


def fuse_scores(s, f):
    """Equal-weight mean of speech and face cosine scores."""
    return (np.asarray(s) + np.asarray(f)) / 2.0 if np.ndim(s) else (s + f) / 2.0


def all_pair_trials(speaker_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every unordered clip pair: (clip_a, clip_b, is_target)."""
    speaker_ids = np.asarray(speaker_ids)
    a, b = np.triu_indices(len(speaker_ids), k=1)
    return a, b, speaker_ids[a] == speaker_ids[b]


def verification_scores(bundle: ModelBundle, corpus, trials=None,
                        augmentation: AugmentConfig | None = None, seed: int = 0,
                        with_face: bool = True) -> dict[str, np.ndarray]:
    """Trial scores for S, F and S+F on a corpus (all pairs by default)."""
    if trials is None:
        trials = all_pair_trials(corpus.speaker_ids)
    a, b, is_target = trials
    es = speaker_embeddings(bundle, corpus.speech)
    es /= np.linalg.norm(es, axis=1, keepdims=True)
    out = {"clip_a": a, "clip_b": b, "is_target": np.asarray(is_target, dtype=bool),
           "S": np.clip(np.einsum("ij,ij->i", es[a], es[b]), -1.0, 1.0)}
    if with_face:
        mf = face_embedding_means(bundle, corpus.face, augmentation or AugmentConfig(), seed)
        out["F"] = np.einsum("ij,ij->i", mf[a], mf[b])
        out["S+F"] = fuse_scores(out["S"], out["F"])
    return out


def verification_eers(bundle: ModelBundle, corpus, augmentation: AugmentConfig | None = None,
                      seed: int = 0, with_face: bool = True) -> dict[str, float | None]:
    scores = verification_scores(bundle, corpus, None, augmentation, seed, with_face)
    t = scores["is_target"]
    res = {"eer_s": compute_eer(TrialScoreSet.from_labels(scores["S"], t))}
    if with_face:
        res["eer_f"] = compute_eer(TrialScoreSet.from_labels(scores["F"], t))
        res["eer_sf"] = compute_eer(TrialScoreSet.from_labels(scores["S+F"], t))
    else:
        res["eer_f"] = res["eer_sf"] = None
    return res


# ---------------------------------------------------------------------------
# EER


def _crossing(far: np.ndarray, frr: np.ndarray) -> float:
    diff = far - frr
    k = int(np.argmax(diff <= 0.0))
    if diff[k] == 0.0 or k == 0:
        return float(far[k])
    d0, d1 = diff[k - 1], diff[k]
    alpha = d0 / (d0 - d1)
    return float(far[k - 1] + alpha * (far[k] - far[k - 1]))


def compute_eer(scores: TrialScoreSet) -> float:
    """Equal error rate from a threshold sweep over every distinct score.

    FAR(t) is the fraction of impostor scores >= t, FRR(t) the fraction of
    target scores < t; a final threshold above every score closes the curve.
    Where no threshold gives FAR == FRR the crossing is interpolated linearly
    between the two neighbouring operating points.
    """
    tgt = np.sort(scores.target_scores)
    imp = np.sort(scores.impostor_scores)
    if len(tgt) == 0 or len(imp) == 0:
        raise EvaluationError("EER needs at least one target and one impostor score")
    thresholds = np.append(np.unique(np.concatenate([tgt, imp])), np.inf)
    far = (len(imp) - np.searchsorted(imp, thresholds, side="left")) / len(imp)
    frr = np.searchsorted(tgt, thresholds, side="left") / len(tgt)
    return _crossing(far, frr)


# ---------------------------------------------------------------------------
# positive-pair diagnostics


def diversity(pair, reference_embeddings: np.ndarray) -> float:
    """L2 distance between the reference speaker embeddings of a clip pair."""
    i, j = pair
    return float(np.linalg.norm(reference_embeddings[i] - reference_embeddings[j]))


def _as_positive_sets(source) -> PositiveSets:
    from .sampling import ClusterPositives

    if isinstance(source, PositiveSets):
        return source
    labels = getattr(source, "labels", source)
    return ClusterPositives(np.asarray(labels))


def diversity_report(source, reference_embeddings: np.ndarray) -> DiversityReport:
    """Mean diversity D and mean positive-set size N+.

    ``source`` is a cluster assignment, a label vector or a PositiveSets.
    Every (anchor, positive) pair with positive != anchor contributes its
    distance; an anchor with no other positive contributes one zero.
    """
    sets = _as_positive_sets(source)
    ref = np.asarray(reference_embeddings, dtype=np.float64)
    total, count = 0.0, 0
    for a in range(sets.N):
        s = sets.positives(a)
        others = s[s != a]
        if len(others) == 0:
            count += 1
            continue
        total += float(np.linalg.norm(ref[others] - ref[a], axis=1).sum())
        count += len(others)
    available = np.array([len(np.union1d(sets.positives(a), [a])) for a in range(sets.N)])
    return DiversityReport(available=available, D=total / count, n_plus=float(available.mean()))


def pair_accuracy(source, labels) -> float:
    """Fraction of (anchor, positive) pairs that share the true speaker.

    Anchors whose positive set is only themselves count as one correct pair.
    """
    sets = _as_positive_sets(source)
    labels = np.asarray(labels)
    correct, count = 0, 0
    for a in range(sets.N):
        s = sets.positives(a)
        others = s[s != a]
        if len(others) == 0:
            correct += 1
            count += 1
            continue
        correct += int(np.sum(labels[others] == labels[a]))
        count += len(others)
    return correct / count


def cluster_purity(assignment, labels) -> float:
    """Sum over clusters of the majority true-speaker count, divided by N."""
    pred = np.asarray(getattr(assignment, "labels", assignment))
    labels = np.asarray(labels)
    total = 0
    for c in np.unique(pred):
        _, counts = np.unique(labels[pred == c], return_counts=True)
        total += int(counts.max())
    return total / len(labels)


# ---------------------------------------------------------------------------
# trial and score files


def read_trials_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a, b, t = [], [], []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0] == "clip_a":
                continue
            a.append(int(rec[0]))
            b.append(int(rec[1]))
            t.append(rec[2].strip().lower() in ("1", "true", "target"))
    return np.asarray(a), np.asarray(b), np.asarray(t, dtype=bool)


def write_trials_csv(path, trials) -> None:
    a, b, t = trials
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_a", "clip_b", "is_target"])
        for x, y, z in zip(a, b, t):
            w.writerow([int(x), int(y), int(bool(z))])


def write_scores_csv(path, clip_a, clip_b, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_a", "clip_b", "score"])
        for x, y, s in zip(clip_a, clip_b, scores):
            w.writerow([int(x), int(y), format(float(s), ".17g")])
