"""k-means, the progressive cluster-count controller, and elbow estimation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class ClusteringError(ValueError):
    pass


class LloydInvariantError(AssertionError):
    """Inertia increased across a Lloyd iteration."""


@dataclass
class ClusterAssignment:
    C: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if np.any(self.labels < 0) or np.any(self.labels >= self.C):
            raise ClusteringError("cluster label out of range")
        if self.inertia < 0:
            raise ClusteringError("negative inertia")

    @classmethod
    def singletons(cls, points: np.ndarray) -> "ClusterAssignment":
        n = len(points)
        return cls(n, np.arange(n), np.array(points, dtype=np.float64), 0.0, [0.0])

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.C)


def _sq_dists(points: np.ndarray, centroids: np.ndarray, pnorm: np.ndarray) -> np.ndarray:
    cnorm = np.einsum("ij,ij->i", centroids, centroids)
    d = pnorm[:, None] - 2.0 * points @ centroids.T + cnorm[None, :]
    return np.maximum(d, 0.0)


def _inertia(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = points - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans_plus_plus(points: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    pnorm = np.einsum("ij,ij->i", points, points)
    closest = _sq_dists(points, points[chosen], pnorm)[:, 0]
    closest[chosen[0]] = 0.0
    for _ in range(1, C):
        total = closest.sum()
        if total <= 0.0:
            # every point coincides with a chosen centroid; pick a fresh index
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.integers(len(free))])
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        chosen.append(nxt)
        d_new = _sq_dists(points, points[nxt:nxt + 1], pnorm)[:, 0]
        d_new[nxt] = 0.0
        np.minimum(closest, d_new, out=closest)
    return points[chosen].copy()


def kmeans(points, C: int, seed: int = 0, max_iters: int = 50,
           rtol: float = 1e-9, n_init: int = 20) -> ClusterAssignment:
    """Lloyd iterations from k-means++ seeds, best of ``n_init`` starts.

    Each start stops after ``max_iters`` or once no label changes. Empty
    clusters are re-seeded at the point farthest from its own centroid.
    Inertia is checked to be non-increasing after every assignment step (up
    to ``rtol`` of floating-point slack) and recorded in ``inertia_history``.
    Starts draw from one seeded stream; the lowest inertia wins, ties going
    to the earlier start.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= C <= n:
        raise ClusteringError(f"need 1 <= C <= N, got C={C}, N={n}")
    if not np.all(np.isfinite(points)):
        raise ClusteringError("points must be finite")
    if n_init < 1:
        raise ClusteringError("n_init must be >= 1")
    if C == n:
        return ClusterAssignment.singletons(points)

    rng = np.random.default_rng(seed)
    pnorm = np.einsum("ij,ij->i", points, points)
    best = None
    for _ in range(n_init):
        run = _lloyd(points, C, rng, pnorm, max_iters, rtol)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def _lloyd(points, C, rng, pnorm, max_iters, rtol) -> ClusterAssignment:
    centroids = kmeans_plus_plus(points, C, rng)
    labels = None
    history: list[float] = []

    def check(value: float) -> None:
        if history and value > history[-1] + rtol * max(history[-1], 1.0):
            raise LloydInvariantError(f"inertia rose from {history[-1]!r} to {value!r}")
        history.append(value)

    for _ in range(max_iters):
        new_labels = np.argmin(_sq_dists(points, centroids, pnorm), axis=1)
        check(_inertia(points, centroids, new_labels))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=C)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for k in np.flatnonzero(~nonempty):
            dist = np.einsum("ij,ij->i", points - centroids[labels], points - centroids[labels])
            far = int(np.argmax(dist))
            old = labels[far]
            labels[far] = k
            centroids[k] = points[far]
            members = labels == old
            if members.any():
                centroids[old] = points[members].mean(axis=0)
        check(_inertia(points, centroids, labels))

    counts = np.bincount(labels, minlength=C)
    if np.any(counts == 0):
        raise ClusteringError("fewer distinct points than clusters; empty cluster left")
    return ClusterAssignment(C, labels, centroids, _inertia(points, centroids, labels), history)


# ---------------------------------------------------------------------------
# progressive controller


class Decision(str, Enum):
    KEEP_C = "KEEP_C"
    HALVE_C = "HALVE_C"


@dataclass
class ProgressiveState:
    current_C: int
    stall_window: int = 3
    floor_C: int = 2
    validation_history: list[tuple[int, float]] = field(default_factory=list)
    halving_log: list[tuple[int, int, int]] = field(default_factory=list)
    last_change: int = 0

    def __post_init__(self):
        if self.current_C < self.floor_C:
            raise ClusteringError("current_C below floor_C")
        if self.stall_window < 1:
            raise ClusteringError("stall_window must be >= 1")

    def to_dict(self) -> dict:
        return {
            "current_C": self.current_C,
            "stall_window": self.stall_window,
            "floor_C": self.floor_C,
            "validation_history": [list(x) for x in self.validation_history],
            "halving_log": [list(x) for x in self.halving_log],
            "last_change": self.last_change,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProgressiveState":
        return cls(
            current_C=d["current_C"], stall_window=d["stall_window"], floor_C=d["floor_C"],
            validation_history=[(int(e), float(v)) for e, v in d["validation_history"]],
            halving_log=[tuple(x) for x in d["halving_log"]],
            last_change=d["last_change"],
        )


@dataclass(frozen=True)
class ProgressiveDecision:
    decision: Decision
    new_C: int


def progressive_step(state: ProgressiveState, latest_val_eer: float,
                     epoch: int | None = None) -> ProgressiveDecision:
    """Record one validation result and decide whether to halve C.

    Halve when the best EER of the last ``stall_window`` epochs (all recorded
    since the previous change) is not strictly better than the best EER seen
    before that window. C never drops below ``floor_C``.
    """
    if epoch is None:
        epoch = len(state.validation_history)
    state.validation_history.append((epoch, float(latest_val_eer)))
    w = state.stall_window
    since = len(state.validation_history) - state.last_change
    if since < w:
        return ProgressiveDecision(Decision.KEEP_C, state.current_C)
    eers = [v for _, v in state.validation_history]
    before = eers[:-w]
    if not before:
        return ProgressiveDecision(Decision.KEEP_C, state.current_C)
    if min(eers[-w:]) < min(before):
        return ProgressiveDecision(Decision.KEEP_C, state.current_C)
    new_C = max(math.ceil(state.current_C / 2), state.floor_C)
    if new_C == state.current_C:
        return ProgressiveDecision(Decision.KEEP_C, state.current_C)
    state.halving_log.append((epoch, state.current_C, new_C))
    state.current_C = new_C
    state.last_change = len(state.validation_history)
    return ProgressiveDecision(Decision.HALVE_C, new_C)


def max_halvings(N: int, floor_C: int) -> int:
    return max(0, math.ceil(math.log2(N / floor_C)))


# ---------------------------------------------------------------------------
# elbow


def elbow_estimate(inertia_by_C) -> int:
    """Knee of an inertia-vs-C curve sampled on a log-spaced C grid.

    Picks the interior grid point with the largest discrete second difference
    of inertia; ties go to the smaller C.
    """
    pts = sorted((int(c), float(v)) for c, v in inertia_by_C)
    if len(pts) < 3:
        raise ClusteringError("elbow estimation needs at least 3 points")
    cs = [c for c, _ in pts]
    if len(set(cs)) != len(cs):
        raise ClusteringError("C values must be strictly increasing")
    v = np.array([x for _, x in pts])
    second = v[:-2] - 2.0 * v[1:-1] + v[2:]
    best = int(np.argmax(second))  # first maximum -> smaller C
    return cs[best + 1]


def inertia_curve(points: np.ndarray, grid, seed: int = 0) -> list[tuple[int, float]]:
    return [(int(c), kmeans(points, int(c), seed).inertia) for c in grid]


# ---------------------------------------------------------------------------
# exports


def write_assignment_csv(path, assignment: ClusterAssignment) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "label"])
        for i, lab in enumerate(assignment.labels):
            w.writerow([i, int(lab)])


def append_inertia_log(path, epoch: int, C: int, inertia: float) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps({"epoch": epoch, "C": C, "inertia": inertia}) + "\n")
