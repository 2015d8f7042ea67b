"""Contrastive and classification objectives.

Batches of paired views are row-interleaved: row ``2*i + j`` holds segment
``j`` (0 or 1) of clip slot ``i``, so a batch of ``M`` clips is a ``(2M, d)``
tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    GradTape,
    Tensor,
    add,
    gather,
    l2_normalize,
    logsumexp_rows,
    matmul_nt,
    mean,
    reshape,
    scale,
    sub,
    total,
    transpose,
)


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    # "ntxent": s(a, b) = exp(cos / tau); "literal": exp(cos) / tau, where tau cancels.
    similarity: str = "ntxent"

    def __post_init__(self):
        if self.temperature <= 0:
            raise LossConfigError("temperature must be positive")
        if self.similarity not in ("ntxent", "literal"):
            raise LossConfigError(f"unknown similarity form {self.similarity!r}")

    @property
    def logit_scale(self) -> float:
        return 1.0 / self.temperature if self.similarity == "ntxent" else 1.0


def _num_clips(batch: Tensor) -> int:
    rows = batch.shape[0]
    if batch.ndim != 2 or rows % 2:
        raise LossConfigError(f"expected a (2M, d) interleaved batch, got shape {batch.shape}")
    return rows // 2


def _cfg(config: LossConfig | float | None) -> LossConfig:
    if config is None:
        return LossConfig()
    if isinstance(config, LossConfig):
        return config
    return LossConfig(temperature=float(config))


def ntxent_loss(batch: Tensor, config: LossConfig | float | None = None,
                tape: GradTape | None = None) -> Tensor:
    """Within-modality NT-Xent over ``M`` clips with two segments each.

    Each of the ``2M`` rows is an anchor; its partner segment is the positive
    and the denominator runs over every other row (``2M - 1`` terms).
    """
    cfg = _cfg(config)
    m = _num_clips(batch)
    if m < 2:
        raise LossConfigError("NT-Xent needs at least 2 clips per batch")
    n = 2 * m
    y = l2_normalize(batch, tape)
    logits = scale(matmul_nt(y, y, tape), cfg.logit_scale, tape)
    rows = np.arange(n)
    partner = rows ^ 1
    off_diagonal = ~np.eye(n, dtype=bool)
    lse = logsumexp_rows(logits, off_diagonal, tape)
    positive = gather(logits, rows, partner, tape)
    return mean(sub(lse, positive, tape), tape)


def face_ntxent_loss(batch: Tensor, config: LossConfig | float | None = None,
                     tape: GradTape | None = None) -> Tensor:
    """Face-side contrastive loss; same form as :func:`ntxent_loss`."""
    return ntxent_loss(batch, config, tape)


def cross_modal_loss(z_speech: Tensor, z_face: Tensor, config: LossConfig | float | None = None,
                     tape: GradTape | None = None, atol: float = 1e-9) -> Tensor:
    """Symmetric speech/face contrastive loss over projected embeddings.

    For every projected row of one modality, both rows of the same clip in the
    other modality are positives; the denominator spans all ``2M`` rows of the
    other modality, positives included.
    """
    cfg = _cfg(config)
    m = _num_clips(z_speech)
    if z_face.shape != z_speech.shape:
        raise LossConfigError("speech and face projected batches differ in shape")
    for z in (z_speech, z_face):
        if not np.allclose(np.linalg.norm(z.data, axis=1), 1.0, rtol=0.0, atol=atol):
            raise LossConfigError("cross-modal loss expects unit-norm projected embeddings")
    n = 2 * m
    logits = scale(matmul_nt(z_speech, z_face, tape), cfg.logit_scale, tape)
    clip = np.arange(n) // 2
    same_clip = clip[:, None] == clip[None, :]
    l_speech = sub(logsumexp_rows(logits, None, tape), logsumexp_rows(logits, same_clip, tape), tape)
    logits_t = transpose(logits, tape)
    l_face = sub(logsumexp_rows(logits_t, None, tape), logsumexp_rows(logits_t, same_clip, tape), tape)
    return scale(add(total(l_speech, tape), total(l_face, tape), tape), 1.0 / (4 * m), tape)


def combined_mcl_loss(y_speech: Tensor, y_face: Tensor, z_speech: Tensor, z_face: Tensor,
                      config: LossConfig | float | None = None,
                      tape: GradTape | None = None) -> Tensor:
    """Unweighted sum of speech, face and cross-modal losses."""
    ls = ntxent_loss(y_speech, config, tape)
    lf = face_ntxent_loss(y_face, config, tape)
    lc = cross_modal_loss(z_speech, z_face, config, tape)
    return add(add(ls, lf, tape), lc, tape)


def aam_softmax_loss(logits: Tensor, label, tape: GradTape | None = None) -> Tensor:
    """Cross-entropy of margin logits; mean over the batch for 2-D input."""
    labels = np.atleast_1d(np.asarray(label))
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, -1), tape)
    num_classes = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise IndexError(f"label out of range for {num_classes} classes")
    if labels.shape[0] != logits.shape[0]:
        raise LossConfigError("one label per logit row required")
    lse = logsumexp_rows(logits, None, tape)
    picked = gather(logits, np.arange(logits.shape[0]), labels, tape)
    return mean(sub(lse, picked, tape), tape)
