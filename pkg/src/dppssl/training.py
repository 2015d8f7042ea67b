"""Adam, learning-rate schedule and the MCL / MCL-DPP / two-stage drivers.

Every driver is a pure function of (corpus, config). Each epoch appends one
metrics record; a full-state checkpoint (parameters, optimizer moments, RNG
state, controller state, labels, best-so-far model and the log) can be written
at a fixed cadence and resumed to a bitwise-identical continuation.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .clustering import (
    ClusterAssignment,
    ProgressiveState,
    elbow_estimate,
    inertia_curve,
    kmeans,
    progressive_step,
)
from .data import Corpus, generate_corpus
from .evaluation import diversity_report, pair_accuracy, verification_eers
from .losses import LossConfig, aam_softmax_loss, combined_mcl_loss, ntxent_loss
from .model import (
    ModelBundle,
    ModelConfig,
    aam_logits,
    face_encode,
    init_class_head,
    init_encoder,
    load_checkpoint,
    multimodal_embed,
    project,
    save_checkpoint,
    speaker_encode,
)
from .numerics import GradTape, NonFiniteError, Tensor, l2_normalize
from .sampling import (
    ClusterPositives,
    SamplingConfig,
    SelfPositives,
    Strategy,
    augment,
    epoch_batches,
    knn_positive_sets,
    oracle_positive_sets,
    threshold_positive_sets,
)


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    """Loss or parameters became non-finite."""

    def __init__(self, epoch: int, message: str = ""):
        super().__init__(f"non-finite value at epoch {epoch}{': ' + message if message else ''}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.95
    decay_every: int = 5
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.step < 0:
            raise TrainConfigError("Adam needs lr > 0 and step >= 0")

    def current_lr(self, epoch: int | None = None) -> float:
        e = self.epoch if epoch is None else epoch
        return self.lr * self.decay ** (e // self.decay_every)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update at the scheduled learning rate."""
    state.step += 1
    t = state.step
    lr = state.current_lr()
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise TrainConfigError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p, dtype=np.float64)
            v = np.zeros_like(p, dtype=np.float64)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# configs


@dataclass
class TrainConfig:
    lr: float = 1e-3
    M: int = 32
    epochs: int = 60
    temperature: float = 0.1
    similarity: str = "ntxent"
    use_face: bool = True
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    initial_C: int | None = None
    stall_window: int = 3
    floor_C: int = 2
    recluster_every_epoch: bool = True
    # k-means starts per stage-one reclustering (one per epoch keeps runs fast)
    cluster_restarts: int = 1
    checkpoint_every: int = 0
    eval_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise TrainConfigError("batch size M must be >= 2")
        if self.epochs < 1:
            raise TrainConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise TrainConfigError("lr must be positive")
        if self.checkpoint_every < 0:
            raise TrainConfigError("checkpoint_every must be >= 0")
        if self.cluster_restarts < 1:
            raise TrainConfigError("cluster_restarts must be >= 1")
        LossConfig(self.temperature, self.similarity)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.temperature, self.similarity)


@dataclass
class Stage2Config:
    num_clusters: int | None = None
    iterations: int = 3
    epochs_per_iteration: int = 5
    margin: float = 0.2
    scale: float = 30.0
    lr: float = 1e-4
    M: int = 32
    reuse_stage_one_projectors: bool = True
    cluster_seed: int = 0

    def __post_init__(self):
        if self.num_clusters is not None and self.num_clusters < 2:
            raise TrainConfigError("stage two needs at least 2 clusters (AAM-softmax needs >= 2 classes)")
        if self.iterations < 1 or self.epochs_per_iteration < 1:
            raise TrainConfigError("iterations and epochs_per_iteration must be >= 1")
        if self.M < 1:
            raise TrainConfigError("batch size must be >= 1")


# ---------------------------------------------------------------------------
# run state


@dataclass
class RunResult:
    bundle: ModelBundle
    log: list[dict]
    trajectory: list[tuple[int, int]]
    final_C: int | None
    best_epoch: int
    last_bundle: ModelBundle


@dataclass
class _State:
    bundle: ModelBundle
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    labels: np.ndarray | None = None
    progressive: ProgressiveState | None = None
    iteration: int = 0
    best_eer: float = math.inf
    best_epoch: int = -1
    best_C: int | None = None
    best_arrays: dict | None = None
    log: list = field(default_factory=list)


def _bundle_arrays(bundle: ModelBundle) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in bundle.named_parameters().items()}


def _bundle_from(arrays: dict[str, np.ndarray], template: ModelBundle) -> ModelBundle:
    b = template.copy()
    b.speaker_head = b.face_head = None
    b.replace(arrays)
    return b


def save_train_state(path, state: _State, stage: str, extra_meta: dict | None = None) -> None:
    tensors = dict(_bundle_arrays(state.bundle))
    for name, arr in state.adam.m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in state.adam.v.items():
        tensors[f"adam.v.{name}"] = arr
    if state.best_arrays is not None:
        for name, arr in state.best_arrays.items():
            tensors[f"best.{name}"] = arr
    meta = {
        "stage": stage,
        "epoch": state.epoch,
        "iteration": state.iteration,
        "adam": {k.name: getattr(state.adam, k.name) for k in fields(AdamState) if k.name not in ("m", "v")},
        "rng": state.rng.bit_generator.state,
        "labels": None if state.labels is None else [int(x) for x in state.labels],
        "progressive": None if state.progressive is None else state.progressive.to_dict(),
        "best": {"eer": state.best_eer if math.isfinite(state.best_eer) else None,
                 "epoch": state.best_epoch, "C": state.best_C},
        "log": state.log,
        "projector_final_gelu": state.bundle.speaker_projector.final_gelu,
    }
    meta.update(extra_meta or {})
    save_checkpoint(path, tensors, meta)


def load_train_state(path) -> tuple[_State, dict]:
    from .model import bundle_from_arrays

    arrays, meta = load_checkpoint(path)
    model = {k: v for k, v in arrays.items() if not k.startswith(("adam.", "best."))}
    bundle = bundle_from_arrays(model, final_gelu=meta.get("projector_final_gelu", True))
    adam = AdamState(**meta["adam"])
    adam.m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
    adam.v = {k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    best = {k[len("best."):]: v for k, v in arrays.items() if k.startswith("best.")}
    state = _State(
        bundle=bundle, adam=adam, rng=rng, epoch=meta["epoch"],
        labels=None if meta["labels"] is None else np.asarray(meta["labels"], dtype=np.int64),
        progressive=None if meta["progressive"] is None else ProgressiveState.from_dict(meta["progressive"]),
        iteration=meta["iteration"],
        best_eer=math.inf if meta["best"]["eer"] is None else meta["best"]["eer"],
        best_epoch=meta["best"]["epoch"], best_C=meta["best"]["C"],
        best_arrays=best or None, log=meta["log"],
    )
    return state, meta


# ---------------------------------------------------------------------------
# helpers


@contextmanager
def _diverged_at(epoch: int):
    try:
        yield
    except NonFiniteError as exc:
        raise TrainingDiverged(epoch, str(exc)) from exc


def _check_finite(value: float, epoch: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(epoch, "loss")


def speaker_embed_clean(bundle: ModelBundle, corpus: Corpus) -> np.ndarray:
    return speaker_encode(bundle.speaker_encoder, Tensor(corpus.speech)).numpy()


def cluster_multimodal(corpus: Corpus, bundle: ModelBundle, C: int, seed: int = 0,
                       use_face: bool = True, n_init: int = 20) -> ClusterAssignment:
    """k-means over the concatenated projected embeddings of clean views.

    With ``use_face=False`` the clustering runs on speaker embeddings alone.
    """
    if use_face:
        points = multimodal_embed(bundle, corpus.speech, corpus.face)
    else:
        points = speaker_embed_clean(bundle, corpus)
    return kmeans(points, C, seed, n_init=n_init)


def _query_embeddings(bundle: ModelBundle, corpus: Corpus, use_face: bool) -> np.ndarray:
    if use_face:
        return multimodal_embed(bundle, corpus.speech, corpus.face)
    return speaker_embed_clean(bundle, corpus)


def _validate(bundle: ModelBundle, validation: Corpus, config: TrainConfig, with_face: bool) -> dict:
    return verification_eers(bundle, validation, config.sampling.face_aug, config.eval_seed, with_face)


def _positive_metrics(sets, corpus: Corpus, reference: np.ndarray | None) -> tuple[float | None, float]:
    acc = pair_accuracy(sets, corpus.speaker_ids)
    d = diversity_report(sets, reference).D if reference is not None else None
    return d, acc


def _write_log(path: Path | None, log: list[dict]) -> None:
    if path is None:
        return
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _record(stage: str, epoch: int, C, loss: float, eers: dict, D, acc) -> dict:
    return {"stage": stage, "epoch": epoch, "C": C, "train_loss": loss,
            "val_eer_s": eers["eer_s"], "val_eer_f": eers["eer_f"], "val_eer_sf": eers["eer_sf"],
            "D": D, "pair_accuracy": acc}


def _mcl_grads(bundle: ModelBundle, batch, config: TrainConfig) -> tuple[float, dict]:
    tape = GradTape()
    params = bundle.named_parameters()
    ys = speaker_encode(bundle.speaker_encoder, Tensor(batch.speech), tape)
    if config.use_face:
        yf = face_encode(bundle.face_encoder, Tensor(batch.face), tape)
        zs = project(bundle.speaker_projector, ys, tape)
        zf = project(bundle.face_projector, yf, tape)
        loss = combined_mcl_loss(ys, yf, zs, zf, config.loss, tape)
        names = [n for n in params if not n.endswith("_head")]
    else:
        loss = ntxent_loss(ys, config.loss, tape)
        names = [n for n in params if n.startswith("speaker_encoder.")]
    grads = tape.backward(loss)
    return loss.item(), {n: grads[params[n]] for n in names}


def _apply(bundle: ModelBundle, adam: AdamState, grads: dict, epoch: int) -> None:
    params = {n: t.data for n, t in bundle.named_parameters().items() if n in grads}
    new = adam_step(adam, params, grads)
    for n, arr in new.items():
        if not np.all(np.isfinite(arr)):
            raise TrainingDiverged(epoch, f"parameter {n}")
    bundle.replace(new)


# ---------------------------------------------------------------------------
# stage one


def _positive_sets(strategy: Strategy, state: _State, corpus: Corpus, config: TrainConfig,
                   reference: np.ndarray | None):
    if strategy == Strategy.PPP:
        return SelfPositives(corpus.N)
    if strategy == Strategy.DPP_CLUSTER:
        return ClusterPositives(state.labels)
    if strategy == Strategy.DPP_KNN:
        return knn_positive_sets(_query_embeddings(state.bundle, corpus, config.use_face), config.sampling.K)
    if strategy == Strategy.DPP_THRESHOLD:
        return threshold_positive_sets(_query_embeddings(state.bundle, corpus, config.use_face), config.sampling.T)
    return oracle_positive_sets(corpus.speaker_ids, strategy.value, reference)


def _stage_one(corpus: Corpus, config: TrainConfig, validation: Corpus | None,
               reference: np.ndarray | None, run_dir, resume, stage: str,
               stop_after: int | None = None) -> RunResult:
    strategy = config.sampling.strategy
    validation = validation if validation is not None else generate_corpus(corpus.config, "validation")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "metrics.jsonl" if run_dir is not None else None
    n = corpus.N
    if config.M > n:
        raise TrainConfigError(f"batch size {config.M} exceeds corpus size {n}")
    if strategy in (Strategy.ORACLE_C2, Strategy.ORACLE_C3) and reference is None:
        raise TrainConfigError("ORACLE_C2/C3 need reference embeddings")

    if resume is not None:
        state, _ = load_train_state(resume)
    else:
        bundle = ModelBundle.initialize(config.model, config.seed)
        state = _State(bundle, AdamState(lr=config.lr), np.random.default_rng([config.seed, 1]))
        if strategy == Strategy.DPP_CLUSTER:
            c0 = n if config.initial_C is None else config.initial_C
            if not config.floor_C <= c0 <= n:
                raise TrainConfigError(f"initial_C must lie in [{config.floor_C}, {n}]")
            state.progressive = ProgressiveState(c0, config.stall_window, config.floor_C)
            state.labels = (np.arange(n) if c0 == n else
                            cluster_multimodal(corpus, bundle, c0, config.seed, config.use_face,
                                               config.cluster_restarts).labels)

    while state.epoch < config.epochs:
        epoch = state.epoch
        state.adam.epoch = epoch
        if state.progressive is not None:
            C_now = state.progressive.current_C
        else:
            # PPP is the C = N end of the cluster schedule; other samplers have no C
            C_now = n if strategy == Strategy.PPP else None
        sets = _positive_sets(strategy, state, corpus, config, reference)
        losses = []
        for batch in epoch_batches(corpus, sets, config.M, state.rng, config.sampling):
            with _diverged_at(epoch):
                loss, grads = _mcl_grads(state.bundle, batch, config)
            _check_finite(loss, epoch)
            losses.append(loss)
            _apply(state.bundle, state.adam, grads, epoch)
        train_loss = float(np.mean(losses))
        eers = _validate(state.bundle, validation, config, config.use_face)
        D, acc = _positive_metrics(sets, corpus, reference)
        state.log.append(_record(stage, epoch, C_now, train_loss, eers, D, acc))
        if eers["eer_s"] < state.best_eer:
            state.best_eer, state.best_epoch, state.best_C = eers["eer_s"], epoch, C_now
            state.best_arrays = {k: v.copy() for k, v in _bundle_arrays(state.bundle).items()}

        if state.progressive is not None:
            before = state.progressive.current_C
            decision = progressive_step(state.progressive, eers["eer_s"], epoch)
            C_next = decision.new_C
            if C_next != before or (config.recluster_every_epoch and C_next < n):
                state.labels = (np.arange(n) if C_next == n else
                                cluster_multimodal(corpus, state.bundle, C_next, config.seed + epoch + 1,
                                                   config.use_face, config.cluster_restarts).labels)
        state.epoch += 1
        _write_log(log_path, state.log)
        if run_dir is not None and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
            save_train_state(run_dir / f"state_epoch{state.epoch:04d}.ckpt", state, stage)
        if stop_after is not None and state.epoch >= stop_after:
            break

    best = _bundle_from(state.best_arrays, state.bundle)
    trajectory = [(r["epoch"], r["C"]) for r in state.log if r["C"] is not None]
    best.extra = {"final_C": state.best_C, "best_epoch": state.best_epoch, "stage": stage}
    return RunResult(best, state.log, trajectory, state.best_C, state.best_epoch, state.bundle)


def train_mcl(corpus: Corpus, config: TrainConfig, validation: Corpus | None = None,
              reference: np.ndarray | None = None, run_dir=None, resume=None,
              stop_after: int | None = None) -> RunResult:
    """MCL with poor-man's positive pairs (unless another strategy is configured)."""
    return _stage_one(corpus, config, validation, reference, run_dir, resume, "mcl", stop_after)


def train_mcl_dpp(corpus: Corpus, config: TrainConfig, validation: Corpus | None = None,
                  reference: np.ndarray | None = None, run_dir=None, resume=None,
                  stop_after: int | None = None) -> RunResult:
    """MCL-DPP: cluster-based positives with the progressive C controller.

    C starts at N (every clip its own cluster, i.e. plain MCL). After each
    epoch the validation speaker EER feeds the controller; the assignment is
    recomputed whenever C halves and, with ``recluster_every_epoch``, after
    every later epoch at the current C.
    """
    if config.sampling.strategy == Strategy.PPP:
        config = replace(config, sampling=replace(config.sampling, strategy=Strategy.DPP_CLUSTER))
    return _stage_one(corpus, config, validation, reference, run_dir, resume, "mcl-dpp", stop_after)


# ---------------------------------------------------------------------------
# stage two


def _aam_grads(encoder_prefix: str, head_name: str, bundle: ModelBundle, views: np.ndarray,
               labels: np.ndarray, cfg: Stage2Config, face: bool) -> tuple[float, dict]:
    tape = GradTape()
    params = bundle.named_parameters()
    enc = bundle.face_encoder if face else bundle.speaker_encoder
    head = params[head_name]
    y = l2_normalize(speaker_encode(enc, Tensor(views), tape), tape)
    w = l2_normalize(head, tape)
    loss = aam_softmax_loss(aam_logits(w, y, labels, cfg.margin, cfg.scale, tape), labels, tape)
    grads = tape.backward(loss)
    names = [n for n in params if n.startswith(encoder_prefix + ".")] + [head_name]
    return loss.item(), {n: grads[params[n]] for n in names}


def _dense_labels(labels) -> np.ndarray:
    _, inv = np.unique(np.asarray(labels), return_inverse=True)
    return inv.astype(np.int64)


def _stage_two_points(bundle: ModelBundle, corpus: Corpus, cfg: Stage2Config) -> np.ndarray:
    if cfg.reuse_stage_one_projectors:
        return multimodal_embed(bundle, corpus.speech, corpus.face)
    # alternative reading: refreshed encoder embeddings, each unit-normalized
    ys = speaker_embed_clean(bundle, corpus)
    yf = face_encode(bundle.face_encoder, Tensor(corpus.face)).numpy()
    return np.hstack([ys / np.linalg.norm(ys, axis=1, keepdims=True),
                      yf / np.linalg.norm(yf, axis=1, keepdims=True)])


def stage_two_clusters(corpus: Corpus, bundle: ModelBundle, cfg: Stage2Config) -> int:
    """Fixed cluster count for stage two.

    An explicit ``num_clusters`` wins; otherwise the C at stage one's best
    validation epoch; otherwise an elbow estimate on a log-spaced grid.
    """
    if cfg.num_clusters is not None:
        return cfg.num_clusters
    c = bundle.extra.get("final_C")
    if c is not None and 2 <= c < corpus.N:
        return int(c)
    points = _stage_two_points(bundle, corpus, cfg)
    grid = sorted({int(round(x)) for x in np.geomspace(2, corpus.N / 2, 9)})
    return elbow_estimate(inertia_curve(points, grid, cfg.cluster_seed))


def train_stage2(corpus: Corpus, bundle: ModelBundle, stage2: Stage2Config,
                 config: TrainConfig | None = None, validation: Corpus | None = None,
                 labels_override=None, run_dir=None, resume=None,
                 stop_after: int | None = None) -> RunResult:
    """Pseudo-label loop: cluster at a fixed C, then AAM-train each encoder.

    Each iteration clusters the multimodal embeddings (stage-one projectors
    stay frozen), draws fresh AAM heads, and trains the speaker and face
    encoders independently on the pseudo labels. ``labels_override``
    replaces the clustering with given labels (supervised topline).
    """
    config = config or TrainConfig()
    validation = validation if validation is not None else generate_corpus(corpus.config, "validation")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "metrics.jsonl" if run_dir is not None else None
    n = corpus.N
    if labels_override is not None:
        fixed = _dense_labels(labels_override)
        if len(fixed) != n:
            raise TrainConfigError("labels_override must have one label per clip")
        C2 = int(fixed.max()) + 1
    else:
        fixed = None
        C2 = stage_two_clusters(corpus, bundle, stage2)
    if C2 < 2:
        raise TrainConfigError("stage two needs at least 2 clusters (AAM-softmax needs >= 2 classes)")
    total_epochs = stage2.iterations * stage2.epochs_per_iteration

    if resume is not None:
        state, _ = load_train_state(resume)
    else:
        state = _State(bundle.copy(), AdamState(lr=stage2.lr), np.random.default_rng([config.seed, 2]))
        state.bundle.extra = dict(bundle.extra)

    while state.epoch < total_epochs:
        epoch = state.epoch
        it, local = divmod(epoch, stage2.epochs_per_iteration)
        b = state.bundle
        if local == 0:
            labels = fixed if fixed is not None else kmeans(
                _stage_two_points(b, corpus, stage2), C2, stage2.cluster_seed + it).labels
            state.labels = _dense_labels(labels) if fixed is None else fixed
            k = int(state.labels.max()) + 1
            head_rng = np.random.default_rng([config.seed, 3, it])
            b.speaker_head = init_class_head(k, b.speaker_encoder.output_dim, head_rng)
            b.face_head = init_class_head(k, b.face_encoder.output_dim, head_rng)
            state.adam = AdamState(lr=stage2.lr)
            state.iteration = it
        state.adam.epoch = local
        labels = state.labels
        losses = []
        perm = state.rng.permutation(n)
        for start in range(0, n - stage2.M + 1, stage2.M):
            ids = perm[start:start + stage2.M]
            speech = augment(corpus.speech[ids], config.sampling.speech_aug, state.rng)
            face = augment(corpus.face[ids], config.sampling.face_aug, state.rng)
            with _diverged_at(epoch):
                ls, gs = _aam_grads("speaker_encoder", "speaker_head", b, speech, labels[ids], stage2, False)
                lf, gf = _aam_grads("face_encoder", "face_head", b, face, labels[ids], stage2, True)
            _check_finite(ls + lf, epoch)
            losses.append(ls + lf)
            _apply(b, state.adam, {**gs, **gf}, epoch)
            b.normalize_heads()
        eers = _validate(b, validation, config, True)
        acc = pair_accuracy(ClusterPositives(labels), corpus.speaker_ids)
        state.log.append(_record("mcl-dpp-c", epoch, C2, float(np.mean(losses)), eers, None, acc))
        if eers["eer_s"] < state.best_eer:
            state.best_eer, state.best_epoch, state.best_C = eers["eer_s"], epoch, C2
            state.best_arrays = {k: v.copy() for k, v in _bundle_arrays(b).items()
                                 if not k.endswith("_head")}
        state.epoch += 1
        _write_log(log_path, state.log)
        if run_dir is not None and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
            save_train_state(run_dir / f"state_epoch{state.epoch:04d}.ckpt", state, "mcl-dpp-c")
        if stop_after is not None and state.epoch >= stop_after:
            break

    best = _bundle_from(state.best_arrays, state.bundle)
    best.extra = {"final_C": C2, "best_epoch": state.best_epoch, "stage": "mcl-dpp-c"}
    return RunResult(best, state.log, [(r["epoch"], r["C"]) for r in state.log], C2,
                     state.best_epoch, state.bundle)


# ---------------------------------------------------------------------------
# reference encoder for diversity


def train_reference_encoder(reference: Corpus, epochs: int = 30, seed: int = 0, M: int = 32,
                            lr: float = 1e-3, hidden_dim: int = 256, depth: int = 3,
                            embed_dim: int = 192, margin: float = 0.2, scale: float = 30.0,
                            augmentation=None):
    """Supervised AAM speaker encoder on a disjoint corpus (ground-truth labels)."""
    from .model import EncoderParams

    rng = np.random.default_rng([seed, 4])
    enc = init_encoder(reference.config.speech_dim, embed_dim, rng, hidden_dim, depth)
    labels = _dense_labels(reference.speaker_ids)
    head = init_class_head(int(labels.max()) + 1, embed_dim, rng)
    adam = AdamState(lr=lr)
    cfg = Stage2Config(margin=margin, scale=scale)
    aug = augmentation if augmentation is not None else SamplingConfig().speech_aug
    for epoch in range(epochs):
        adam.epoch = epoch
        perm = rng.permutation(reference.N)
        for start in range(0, reference.N - M + 1, M):
            ids = perm[start:start + M]
            views = augment(reference.speech[ids], aug, rng)
            tape = GradTape()
            y = l2_normalize(speaker_encode(enc, Tensor(views), tape), tape)
            w = l2_normalize(head, tape)
            loss = aam_softmax_loss(aam_logits(w, y, labels[ids], cfg.margin, cfg.scale, tape), labels[ids], tape)
            grads = tape.backward(loss)
            params = {f"{k}.{kind}": t for k, (wt, bt) in enumerate(enc.layers)
                      for kind, t in (("weight", wt), ("bias", bt))}
            params["head"] = head
            new = adam_step(adam, {k: t.data for k, t in params.items()},
                            {k: grads[t] for k, t in params.items()})
            enc = EncoderParams([(Tensor(new[f"{k}.weight"]), Tensor(new[f"{k}.bias"]))
                                 for k in range(len(enc.layers))])
            head = Tensor(new["head"] / np.linalg.norm(new["head"], axis=1, keepdims=True))
    return enc


def reference_embeddings(encoder, corpus: Corpus) -> np.ndarray:
    """Unit-normalized reference speaker embeddings of every clip."""
    y = speaker_encode(encoder, Tensor(corpus.speech)).numpy()
    return y / np.linalg.norm(y, axis=1, keepdims=True)
