"""Speaker/face encoders, projectors, classification heads and checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    DimensionError,
    GradTape,
    Tensor,
    additive_angular_margin,
    concat,
    gelu,
    l2_normalize,
    linear_forward,
    matmul_nt,
    reshape,
)

CHECKPOINT_MAGIC = b"DPPSSL01"
CHECKPOINT_VERSION = 1

DEFAULT_PROJECTOR_WIDTHS = (1024, 1024, 256, 512)


class CheckpointError(Exception):
    """Unreadable, corrupted or incompatible checkpoint file."""


@dataclass
class EncoderParams:
    """MLP with GeLU between layers (none after the last)."""

    layers: list[tuple[Tensor, Tensor]]

    def __post_init__(self):
        for (w_prev, _), (w_next, _) in zip(self.layers, self.layers[1:]):
            if w_prev.shape[0] != w_next.shape[1]:
                raise DimensionError("encoder layer dims do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]


@dataclass
class ProjectorParams:
    """Four linear+GeLU layers followed by L2 normalization.

    ``final_gelu=False`` drops the activation on the last layer.
    """

    layers: list[tuple[Tensor, Tensor]]
    final_gelu: bool = True

    def __post_init__(self):
        if len(self.layers) != 4:
            raise DimensionError(f"projector needs exactly 4 layers, got {len(self.layers)}")
        for (w_prev, _), (w_next, _) in zip(self.layers, self.layers[1:]):
            if w_prev.shape[0] != w_next.shape[1]:
                raise DimensionError("projector layer dims do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]


def init_layers(dims, rng: np.random.Generator) -> list[tuple[Tensor, Tensor]]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((Tensor(w), Tensor(b)))
    return layers


def init_encoder(input_dim: int, output_dim: int, rng: np.random.Generator,
                 hidden_dim: int = 256, depth: int = 3) -> EncoderParams:
    if depth < 1:
        raise ValueError("encoder depth must be >= 1")
    dims = [input_dim] + [hidden_dim] * (depth - 1) + [output_dim]
    return EncoderParams(init_layers(dims, rng))


def init_projector(input_dim: int, rng: np.random.Generator,
                   widths=DEFAULT_PROJECTOR_WIDTHS, final_gelu: bool = True) -> ProjectorParams:
    return ProjectorParams(init_layers([input_dim, *widths], rng), final_gelu=final_gelu)


def init_class_head(num_classes: int, embed_dim: int, rng: np.random.Generator) -> Tensor:
    head = rng.standard_normal((num_classes, embed_dim))
    return Tensor(head / np.linalg.norm(head, axis=1, keepdims=True))


def _mlp(layers, x: Tensor, tape, final_act: bool) -> Tensor:
    for k, (w, b) in enumerate(layers):
        x = linear_forward(w, b, x, tape)
        if k < len(layers) - 1 or final_act:
            x = gelu(x, tape)
    return x


def encode(params: EncoderParams, x: Tensor, tape: GradTape | None = None) -> Tensor:
    if x.shape[-1] != params.input_dim:
        raise DimensionError(f"encoder expects input dim {params.input_dim}, got {x.shape[-1]}")
    return _mlp(params.layers, x, tape, final_act=False)


def speaker_encode(params: EncoderParams, segment: Tensor, tape: GradTape | None = None) -> Tensor:
    """Speaker embedding(s) for one speech segment or a batch of them."""
    return encode(params, segment, tape)


def face_encode(params: EncoderParams, frame: Tensor, tape: GradTape | None = None) -> Tensor:
    """Face embedding(s) for one face frame or a batch of them."""
    return encode(params, frame, tape)


def project(projector: ProjectorParams, embedding: Tensor, tape: GradTape | None = None) -> Tensor:
    if embedding.shape[-1] != projector.input_dim:
        raise DimensionError(
            f"projector expects input dim {projector.input_dim}, got {embedding.shape[-1]}"
        )
    h = _mlp(projector.layers, embedding, tape, final_act=projector.final_gelu)
    return l2_normalize(h, tape)


@dataclass
class ModelConfig:
    speech_dim: int = 40
    face_dim: int = 64
    speaker_embed_dim: int = 192
    face_embed_dim: int = 512
    hidden_dim: int = 256
    depth: int = 3
    projector_widths: tuple[int, ...] = DEFAULT_PROJECTOR_WIDTHS
    projector_final_gelu: bool = True


@dataclass
class ModelBundle:
    speaker_encoder: EncoderParams
    face_encoder: EncoderParams
    speaker_projector: ProjectorParams
    face_projector: ProjectorParams
    speaker_head: Tensor | None = None
    face_head: Tensor | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.speaker_projector.input_dim != self.speaker_encoder.output_dim:
            raise DimensionError("speaker projector input does not match encoder output")
        if self.face_projector.input_dim != self.face_encoder.output_dim:
            raise DimensionError("face projector input does not match encoder output")

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ModelBundle":
        rng = np.random.default_rng(seed)
        se = init_encoder(config.speech_dim, config.speaker_embed_dim, rng,
                          config.hidden_dim, config.depth)
        fe = init_encoder(config.face_dim, config.face_embed_dim, rng,
                          config.hidden_dim, config.depth)
        sp = init_projector(config.speaker_embed_dim, rng, config.projector_widths,
                            config.projector_final_gelu)
        fp = init_projector(config.face_embed_dim, rng, config.projector_widths,
                            config.projector_final_gelu)
        return cls(se, fe, sp, fp)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        groups = (
            ("speaker_encoder", self.speaker_encoder.layers),
            ("face_encoder", self.face_encoder.layers),
            ("speaker_projector", self.speaker_projector.layers),
            ("face_projector", self.face_projector.layers),
        )
        for prefix, layers in groups:
            for k, (w, b) in enumerate(layers):
                out[f"{prefix}.{k}.weight"] = w
                out[f"{prefix}.{k}.bias"] = b
        if self.speaker_head is not None:
            out["speaker_head"] = self.speaker_head
        if self.face_head is not None:
            out["face_head"] = self.face_head
        return out

    def replace(self, arrays: dict[str, np.ndarray]) -> None:
        """Swap in new values for the named parameters (optimizer write-back)."""
        groups = {
            "speaker_encoder": self.speaker_encoder.layers,
            "face_encoder": self.face_encoder.layers,
            "speaker_projector": self.speaker_projector.layers,
            "face_projector": self.face_projector.layers,
        }
        for name, value in arrays.items():
            if name in ("speaker_head", "face_head"):
                setattr(self, name, Tensor(value))
                continue
            prefix, k, kind = name.split(".")
            layers = groups[prefix]
            w, b = layers[int(k)]
            if kind == "weight":
                layers[int(k)] = (Tensor(value), b)
            else:
                layers[int(k)] = (w, Tensor(value))

    def copy(self) -> "ModelBundle":
        clone = bundle_from_arrays({k: v.data for k, v in self.named_parameters().items()},
                                   final_gelu=self.speaker_projector.final_gelu)
        clone.extra = dict(self.extra)
        return clone

    def normalize_heads(self) -> None:
        for name in ("speaker_head", "face_head"):
            head = getattr(self, name)
            if head is not None:
                h = head.data
                setattr(self, name, Tensor(h / np.linalg.norm(h, axis=1, keepdims=True)))


def multimodal_embed(bundle: ModelBundle, speech, face) -> np.ndarray:
    """Concatenated projected embedding ``z_s (+) z_f`` of clean views.

    Accepts one clip's views or row batches of them.
    """
    if speech is None or face is None:
        raise ValueError("multimodal embedding needs both speech and face views")
    zs = project(bundle.speaker_projector, speaker_encode(bundle.speaker_encoder, Tensor(speech)))
    zf = project(bundle.face_projector, face_encode(bundle.face_encoder, Tensor(face)))
    return concat([zs, zf]).numpy()


def aam_logits(class_head: Tensor, embedding: Tensor, true_label, margin: float = 0.2,
               scale: float = 30.0, tape: GradTape | None = None) -> Tensor:
    """Additive angular margin logits for one embedding or a batch.

    ``embedding`` rows and ``class_head`` rows are expected to be unit norm.
    A 1-D embedding with a scalar label yields a 1-D logit vector.
    """
    if not 0.0 <= margin < np.pi / 2:
        raise ValueError("margin must lie in [0, pi/2)")
    if scale <= 0:
        raise ValueError("scale must be positive")
    labels = np.atleast_1d(np.asarray(true_label))
    num_classes = class_head.shape[0]
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise IndexError(f"label out of range for {num_classes} classes")
    single = embedding.ndim == 1
    if single:
        embedding = reshape(embedding, (1, -1), tape)
    cos = matmul_nt(embedding, class_head, tape)
    logits = additive_angular_margin(cos, labels, margin, scale, tape)
    return reshape(logits, (num_classes,), tape) if single else logits


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 tensors plus a JSON metadata blob.

    Layout: magic, u32 version, u32 header length, JSON header with the
    name/shape table and metadata, row-major little-endian float64 payload,
    trailing CRC32 of everything before it.
    """
    table = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    header = json.dumps({"tensors": table, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<II", CHECKPOINT_VERSION, len(header))
    body += header
    for v in tensors.values():
        body += np.ascontiguousarray(v, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(raw) - 4:
        raise CheckpointError(f"{path}: payload size does not match header")
    return tensors, header["meta"]


def bundle_from_arrays(arrays: dict[str, np.ndarray], final_gelu: bool = True) -> ModelBundle:
    def layers(prefix):
        out = []
        k = 0
        while f"{prefix}.{k}.weight" in arrays:
            out.append((Tensor(arrays[f"{prefix}.{k}.weight"]), Tensor(arrays[f"{prefix}.{k}.bias"])))
            k += 1
        if not out:
            raise CheckpointError(f"checkpoint has no layers for {prefix}")
        return out

    bundle = ModelBundle(
        EncoderParams(layers("speaker_encoder")),
        EncoderParams(layers("face_encoder")),
        ProjectorParams(layers("speaker_projector"), final_gelu=final_gelu),
        ProjectorParams(layers("face_projector"), final_gelu=final_gelu),
    )
    if "speaker_head" in arrays:
        bundle.speaker_head = Tensor(arrays["speaker_head"])
    if "face_head" in arrays:
        bundle.face_head = Tensor(arrays["face_head"])
    return bundle


def save_bundle(path, bundle: ModelBundle, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["projector_final_gelu"] = bundle.speaker_projector.final_gelu
    save_checkpoint(path, {k: v.data for k, v in bundle.named_parameters().items()}, meta)


def load_bundle(path) -> tuple[ModelBundle, dict]:
    arrays, meta = load_checkpoint(path)
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith(("adam.", "best."))}
    bundle = bundle_from_arrays(model_arrays, final_gelu=meta.get("projector_final_gelu", True))
    return bundle, meta
