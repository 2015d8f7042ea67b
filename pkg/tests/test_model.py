import math

import numpy as np
import pytest

from dppssl.model import (
    CheckpointError,
    EncoderParams,
    ModelBundle,
    ModelConfig,
    ProjectorParams,
    aam_logits,
    face_encode,
    init_class_head,
    init_encoder,
    init_projector,
    load_bundle,
    load_checkpoint,
    multimodal_embed,
    project,
    save_bundle,
    save_checkpoint,
    speaker_encode,
)
from dppssl.numerics import (
    DimensionError,
    GradTape,
    Tensor,
    finite_difference_gradient,
    matmul_nt,
    relative_error,
    reshape,
    total,
)

from conftest import TINY_MODEL


def _sq_norm(y: Tensor, tape):
    row = reshape(y, (1, -1), tape)
    return total(matmul_nt(row, row, tape), tape)


class TestEncoders:
    def test_identity_layer_passes_through(self):
        enc = EncoderParams([(Tensor(np.eye(3)), Tensor(np.zeros(3)))])
        x = Tensor([0.3, -2.0, 5.0])
        np.testing.assert_array_equal(speaker_encode(enc, x).data, x.data)
        np.testing.assert_array_equal(face_encode(enc, x).data, x.data)

    def test_default_dims(self):
        cfg = ModelConfig()
        b = ModelBundle.initialize(cfg, 0)
        assert b.speaker_encoder.output_dim == 192
        assert b.face_encoder.output_dim == 512
        assert b.speaker_projector.output_dim == 512
        assert [w.shape[0] for w, _ in b.speaker_projector.layers] == [1024, 1024, 256, 512]

    def test_seed_determinism(self):
        a = ModelBundle.initialize(TINY_MODEL, 7)
        b = ModelBundle.initialize(TINY_MODEL, 7)
        x = Tensor(np.linspace(-1, 1, TINY_MODEL.speech_dim))
        assert speaker_encode(a.speaker_encoder, x).data.tobytes() == \
            speaker_encode(b.speaker_encoder, x).data.tobytes()

    def test_init_bounds(self, rng):
        enc = init_encoder(10, 4, rng, hidden_dim=6, depth=2)
        assert np.abs(enc.layers[0][0].data).max() <= 1 / math.sqrt(10)
        assert np.abs(enc.layers[1][0].data).max() <= 1 / math.sqrt(6)

    def test_shape_mismatch(self, tiny_bundle):
        with pytest.raises(DimensionError):
            speaker_encode(tiny_bundle.speaker_encoder, Tensor(np.ones(3)))

    def test_layers_must_chain(self):
        with pytest.raises(DimensionError):
            EncoderParams([(Tensor(np.ones((3, 2))), Tensor(np.ones(3))),
                           (Tensor(np.ones((2, 4))), Tensor(np.ones(2)))])

    @pytest.mark.parametrize("which", ["speaker", "face"])
    def test_first_layer_gradient(self, tiny_bundle, rng, which):
        enc = getattr(tiny_bundle, f"{which}_encoder")
        encode = speaker_encode if which == "speaker" else face_encode
        x = Tensor(rng.standard_normal(enc.input_dim))
        W0, b0 = enc.layers[0]
        tape = GradTape()
        grads = tape.backward(_sq_norm(encode(enc, x, tape), tape))

        def f(w):
            probe = EncoderParams([(Tensor(w), b0)] + enc.layers[1:])
            return float(np.sum(encode(probe, x).data ** 2))

        fd = finite_difference_gradient(f, W0.data)
        assert relative_error(grads[W0], fd) < 1e-5


class TestProjector:
    def test_unit_norm(self, tiny_bundle, rng):
        for _ in range(20):
            e = Tensor(rng.standard_normal(TINY_MODEL.speaker_embed_dim) * rng.uniform(0.1, 10))
            z = project(tiny_bundle.speaker_projector, e)
            assert abs(np.linalg.norm(z.data) - 1.0) < 1e-12

    def test_equal_inputs_equal_outputs(self, tiny_bundle):
        e = Tensor(np.arange(TINY_MODEL.face_embed_dim, dtype=float))
        a = project(tiny_bundle.face_projector, e)
        b = project(tiny_bundle.face_projector, Tensor(e.data.copy()))
        np.testing.assert_array_equal(a.data, b.data)

    def test_layer_count(self, rng):
        with pytest.raises(DimensionError):
            ProjectorParams(init_projector(4, rng, widths=(3, 3, 3, 3)).layers[:3])

    def test_gradient(self, tiny_bundle, rng):
        e = rng.standard_normal(TINY_MODEL.speaker_embed_dim)
        probe = rng.standard_normal(tiny_bundle.speaker_projector.output_dim)
        tape = GradTape()
        et = Tensor(e)
        z = project(tiny_bundle.speaker_projector, et, tape)
        loss = total(matmul_nt(reshape(z, (1, -1), tape), Tensor(probe[None]), tape), tape)
        g = tape.backward(loss)[et]
        fd = finite_difference_gradient(
            lambda v: float(project(tiny_bundle.speaker_projector, Tensor(v)).data @ probe), e)
        assert relative_error(g, fd) < 1e-5

    def test_final_gelu_flag(self, rng):
        a = init_projector(4, np.random.default_rng(0), widths=(3, 3, 3, 3), final_gelu=True)
        b = ProjectorParams(a.layers, final_gelu=False)
        e = Tensor(rng.standard_normal(4))
        assert not np.array_equal(project(a, e).data, project(b, e).data)


class TestMultimodal:
    def test_concat_of_units(self):
        zs, zf = np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0])
        z = np.concatenate([zs, zf])
        assert abs(np.linalg.norm(z) - math.sqrt(2)) < 1e-15

    def test_cosine_is_mean_of_halves(self, tiny_bundle, small_corpus):
        z = multimodal_embed(tiny_bundle, small_corpus.speech[:2], small_corpus.face[:2])
        d = tiny_bundle.speaker_projector.output_dim
        cos_s = z[0, :d] @ z[1, :d]
        cos_f = z[0, d:] @ z[1, d:]
        cos = z[0] @ z[1] / (np.linalg.norm(z[0]) * np.linalg.norm(z[1]))
        assert abs(cos - (cos_s + cos_f) / 2) < 1e-12

    def test_identical_clips(self, tiny_bundle, small_corpus):
        z = multimodal_embed(tiny_bundle, small_corpus.speech[[3, 3]], small_corpus.face[[3, 3]])
        assert abs(z[0] @ z[1] / 2 - 1.0) < 1e-12

    def test_missing_modality(self, tiny_bundle, small_corpus):
        with pytest.raises(ValueError):
            multimodal_embed(tiny_bundle, small_corpus.speech[0], None)


class TestAAM:
    def test_margin_free_is_cosine(self, rng):
        head = init_class_head(5, 4, rng)
        e = rng.standard_normal(4)
        e /= np.linalg.norm(e)
        logits = aam_logits(head, Tensor(e), 2, margin=0.0, scale=1.0)
        np.testing.assert_allclose(logits.data, head.data @ e, rtol=0, atol=1e-12)

    def test_aligned_true_class(self, rng):
        head = init_class_head(3, 6, rng)
        logits = aam_logits(head, Tensor(head.data[1]), 1, margin=0.2, scale=30.0)
        assert abs(logits.data[1] - 30 * math.cos(0.2)) < 1e-6

    def test_scalar_oracle(self, rng):
        for _ in range(20):
            head = init_class_head(6, 5, rng)
            e = rng.standard_normal(5)
            e /= np.linalg.norm(e)
            label = int(rng.integers(6))
            got = aam_logits(head, Tensor(e), label, margin=0.3, scale=12.0).data
            for j in range(6):
                c = sum(head.data[j, i] * e[i] for i in range(5))
                theta = math.acos(max(-1.0, min(1.0, c)))
                want = 12.0 * math.cos(theta + 0.3) if j == label else 12.0 * c
                assert abs(got[j] - want) < 1e-9

    def test_label_range(self, rng):
        head = init_class_head(3, 4, rng)
        with pytest.raises(IndexError):
            aam_logits(head, Tensor(head.data[0]), 3)

    def test_margin_range(self, rng):
        head = init_class_head(3, 4, rng)
        with pytest.raises(ValueError):
            aam_logits(head, Tensor(head.data[0]), 0, margin=math.pi / 2)

    def test_head_renormalized(self, tiny_bundle, rng):
        tiny_bundle.speaker_head = Tensor(rng.standard_normal((4, TINY_MODEL.speaker_embed_dim)) * 3)
        tiny_bundle.normalize_heads()
        np.testing.assert_allclose(np.linalg.norm(tiny_bundle.speaker_head.data, axis=1), 1.0, atol=1e-15)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_bundle, small_corpus, tmp_path):
        path = tmp_path / "m.ckpt"
        save_bundle(path, tiny_bundle, {"note": "x"})
        loaded, meta = load_bundle(path)
        assert meta["note"] == "x"
        a = multimodal_embed(tiny_bundle, small_corpus.speech, small_corpus.face)
        b = multimodal_embed(loaded, small_corpus.speech, small_corpus.face)
        assert a.tobytes() == b.tobytes()

    def test_header_magic(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, {"w": np.ones((2, 3))})
        raw = path.read_bytes()
        assert raw[:8] == b"DPPSSL01"
        tensors, _ = load_checkpoint(path)
        np.testing.assert_array_equal(tensors["w"], np.ones((2, 3)))

    def test_corruption(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, {"w": np.arange(6.0)})
        raw = bytearray(path.read_bytes())
        raw[-12] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, {"w": np.arange(6.0)})
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "c.ckpt"
        path.write_bytes(b"hello world, this is not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_copy_is_independent(self, tiny_bundle):
        clone = tiny_bundle.copy()
        name = "speaker_encoder.0.bias"
        clone.replace({name: np.zeros_like(clone.named_parameters()[name].data)})
        assert np.any(tiny_bundle.named_parameters()[name].data != 0)
