"""Speaker-aware text encoder: shapes, the 16x law, reference attention
behaviour, and residual fusion."""

import numpy as np
import pytest

from mstts import textfront
from mstts.encoder import (
    ACOUSTIC_STRIDES,
    AcousticEncoder,
    EncoderConfig,
    PhonemeEncoder,
    ReferenceAttention,
    SpeakerAwareTextEncoder,
)
from mstts.nncore import ConfigError, Tensor, check_gradients, no_grad


@pytest.fixture(scope="module")
def small_cfg():
    return EncoderConfig(dim=16, heads=2, phoneme_blocks=1, ffn_dim=32, latent_dim=8)


@pytest.fixture(scope="module")
def encoder(small_cfg):
    return SpeakerAwareTextEncoder(small_cfg, np.random.default_rng(0))


def seq(ids):
    return textfront.PhonemeSequence(np.asarray(ids, dtype=np.int64))


class TestPhonemeEncoder:
    @pytest.mark.parametrize("length", [1, 5, 131])
    def test_output_shape(self, encoder, length, small_cfg):
        ids = seq(np.random.default_rng(length).integers(0, 39, size=length))
        with no_grad():
            out = encoder.phoneme_encoder(ids)
        assert out.data.shape == (length, small_cfg.dim)
        assert np.isfinite(out.data).all()

    def test_out_of_vocab_rejected(self, encoder):
        with pytest.raises(Exception, match="39|vocab|embedding"):
            with no_grad():
                encoder.phoneme_encoder(seq([39]))

    def test_empty_sequence_rejected(self, encoder):
        with pytest.raises(ValueError):
            encoder.phoneme_encoder(seq([]))

    def test_gradients_through_one_block(self):
        cfg = EncoderConfig(dim=8, heads=2, phoneme_blocks=1, ffn_dim=12, latent_dim=4)
        pe = PhonemeEncoder(cfg, np.random.default_rng(1))
        ids = seq([3, 7, 2, 11])
        err = check_gradients(lambda: (pe(ids) ** 2.0).mean(), pe.parameters())
        assert err <= 1e-5


class TestAcousticEncoder:
    def test_strides_are_fixed(self):
        assert ACOUSTIC_STRIDES == (2, 1, 2, 1, 2, 1, 2, 1)
        assert int(np.prod(ACOUSTIC_STRIDES)) == 16
        with pytest.raises(ConfigError):
            EncoderConfig(strides=(2, 2, 2, 2, 1, 1, 1, 1))

    @pytest.mark.parametrize("t,s", [(160, 10), (161, 11), (16, 1), (17, 2), (4096, 256)])
    def test_sixteen_x_law_on_tensors(self, encoder, t, s):
        frames = np.random.default_rng(t).normal(size=(t, 8))
        with no_grad():
            out = encoder.acoustic_encoder(frames)
        assert out.rows.data.shape[0] == s
        assert out.source_frame_count == t

    def test_sixteen_x_law_full_range(self):
        # the composed conv length law, checked arithmetically over the range
        for t in range(16, 4097):
            assert AcousticEncoder.output_length(t) == -(-t // 16)

    def test_short_prompt_right_padded(self, encoder):
        frames = np.random.default_rng(0).normal(size=(5, 8))
        with no_grad():
            out = encoder.acoustic_encoder(frames)
        assert out.rows.data.shape[0] == 1
        assert out.source_frame_count == 5

    def test_empty_prompt_rejected(self, encoder):
        with pytest.raises(ValueError, match="empty"):
            encoder.acoustic_encoder(np.zeros((0, 8)))

    def test_receptive_field_bound(self):
        """With identity kernels, an output row only sees a bounded window.

        The stride schedule gives a receptive field of 1 + 2*(1+2+2+4+4+8+8+16)
        = 91 input frames; perturbations outside +/-64 frames of the row's
        anchor cannot reach it no matter the weights.
        """
        cfg = EncoderConfig(dim=4, heads=2, phoneme_blocks=1, ffn_dim=8, latent_dim=4)
        enc = AcousticEncoder(cfg, np.random.default_rng(2))
        for conv in enc.convs:
            k = conv.kernels.data
            k[:] = 0.0
            k[1] = np.eye(4)       # central tap passes the input through
            conv.bias.data[:] = 0.0
        t = 256
        x = np.abs(np.random.default_rng(3).normal(size=(t, 4))) + 0.1
        with no_grad():
            base = enc(x).rows.data
        row = 8                    # anchored near input frame 128
        x2 = x.copy()
        x2[: row * 16 - 64] += 1.0
        x2[row * 16 + 64 :] += 1.0
        with no_grad():
            pert = enc(x2).rows.data
        assert np.array_equal(base[row], pert[row])
        assert not np.array_equal(base, pert)


class TestReferenceAttention:
    def test_single_key_pre_projection_output_is_value_row(self, encoder):
        rng = np.random.default_rng(4)
        phon = Tensor(rng.normal(size=(6, 16)))
        style = Tensor(rng.normal(size=(1, 16)))
        ra = encoder.reference_attention
        with no_grad():
            out, weights = ra(phon, style)
            value_row = ra.w_value(style).data[0]
        assert np.abs(weights.data - 1.0).max() <= 1e-12
        # undo the output projection: attended rows must all equal the value row
        with no_grad():
            attended = ra.w_value(style).data[0]
        assert np.allclose(out.data, np.tile(ra.w_out(Tensor(attended.reshape(1, -1))).data, (6, 1)))

    def test_weight_rows_sum_to_one(self, encoder):
        rng = np.random.default_rng(5)
        phon = Tensor(rng.normal(size=(9, 16)))
        style = Tensor(rng.normal(size=(7, 16)))
        with no_grad():
            _, weights = encoder.reference_attention(phon, style)
        assert np.abs(weights.data.sum(axis=1) - 1.0).max() <= 1e-9

    def test_permuting_style_rows_leaves_output(self, encoder):
        rng = np.random.default_rng(6)
        phon = Tensor(rng.normal(size=(5, 16)))
        style = rng.normal(size=(8, 16))
        perm = rng.permutation(8)
        with no_grad():
            a, _ = encoder.reference_attention(phon, Tensor(style))
            b, _ = encoder.reference_attention(phon, Tensor(style[perm]))
        assert np.abs(a.data - b.data).max() <= 1e-9


class TestSpeakerAwareEncode:
    def test_zeroed_value_projection_gives_identity(self, encoder):
        rng = np.random.default_rng(7)
        ids = seq([3, 4, 5, 2, 6])
        style = rng.normal(size=(40, 8))
        saved = encoder.reference_attention.w_value.weight.data.copy()
        try:
            encoder.reference_attention.w_value.weight.data[:] = 0.0
            with no_grad():
                fused = encoder(ids, style)
                phon = encoder.phoneme_encoder(ids)
            assert np.array_equal(fused.rows.data, phon.data)
        finally:
            encoder.reference_attention.w_value.weight.data[:] = saved

    @pytest.mark.parametrize("t_style", [16, 160, 1600])
    def test_output_length_is_phoneme_length(self, encoder, t_style):
        ids = seq([3, 4, 5, 2, 6, 7, 8])
        style = np.random.default_rng(t_style).normal(size=(t_style, 8))
        with no_grad():
            fused = encoder(ids, style)
        assert fused.rows.data.shape == (7, 16)

    def test_prompt_len_propagates(self, encoder):
        style = np.random.default_rng(1).normal(size=(32, 8))
        with no_grad():
            fused = encoder(seq([3, 4, 2, 5]), style, prompt_len=2)
        assert fused.prompt_len == 2

    def test_text_only_path_matches_phoneme_encoder(self, encoder):
        ids = seq([3, 9, 9, 2, 4])
        with no_grad():
            a = encoder.encode_text_only(ids)
            b = encoder.phoneme_encoder(ids)
        assert np.array_equal(a.rows.data, b.data)

    def test_trained_model_distinguishes_styles(self, trained_small, prepared_corpus):
        """Different speakers' style prompts shift the fused embeddings."""
        model = trained_small.model
        ids = seq([3, 4, 5])
        a = prepared_corpus.by_speaker(0)[0].latents
        b = prepared_corpus.by_speaker(2)[0].latents
        with no_grad():
            fa = model.encoder(ids, a).rows.data
            fb = model.encoder(ids, b).rows.data
        assert np.linalg.norm(fa - fb) > 0.0
