"""Acoustic decoder: AR causality, NAR conditioning rules, generation
contracts, and the checkpoint container."""

import warnings

import numpy as np
import pytest

from mstts.codec import NUM_STAGES
from mstts.config import ModelConfig
from mstts.decoder import (
    AcousticDecoder,
    DecoderConfig,
    EmptyGenerationWarning,
    SamplingConfig,
    ar_attention_mask,
)
from mstts.model import build_model, load_checkpoint, load_model, save_model
from mstts.nncore import no_grad

K = 16


@pytest.fixture(scope="module")
def decoder():
    return AcousticDecoder(
        DecoderConfig(dim=16, heads=2, ar_blocks=2, nar_blocks=2, ffn_dim=32,
                      codebook_size=K, max_generation_frames=12),
        np.random.default_rng(0),
    )


@pytest.fixture(scope="module")
def cond():
    return np.random.default_rng(1).normal(size=(7, 16))


class TestArForward:
    def test_causality_future_token_changes_nothing_before_it(self, decoder, cond):
        rng = np.random.default_rng(2)
        tokens = rng.integers(0, K, size=10)
        with no_grad():
            base = decoder.ar_forward(cond, tokens).data
        for t in range(1, 10):
            mutated = tokens.copy()
            mutated[t] = (mutated[t] + 5) % K
            with no_grad():
                pert = decoder.ar_forward(cond, mutated).data
            assert np.abs(pert[: t] - base[: t]).max() <= 1e-12
            assert np.abs(pert[t:] - base[t:]).max() > 0.0

    def test_text_region_globally_visible(self, decoder, cond):
        tokens = np.random.default_rng(3).integers(0, K, size=6)
        with no_grad():
            base = decoder.ar_forward(cond, tokens).data
        for row in range(cond.shape[0]):
            cond2 = cond.copy()
            cond2[row] += 0.25
            with no_grad():
                pert = decoder.ar_forward(cond2, tokens).data
            assert np.abs(pert[0] - base[0]).max() > 0.0

    def test_empty_token_sequence_gives_empty_logits(self, decoder, cond):
        with no_grad():
            out = decoder.ar_forward(cond, np.array([], dtype=np.int64))
        assert out.data.shape == (0, K + 1)

    def test_token_out_of_range_rejected(self, decoder, cond):
        with pytest.raises(ValueError, match="token ids"):
            decoder.ar_forward(cond, np.array([K + 1]))

    def test_training_logits_cover_every_token_plus_eos(self, decoder, cond):
        tokens = np.random.default_rng(4).integers(0, K, size=5)
        with no_grad():
            full = decoder.ar_training_logits(cond, tokens).data
            public = decoder.ar_forward(cond, tokens).data
        assert full.shape == (6, K + 1)
        # rows 1.. of the training logits are exactly the public contract rows
        assert np.array_equal(full[1:], public)

    def test_mask_layout(self):
        m = ar_attention_mask(3, 4)
        assert m[:3, :3].all()
        assert not m[:3, 3:].any()
        assert m[3:, :3].all()
        assert np.array_equal(m[3:, 3:], np.tril(np.ones((4, 4), dtype=bool)))


class TestArGenerate:
    def test_rigged_eos_model_generates_nothing(self, decoder, cond):
        saved_w = decoder.ar_head.weight.data.copy()
        saved_b = decoder.ar_head.bias.data.copy()
        try:
            decoder.ar_head.weight.data[:] = 0.0
            decoder.ar_head.bias.data[:] = 0.0
            decoder.ar_head.bias.data[K] = 100.0
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                out = decoder.ar_generate(cond, np.array([], dtype=np.int64))
            assert out.size == 0
            assert any(issubclass(w.category, EmptyGenerationWarning) for w in caught)
        finally:
            decoder.ar_head.weight.data[:] = saved_w
            decoder.ar_head.bias.data[:] = saved_b

    def test_greedy_reproducible_and_in_range(self, decoder, cond):
        prompt = np.random.default_rng(5).integers(0, K, size=4)
        a = decoder.ar_generate(cond, prompt, SamplingConfig(mode="greedy", seed=1))
        b = decoder.ar_generate(cond, prompt, SamplingConfig(mode="greedy", seed=9))
        assert np.array_equal(a, b)      # greedy ignores the seed
        if a.size:
            assert a.min() >= 0 and a.max() < K

    def test_topk_seeded_reproducible(self, decoder, cond):
        prompt = np.random.default_rng(6).integers(0, K, size=3)
        s = SamplingConfig(mode="topk", k=4, temperature=1.0, seed=77)
        a = decoder.ar_generate(cond, prompt, s)
        b = decoder.ar_generate(cond, prompt, s)
        assert np.array_equal(a, b)

    def test_output_excludes_prompt(self, decoder, cond):
        prompt = np.random.default_rng(7).integers(0, K, size=5)
        out = decoder.ar_generate(cond, prompt, SamplingConfig(mode="greedy"), max_frames=6)
        assert out.size <= 6

    def test_generation_budget_respected(self, decoder, cond):
        out = decoder.ar_generate(cond, np.array([], dtype=np.int64),
                                  SamplingConfig(mode="topk", k=3, seed=0), max_frames=9)
        assert out.size <= 9


class TestNarForward:
    def test_invariant_to_prompt_layers_above_stage(self, decoder, cond):
        rng = np.random.default_rng(8)
        prompt = rng.integers(0, K, size=(8, 6))
        for stage in (2, 4, 8):
            predicted = [rng.integers(0, K, size=9) for _ in range(stage - 1)]
            with no_grad():
                base = decoder.nar_forward(cond, prompt, predicted, stage).data
            mutated = prompt.copy()
            if stage < NUM_STAGES:
                mutated[stage:] = rng.integers(0, K, size=(8 - stage, 6))
                with no_grad():
                    pert = decoder.nar_forward(cond, mutated, predicted, stage).data
                assert np.abs(base - pert).max() <= 1e-12

    def test_sensitive_to_prompt_layers_up_to_stage(self, decoder, cond):
        rng = np.random.default_rng(9)
        prompt = rng.integers(0, K, size=(8, 6))
        predicted = [rng.integers(0, K, size=9)]
        with no_grad():
            base = decoder.nar_forward(cond, prompt, predicted, 2).data
        mutated = prompt.copy()
        mutated[1] = (mutated[1] + 3) % K
        with no_grad():
            pert = decoder.nar_forward(cond, mutated, predicted, 2).data
        assert np.abs(base - pert).max() > 0.0

    def test_zeroed_table_kills_prompt_layer_sensitivity(self, decoder, cond):
        """Stage 2 sums prompt tables 1..2 and target table 1 only."""
        rng = np.random.default_rng(10)
        prompt = rng.integers(0, K, size=(8, 5))
        predicted = [rng.integers(0, K, size=7)]
        saved = decoder.embeddings[1].table.data.copy()
        try:
            decoder.embeddings[1].table.data[:] = 0.0
            with no_grad():
                base = decoder.nar_forward(cond, prompt, predicted, 2).data
            mutated = prompt.copy()
            mutated[1] = (mutated[1] + 1) % K
            with no_grad():
                pert = decoder.nar_forward(cond, mutated, predicted, 2).data
            assert np.abs(base - pert).max() <= 1e-12
        finally:
            decoder.embeddings[1].table.data[:] = saved

    @pytest.mark.parametrize("t", [1, 17])
    def test_output_shape(self, decoder, cond, t):
        rng = np.random.default_rng(t)
        prompt = rng.integers(0, K, size=(8, 3))
        predicted = [rng.integers(0, K, size=t) for _ in range(2)]
        with no_grad():
            out = decoder.nar_forward(cond, prompt, predicted, 3)
        assert out.data.shape == (t, K)

    def test_wrong_predicted_layer_count_rejected(self, decoder, cond):
        rng = np.random.default_rng(11)
        prompt = rng.integers(0, K, size=(8, 3))
        with pytest.raises(ValueError, match="predicted layers"):
            decoder.nar_forward(cond, prompt, [rng.integers(0, K, size=4)], 3)

    def test_stage_bounds_enforced(self, decoder, cond):
        prompt = np.zeros((8, 2), dtype=np.int64)
        for bad in (1, 9, 2.5):
            with pytest.raises(ValueError):
                decoder.nar_forward(cond, prompt, [], bad)

    def test_nar_tables_have_no_eos_row(self, decoder):
        assert decoder.embeddings[0].table.data.shape[0] == K + 1
        for table in list(decoder.embeddings)[1:]:
            assert table.table.data.shape[0] == K
        for head in decoder.nar_heads:
            assert head.weight.data.shape[1] == K


class TestNarGenerate:
    def test_grid_shape_and_validity(self, decoder, cond):
        rng = np.random.default_rng(12)
        prompt = rng.integers(0, K, size=(8, 4))
        layer1 = rng.integers(0, K, size=9)
        grid = decoder.nar_generate(cond, prompt, layer1)
        assert grid.codes.shape == (8, 9)
        assert np.array_equal(grid.codes[0], layer1)
        assert grid.codes.min() >= 0 and grid.codes.max() < K

    def test_deterministic(self, decoder, cond):
        rng = np.random.default_rng(13)
        prompt = rng.integers(0, K, size=(8, 4))
        layer1 = rng.integers(0, K, size=6)
        a = decoder.nar_generate(cond, prompt, layer1)
        b = decoder.nar_generate(cond, prompt, layer1)
        assert np.array_equal(a.codes, b.codes)

    def test_stage_order_matters_on_rigged_model(self, decoder, cond):
        """Later stages condition on earlier predictions, so order changes output."""

        class Rigged(AcousticDecoder):
            def nar_forward(self, cond, prompt_codes, predicted, stage):
                import mstts.nncore as nc
                t = predicted[0].size
                logits = np.zeros((t, K))
                winner = (sum(int(p[0]) for p in predicted) + stage) % K
                logits[:, winner] = 1.0
                return nc.Tensor(logits)

        rig = Rigged.__new__(Rigged)
        rig.cfg = decoder.cfg
        prompt = np.zeros((8, 2), dtype=np.int64)
        layer1 = np.array([3, 3], dtype=np.int64)
        rig.eos_id = K
        ordered = AcousticDecoder.nar_generate(rig, cond, prompt, layer1)
        shuffled = AcousticDecoder.nar_generate(
            rig, cond, prompt, layer1, stage_order=(8, 7, 6, 5, 4, 3, 2)
        )
        assert not np.array_equal(ordered.codes, shuffled.codes)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = ModelConfig(dim=16, heads=2, phoneme_blocks=1, ar_blocks=1,
                          nar_blocks=1, ffn_dim=32, latent_dim=8,
                          codebook_size=K, max_generation_frames=8, init_seed=3)
        model = build_model(cfg)
        path = tmp_path / "model.msve"
        save_model(path, model, meta={"note": "test"},
                   extra_arrays={"adam.m/x": np.arange(3.0)})
        with open(path, "rb") as f:
            assert f.read(5) == b"MSVE1"
        loaded, extra, meta = load_model(path)
        assert meta["note"] == "test"
        assert np.array_equal(extra["adam.m/x"], np.arange(3.0))
        for (na, pa), (nb, pb) in zip(model.named_parameters(), loaded.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_config_restored(self, tmp_path):
        cfg = ModelConfig(dim=16, heads=2, phoneme_blocks=1, ar_blocks=1,
                          nar_blocks=1, ffn_dim=32, latent_dim=8,
                          codebook_size=K, init_seed=9)
        save_model(tmp_path / "m.msve", build_model(cfg))
        restored, _, _ = load_checkpoint(tmp_path / "m.msve")
        assert restored == cfg

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.msve"
        p.write_bytes(b"NOPE!" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)
