"""Corpus generation, prompt samplers, the joint train step, and the
training loop with checkpoint resume."""

import math

import numpy as np
import pytest
from scipy import stats

from mstts import pipeline, textfront, trainer
from mstts.codec import Codec, train_codebooks
from mstts.config import desk_config
from mstts.nncore import AdamState
from mstts.trainer import (
    LossWeights,
    SynthSpeaker,
    TrainingError,
    draw_style_indices,
    render_utterance,
    sample_nar_stage,
    sample_style_prompt,
    synth_corpus,
    train_step,
)


class TestSynthCorpus:
    def test_same_seed_byte_identical(self):
        a = synth_corpus(2, 3, seed=42)
        b = synth_corpus(2, 3, seed=42)
        for sa, sb in zip(a.samples, b.samples):
            assert sa.transcript == sb.transcript
            assert np.array_equal(sa.waveform.samples, sb.waveform.samples)

    def test_different_seed_differs(self):
        a = synth_corpus(2, 2, seed=1)
        b = synth_corpus(2, 2, seed=2)
        assert any(
            not np.array_equal(x.waveform.samples, y.waveform.samples)
            for x, y in zip(a.samples, b.samples)
        )

    def test_speaker_params_deterministic_and_in_range(self):
        s = SynthSpeaker.from_seed(7, 3)
        assert s == SynthSpeaker.from_seed(7, 3)
        assert 95.0 <= s.f0_base <= 290.0
        assert 0.35 <= s.spectral_tilt <= 1.7
        assert all(0.8 <= b <= 1.25 for b in s.duration_bias)

    def test_duration_scales_inversely_with_rate(self):
        base = SynthSpeaker.from_seed(0, 1)
        durs = []
        for rate in (0.8, 1.0, 1.3):
            spk = SynthSpeaker(**{**base.__dict__, "rate": rate})
            w = render_utterance(spk, "dana bopi", np.random.default_rng(0))
            durs.append(w.duration)
        assert durs[0] > durs[1] > durs[2]

    def test_speaker_embeddings_separate_speakers(self, tiny_corpus):
        """Cross-speaker similarity below within-speaker on >= 90% of pair draws."""
        rng = np.random.default_rng(0)
        embeds = {}
        for spk in (0, 1, 2, 3):
            embeds[spk] = [pipeline.speaker_embed(s.waveform) for s in tiny_corpus.by_speaker(spk)]
        wins = 0
        trials = 200
        for _ in range(trials):
            spk_a, spk_b = rng.choice(4, size=2, replace=False)
            i, j = rng.choice(len(embeds[spk_a]), size=2, replace=False)
            k = rng.integers(len(embeds[spk_b]))
            within = float(np.dot(embeds[spk_a][i], embeds[spk_a][j]))
            cross = float(np.dot(embeds[spk_a][i], embeds[spk_b][k]))
            wins += cross < within
        assert wins / trials >= 0.9

    def test_needs_two_speakers(self):
        with pytest.raises(ValueError):
            synth_corpus(1, 4, seed=0)

    def test_waveforms_block_aligned(self, tiny_corpus):
        assert all(s.waveform.samples.size % 256 == 0 for s in tiny_corpus.samples)


class TestStylePromptSampling:
    def test_counts_cover_five_to_ten_uniformly(self):
        rng = np.random.default_rng(123)
        counts = [len(draw_style_indices(40, 0, rng)) for _ in range(10_000)]
        observed = np.bincount(counts, minlength=11)[5:11]
        assert observed.sum() == 10_000
        assert (observed > 0).all()
        _, p = stats.chisquare(observed)
        assert p > 0.01

    def test_target_never_drawn_when_exclusion_possible(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            idx = draw_style_indices(20, 7, rng)
            assert 7 not in idx
            assert len(set(idx.tolist())) == len(idx)

    def test_replacement_fallback_logged(self, caplog):
        rng = np.random.default_rng(6)
        with caplog.at_level("WARNING"):
            idx = draw_style_indices(4, 1, rng)
        assert len(idx) >= 5
        assert any("replacement" in r.message for r in caplog.records)

    def test_total_frames_is_sum_of_constituents(self, prepared_corpus):
        group = prepared_corpus.by_speaker(0)
        rng = np.random.default_rng(7)
        rng_copy = np.random.default_rng(7)
        idx = draw_style_indices(len(group), 0, rng_copy)
        prompt = sample_style_prompt(group, 0, rng)
        assert len(prompt) == sum(group[i].latents.shape[0] for i in idx)

    def test_composition_changes_across_epochs(self, prepared_corpus):
        group = prepared_corpus.by_speaker(1)
        rng = np.random.default_rng(8)
        epochs = [tuple(draw_style_indices(len(group), 2, rng)) for _ in range(3)]
        assert len(set(epochs)) > 1


class TestNarStageSampling:
    def test_bounds_and_coverage(self):
        rng = np.random.default_rng(9)
        stages = set()
        for _ in range(10_000):
            stage, prefix = sample_nar_stage(rng, target_len=20)
            assert 2 <= stage <= 8
            assert 1 <= prefix <= 10
            stages.add(stage)
        assert stages == set(range(2, 9))

    def test_short_target_rejected(self):
        with pytest.raises(ValueError):
            sample_nar_stage(np.random.default_rng(0), target_len=3)

    def test_prefix_excluded_from_loss_region(self, prepared_corpus, trained_small):
        """The NAR loss covers exactly the frames after the sampled prefix."""
        model = trained_small.model
        sample = prepared_corpus.by_speaker(0)[0]
        t = sample.grid.shape[1]
        prefix = t // 2
        from mstts.nncore import no_grad
        with no_grad():
            cond = model.encoder(
                textfront.PhonemeSequence(sample.phoneme_ids), sample.latents
            )
            logits = model.decoder.nar_forward(
                cond, sample.grid[:, :prefix], [sample.grid[0, prefix:]], 2
            )
        assert logits.data.shape[0] == t - prefix


class TestLossWeights:
    def test_validation(self):
        with pytest.raises(ValueError):
            LossWeights(0.0, 0.0)
        with pytest.raises(ValueError):
            LossWeights(-1.0, 1.0)
        assert LossWeights().w_ar == 1.0


@pytest.fixture(scope="module")
def small_model_setup(prepared_corpus, small_run_config):
    from mstts.model import build_model

    model = build_model(small_run_config.model)
    group = prepared_corpus.by_speaker(0)
    batch = [(group[0], group[1].latents), (group[2], group[3].latents)]
    return model, batch


class TestTrainStep:
    def test_initial_ar_loss_near_uniform(self, small_model_setup):
        model, batch = small_model_setup
        metrics = train_step(
            model, batch, LossWeights(), AdamState(), lr=1e-9, rng=np.random.default_rng(0)
        )
        expected = math.log(model.cfg.codebook_size + 1)
        assert abs(metrics["loss_ar"] - expected) <= 0.1 * expected

    def test_zero_nar_weight_freezes_nar_parameters(self, prepared_corpus, small_run_config):
        from mstts.model import build_model

        model = build_model(small_run_config.model)
        group = prepared_corpus.by_speaker(1)
        batch = [(group[0], group[1].latents)]
        nar_only = {
            name: p.data.copy()
            for name, p in model.named_parameters()
            if name.startswith("decoder.nar_") or name.startswith("decoder.stage_embedding")
        }
        train_step(model, batch, LossWeights(1.0, 0.0), AdamState(), 1e-2,
                   np.random.default_rng(1))
        for name, p in model.named_parameters():
            if name in nar_only:
                assert np.array_equal(p.data, nar_only[name]), name

    def test_loss_is_linear_combination(self, small_model_setup, prepared_corpus):
        model, batch = small_model_setup
        rng_state = np.random.default_rng(3).bit_generator.state

        def run(w_ar):
            rng = np.random.default_rng(0)
            rng.bit_generator.state = rng_state
            return train_step(model, batch, LossWeights(w_ar, 1.0), AdamState(),
                              lr=1e-12, rng=rng)

        m1 = run(1.0)
        m2 = run(2.0)
        contrib1 = m1["loss_total"] - m1["loss_nar"]
        contrib2 = m2["loss_total"] - m2["loss_nar"]
        assert contrib2 == pytest.approx(2.0 * contrib1, rel=1e-6)

    def test_joint_gradients_reach_all_components(self, prepared_corpus, small_run_config):
        from mstts.model import build_model
        from mstts.nncore import cross_entropy
        from mstts.trainer import sample_nar_stage

        model = build_model(small_run_config.model)
        group = prepared_corpus.by_speaker(2)
        sample, style = group[0], group[1].latents
        model.zero_grad()
        phonemes = textfront.PhonemeSequence(sample.phoneme_ids)
        cond = model.encoder(phonemes, style)
        tokens = sample.grid[0]
        ar_logits = model.decoder.ar_training_logits(cond, tokens)
        loss_ar = cross_entropy(ar_logits, np.concatenate([tokens, [model.cfg.codebook_size]]))
        stage, prefix = sample_nar_stage(np.random.default_rng(5), tokens.size)
        nar_logits = model.decoder.nar_forward(
            cond, sample.grid[:, :prefix],
            [sample.grid[l, prefix:] for l in range(stage - 1)], stage
        )
        loss = loss_ar + cross_entropy(nar_logits, sample.grid[stage - 1, prefix:])
        loss.backward()
        groups = {"encoder.": 0.0, "decoder.ar_": 0.0, "decoder.nar_": 0.0}
        for name, p in model.named_parameters():
            for g in groups:
                if name.startswith(g):
                    groups[g] = max(groups[g], float(np.abs(p.grad).max()))
        assert all(v > 0.0 for v in groups.values()), groups

    def test_non_finite_loss_aborts_with_batch_ids(self, small_model_setup):
        model, batch = small_model_setup
        saved = model.decoder.ar_head.weight.data.copy()
        try:
            model.decoder.ar_head.weight.data[:] = np.inf
            with pytest.raises(TrainingError, match=batch[0][0].key):
                train_step(model, batch, LossWeights(), AdamState(), 1e-3,
                           np.random.default_rng(0))
        finally:
            model.decoder.ar_head.weight.data[:] = saved


class TestTrainLoop:
    def test_metrics_rows_and_trend(self, trained_small):
        metrics = trained_small.metrics
        assert all({"step", "loss_ar", "loss_nar", "lr"} <= set(m) for m in metrics)
        assert [m["step"] for m in metrics] == list(range(1, len(metrics) + 1))
        totals = [m["loss_total"] for m in metrics]
        assert np.isfinite(totals).all()
        q = len(totals) // 4
        assert np.mean(totals[-q:]) < np.mean(totals[:q])

    def test_metrics_csv_written(self, prepared_corpus, tiny_codec, tiny_codebooks,
                                 small_run_config, tmp_path):
        import copy

        cfg = copy.deepcopy(small_run_config)
        cfg.train.epochs = 1
        result = trainer.train(prepared_corpus, tiny_codec, tiny_codebooks, cfg,
                               out_dir=tmp_path / "run")
        lines = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "step,loss_ar,loss_nar,lr"
        assert len(lines) == 1 + len(result.metrics)

    def test_checkpoint_write_failure_aborts_resumably(self, prepared_corpus, tiny_codec,
                                                       tiny_codebooks, small_run_config,
                                                       tmp_path):
        import copy

        cfg = copy.deepcopy(small_run_config)
        cfg.train.epochs = 1
        cfg.train.checkpoint_every = 1
        out = tmp_path / "blocked"
        out.mkdir()
        # a directory where the checkpoint file should go forces the atomic
        # rename to fail after training ran
        (out / "checkpoint.msve").mkdir()
        with pytest.raises(TrainingError, match="checkpoint write failed"):
            trainer.train(prepared_corpus, tiny_codec, tiny_codebooks, cfg, out_dir=out)

    def test_holdout_speakers_excluded_from_training(self, prepared_corpus, tiny_codec,
                                                     tiny_codebooks, small_run_config,
                                                     monkeypatch):
        import copy

        cfg = copy.deepcopy(small_run_config)
        cfg.train.epochs = 1
        seen = set()
        real_step = trainer.train_step

        def spy(model, batch, weights, state, lr, rng):
            seen.update(s.speaker_id for s, _ in batch)
            return real_step(model, batch, weights, state, lr, rng)

        monkeypatch.setattr(trainer, "train_step", spy)
        trainer.train(prepared_corpus, tiny_codec, tiny_codebooks, cfg)
        assert 3 not in seen
        assert seen == {0, 1, 2}

    def test_resume_is_step_exact(self, prepared_corpus, tiny_codec, tiny_codebooks,
                                  small_run_config, tmp_path):
        import copy

        cfg = copy.deepcopy(small_run_config)
        cfg.train.epochs = 4
        cfg.train.checkpoint_every = 2
        full = trainer.train(prepared_corpus, tiny_codec, tiny_codebooks, cfg,
                             out_dir=tmp_path / "full")

        cfg2 = copy.deepcopy(cfg)
        cfg2.train.epochs = 2
        trainer.train(prepared_corpus, tiny_codec, tiny_codebooks, cfg2,
                      out_dir=tmp_path / "half")
        cfg3 = copy.deepcopy(cfg)
        resumed = trainer.train(
            prepared_corpus, tiny_codec, tiny_codebooks, cfg3,
            out_dir=tmp_path / "resumed",
            resume_from=tmp_path / "half" / "checkpoint.msve",
        )
        n_half = len(full.metrics) // 2
        assert resumed.metrics[0]["loss_total"] == full.metrics[n_half]["loss_total"]
        assert resumed.metrics[-1]["loss_total"] == full.metrics[-1]["loss_total"]
        for (na, pa), (nb, pb) in zip(
            full.model.named_parameters(), resumed.model.named_parameters()
        ):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)
