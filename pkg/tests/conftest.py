"""Shared fixtures: a tiny deterministic corpus, a fitted codec, and a
briefly trained model for probe tests that need non-degenerate weights."""

import numpy as np
import pytest

from mstts import trainer
from mstts.codec import Codec, train_codebooks
from mstts.config import desk_config


@pytest.fixture(scope="session")
def tiny_corpus():
    return trainer.synth_corpus(n_speakers=4, utterances_per_speaker=8, seed=777)


@pytest.fixture(scope="session")
def tiny_codec():
    return Codec(sample_rate=8000, frame_hop=64, latent_dim=64)


@pytest.fixture(scope="session")
def tiny_codebooks(tiny_corpus, tiny_codec):
    latents = [tiny_codec.analyze(s.waveform) for s in tiny_corpus.samples]
    return train_codebooks(latents, k=32, seed=3, iters=12)


@pytest.fixture(scope="session")
def prepared_corpus(tiny_corpus, tiny_codec, tiny_codebooks):
    return trainer.prepare_corpus(tiny_corpus, tiny_codec, tiny_codebooks)


@pytest.fixture(scope="session")
def small_run_config():
    cfg = desk_config()
    cfg.model.codebook_size = 32
    cfg.model.max_generation_frames = 48
    cfg.train.epochs = 20
    cfg.train.batch_size = 4
    cfg.train.holdout_speakers = (3,)
    cfg.train.warmup_steps = 20
    return cfg


@pytest.fixture(scope="session")
def trained_small(prepared_corpus, tiny_codec, tiny_codebooks, small_run_config):
    """A briefly trained model: enough steps for probe tests, not quality."""
    result = trainer.train(prepared_corpus, tiny_codec, tiny_codebooks, small_run_config)
    return result
