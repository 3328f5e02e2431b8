"""Joint end-to-end training on a synthetic desk-scale corpus.

The corpus generator renders harmonic-source utterances whose spectra follow
per-speaker timbre parameters (pitch base, spectral tilt, two resonances) and
whose timing follows per-speaker style parameters (speaking rate, pitch
contour slope, per-phoneme-class duration bias). Everything is a pure
function of (seed, speaker id, utterance id), so corpora are byte-identical
across runs.

Each training step teacher-forces the full first codebook layer through the
AR decoder (no explicit timbre prompt), samples one NAR stage and one target
prefix as the timbre prompt for the NAR decoder, and takes a single Adam
step on the weighted sum of the two cross-entropy losses.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import textfront
from .codec import Codebooks, Codec, LatentFrames, Waveform, rvq_encode
from .config import ModelConfig, RunConfig
from .model import TTSModel, build_model, load_model, save_model
from .nncore import AdamState, adam_step, cross_entropy, warmup_inverse_sqrt_lr

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# -- synthetic speakers and corpus ---------------------------------------------

VOWELS = set("aeiou")
SONORANTS = set("lmnrwy")

CLASS_VOWEL, CLASS_SONORANT, CLASS_OBSTRUENT, CLASS_DIGIT = range(4)

_BASE_PHONEME_SECONDS = 0.085
_BOUNDARY_SECONDS = 0.05
_PAD_MULTIPLE = 256     # keeps waveform lengths compatible with block featurizers
_MIN_UTT_SAMPLES = 2048  # 0.256 s at 8 kHz, above the embedder's minimum


def phoneme_class(pid: int) -> int:
    for ch, mapped in textfront.RULE_TABLE.items():
        if mapped == pid:
            if ch.isdigit():
                return CLASS_DIGIT
            if ch in VOWELS:
                return CLASS_VOWEL
            if ch in SONORANTS:
                return CLASS_SONORANT
            return CLASS_OBSTRUENT
    return CLASS_OBSTRUENT


@dataclass
class SynthSpeaker:
    """Procedural speaker: timbre shapes the spectrum, style shapes the timing."""

    speaker_id: int
    f0_base: float            # Hz; strata keep speakers separated
    spectral_tilt: float      # harmonic k decays as k**-tilt
    formant1: float           # Hz
    formant2: float           # Hz
    rate: float               # >1 speaks faster (shorter utterances)
    pitch_slope: float        # fractional f0 drift across an utterance
    duration_bias: Tuple[float, float, float, float]  # per phoneme class

    @classmethod
    def from_seed(cls, corpus_seed: int, speaker_id: int) -> "SynthSpeaker":
        rng = np.random.default_rng([corpus_seed, speaker_id, 0xA5])
        band = speaker_id % 8
        ratio = (285.0 / 95.0) ** (1.0 / 8.0)
        lo = 95.0 * ratio ** band
        f0 = lo * ratio ** rng.uniform(0.2, 0.8)
        return cls(
            speaker_id=speaker_id,
            f0_base=float(f0),
            spectral_tilt=float(rng.uniform(0.35, 1.7)),
            formant1=float(rng.uniform(330.0, 850.0)),
            formant2=float(rng.uniform(950.0, 1800.0)),
            rate=float(rng.uniform(0.85, 1.25)),
            pitch_slope=float(rng.uniform(-0.15, 0.15)),
            duration_bias=tuple(rng.uniform(0.8, 1.25, size=4)),
        )


@dataclass
class TrainSample:
    speaker_id: int
    utterance_id: int
    transcript: str
    waveform: Waveform
    phoneme_ids: np.ndarray
    latents: Optional[np.ndarray] = None   # cached [T, D_c]
    grid: Optional[np.ndarray] = None      # cached [8, T]

    @property
    def key(self) -> str:
        return f"s{self.speaker_id:02d}_u{self.utterance_id:03d}"


@dataclass
class Corpus:
    seed: int
    sample_rate: int
    speakers: List[SynthSpeaker]
    samples: List[TrainSample]
    lexicon: List[str]
    codec_fingerprint: str = ""

    def by_speaker(self, speaker_id: int) -> List[TrainSample]:
        return [s for s in self.samples if s.speaker_id == speaker_id]


@dataclass
class LossWeights:
    w_ar: float = 1.0
    w_nar: float = 1.0

    def __post_init__(self):
        if self.w_ar < 0 or self.w_nar < 0 or (self.w_ar == 0 and self.w_nar == 0):
            raise ValueError("loss weights must be nonnegative and not both zero")


def _make_lexicon(rng: np.random.Generator, size: int = 24) -> List[str]:
    consonants = "bdfgkmnprstvz"
    vowels = "aeiou"
    words = set()
    while len(words) < size:
        length = int(rng.integers(2, 5))
        chars = []
        for i in range(length):
            pool = consonants if i % 2 == 0 else vowels
            chars.append(pool[int(rng.integers(len(pool)))])
        words.add("".join(chars))
    return sorted(words)


def make_transcript(rng: np.random.Generator, lexicon: Sequence[str]) -> str:
    # wide length spread (1..5 words) so utterance duration is text-driven
    n_words = int(rng.integers(1, 6))
    return " ".join(lexicon[int(rng.integers(len(lexicon)))] for _ in range(n_words))


def _letter_color(pid: int) -> Tuple[float, float]:
    # deterministic per-phoneme formant offsets so text is audible in the spectrum
    return (
        ((pid * 37) % 26 / 25.0 - 0.5) * 180.0,
        ((pid * 53) % 26 / 25.0 - 0.5) * 260.0,
    )


_CLASS_GAIN = {CLASS_VOWEL: 1.0, CLASS_SONORANT: 0.75, CLASS_OBSTRUENT: 0.5, CLASS_DIGIT: 0.6}
_CLASS_NOISE = {CLASS_VOWEL: 0.0, CLASS_SONORANT: 0.005, CLASS_OBSTRUENT: 0.02, CLASS_DIGIT: 0.015}


def render_utterance(
    speaker: SynthSpeaker,
    transcript: str,
    rng: np.random.Generator,
    sample_rate: int = 8000,
) -> Waveform:
    """Harmonic-source rendering of a transcript in a speaker's voice."""
    ids = textfront.g2p(transcript).ids
    sr = sample_rate
    seg_lens: List[int] = []
    seg_meta: List[Tuple[int, int]] = []   # (phoneme id, class)
    for pid in ids:
        if pid == textfront.WORD_BOUNDARY_ID:
            dur = _BOUNDARY_SECONDS / speaker.rate
            cls = -1
        else:
            cls = phoneme_class(int(pid))
            dur = (
                _BASE_PHONEME_SECONDS
                * speaker.duration_bias[cls]
                * float(np.exp(rng.normal(0.0, 0.06)))
                / speaker.rate
            )
        seg_lens.append(max(8, int(round(dur * sr))))
        seg_meta.append((int(pid), cls))

    n = sum(seg_lens)
    tau = np.arange(n) / max(n - 1, 1)
    f0 = speaker.f0_base * (1.0 + speaker.pitch_slope * (tau - 0.5))

    gain = np.zeros(n)
    noise_gain = np.zeros(n)
    d1 = np.zeros(n)
    d2 = np.zeros(n)
    pos = 0
    for (pid, cls), seg in zip(seg_meta, seg_lens):
        sl = slice(pos, pos + seg)
        if cls < 0:
            gain[sl] = 0.02
        else:
            edge = min(max(int(0.008 * sr), 1), seg // 2)
            env = np.ones(seg)
            ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(edge) / edge))
            env[:edge] = ramp
            env[seg - edge:] = ramp[::-1]
            gain[sl] = _CLASS_GAIN[cls] * env
            noise_gain[sl] = _CLASS_NOISE[cls] * env
            off1, off2 = _letter_color(pid)
            d1[sl] = off1
            d2[sl] = off2
        pos += seg

    phase1 = 2.0 * np.pi * np.cumsum(f0) / sr
    f1 = speaker.formant1 + d1
    f2 = speaker.formant2 + d2
    out = np.zeros(n)
    k_max = max(2, int(1900.0 / f0.max()))
    for k in range(1, k_max + 1):
        fk = k * f0
        res = (
            1.0
            + 3.0 * np.exp(-(((fk - f1) / 110.0) ** 2))
            + 2.4 * np.exp(-(((fk - f2) / 150.0) ** 2))
        )
        out += (k ** -speaker.spectral_tilt) * res * np.sin(k * phase1)
    out *= gain
    out += noise_gain * rng.normal(0.0, 1.0, size=n)

    peak = np.abs(out).max()
    if peak > 0:
        out *= 0.45 / peak
    target_len = max(n, _MIN_UTT_SAMPLES)
    target_len += (-target_len) % _PAD_MULTIPLE
    if target_len > n:
        out = np.concatenate([out, np.zeros(target_len - n)])
    return Waveform(out, sr)


def synth_corpus(
    n_speakers: int,
    utterances_per_speaker: int,
    seed: int,
    sample_rate: int = 8000,
) -> Corpus:
    """Fully deterministic synthetic corpus; same seed means identical bytes."""
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    lexicon = _make_lexicon(np.random.default_rng([seed, 0xBEEF]))
    speakers = [SynthSpeaker.from_seed(seed, i) for i in range(n_speakers)]
    samples: List[TrainSample] = []
    for spk in speakers:
        for j in range(utterances_per_speaker):
            rng = np.random.default_rng([seed, spk.speaker_id, j, 0x17])
            transcript = make_transcript(rng, lexicon)
            wave = render_utterance(spk, transcript, rng, sample_rate)
            samples.append(
                TrainSample(
                    speaker_id=spk.speaker_id,
                    utterance_id=j,
                    transcript=transcript,
                    waveform=wave,
                    phoneme_ids=textfront.g2p(transcript).ids,
                )
            )
    return Corpus(seed, sample_rate, speakers, samples, lexicon)


def prepare_corpus(corpus: Corpus, codec: Codec, codebooks: Codebooks) -> Corpus:
    """Cache codec latents and token grids on every sample.

    Recomputes whenever the codec/codebook fingerprint differs from the one
    the cache was built with.
    """
    fingerprint = codec.fingerprint() + ":" + codebooks.fingerprint()
    if corpus.codec_fingerprint == fingerprint:
        return corpus
    for s in corpus.samples:
        latents = codec.analyze(s.waveform)
        s.latents = latents.frames
        s.grid = rvq_encode(latents, codebooks).codes
    corpus.codec_fingerprint = fingerprint
    return corpus


# -- prompt sampling -----------------------------------------------------------


def draw_style_indices(n_utterances: int, exclude: Optional[int], rng: np.random.Generator) -> np.ndarray:
    """Pick 5..10 distinct utterance indices, excluding the target sample.

    Falls back to sampling with replacement (logged) when the speaker has too
    few utterances to honour distinctness.
    """
    count = int(rng.integers(5, 11))
    pool = np.array([i for i in range(n_utterances) if i != exclude], dtype=np.int64)
    if pool.size == 0:
        raise ValueError("no utterances available for the style prompt")
    if pool.size >= count:
        return rng.choice(pool, size=count, replace=False)
    log.warning(
        "speaker has %d usable utterances for a %d-utterance style prompt; sampling with replacement",
        pool.size, count,
    )
    return rng.choice(pool, size=count, replace=True)


def sample_style_prompt(
    speaker_samples: Sequence[TrainSample],
    exclude_index: Optional[int],
    rng: np.random.Generator,
    frame_hop: int = 64,
) -> LatentFrames:
    """Concatenate the latents of freshly drawn style utterances, in drawn order."""
    idx = draw_style_indices(len(speaker_samples), exclude_index, rng)
    frames = [speaker_samples[i].latents for i in idx]
    if any(f is None for f in frames):
        raise ValueError("corpus not prepared: latents missing (run prepare_corpus)")
    return LatentFrames(np.concatenate(frames, axis=0), frame_hop)


def sample_nar_stage(rng: np.random.Generator, target_len: int) -> Tuple[int, int]:
    """Uniform stage in [2, 8] and a prefix length in [1, floor(T/2)]."""
    if target_len < 4:
        raise ValueError(f"target too short for NAR sampling: {target_len} frames")
    stage = int(rng.integers(2, 9))
    prefix_len = int(rng.integers(1, target_len // 2 + 1))
    return stage, prefix_len


# -- training ---------------------------------------------------------------------


def train_step(
    model: TTSModel,
    batch: Sequence[Tuple[TrainSample, np.ndarray]],
    weights: LossWeights,
    state: AdamState,
    lr: float,
    rng: np.random.Generator,
) -> Dict[str, float]:
    """One joint AR+NAR update over a batch of (sample, style latents)."""
    model.zero_grad()
    k = model.cfg.codebook_size
    loss_ar_sum = None
    loss_nar_sum = None
    for sample, style_latents in batch:
        if sample.grid is None:
            raise ValueError("corpus not prepared: token grid missing")
        phonemes = textfront.PhonemeSequence(sample.phoneme_ids)
        cond = model.encoder(phonemes, style_latents)
        tokens = sample.grid[0]
        t = tokens.size

        ar_logits = model.decoder.ar_training_logits(cond, tokens)
        ar_targets = np.concatenate([tokens, [k]])       # EOS closes the sequence
        loss_ar_i = cross_entropy(ar_logits, ar_targets)

        stage, prefix_len = sample_nar_stage(rng, t)
        prompt_codes = sample.grid[:, :prefix_len]
        predicted = [sample.grid[layer, prefix_len:] for layer in range(stage - 1)]
        nar_logits = model.decoder.nar_forward(cond, prompt_codes, predicted, stage)
        loss_nar_i = cross_entropy(nar_logits, sample.grid[stage - 1, prefix_len:])

        loss_ar_sum = loss_ar_i if loss_ar_sum is None else loss_ar_sum + loss_ar_i
        loss_nar_sum = loss_nar_i if loss_nar_sum is None else loss_nar_sum + loss_nar_i

    n = len(batch)
    loss_ar = loss_ar_sum * (1.0 / n)
    loss_nar = loss_nar_sum * (1.0 / n)
    total = loss_ar * weights.w_ar + loss_nar * weights.w_nar
    if not np.isfinite(total.data):
        raise TrainingError(
            "non-finite loss; batch: " + ", ".join(s.key for s, _ in batch)
        )
    total.backward()
    adam_step(model.parameters(), state, lr)
    return {
        "loss_ar": float(loss_ar.data),
        "loss_nar": float(loss_nar.data),
        "loss_total": float(total.data),
    }


@dataclass
class TrainResult:
    checkpoint_path: Optional[Path]
    metrics: List[Dict[str, float]]
    model: TTSModel
    state: AdamState
    global_step: int


def _rng_state_meta(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _save_training_checkpoint(path: Path, model: TTSModel, state: AdamState,
                              rng: np.random.Generator, epoch: int, global_step: int) -> None:
    extra = {}
    for name in state.m:
        extra["adam.m/" + name] = state.m[name]
        extra["adam.v/" + name] = state.v[name]
    meta = {
        "epoch": epoch,
        "global_step": global_step,
        "adam_step_count": state.step_count,
        "adam_beta1": state.beta1,
        "adam_beta2": state.beta2,
        "adam_epsilon": state.epsilon,
        "rng_state": _rng_state_meta(rng),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        save_model(tmp, model, meta=meta, extra_arrays=extra)
        os.replace(tmp, path)
    except OSError as exc:
        raise TrainingError(f"checkpoint write failed: {exc}; last good checkpoint kept") from exc


def load_training_checkpoint(path) -> Tuple[TTSModel, AdamState, np.random.Generator, int, int]:
    model, extra, meta = load_model(path)
    state = AdamState(
        beta1=meta.get("adam_beta1", 0.9),
        beta2=meta.get("adam_beta2", 0.98),
        epsilon=meta.get("adam_epsilon", 1e-9),
        step_count=meta.get("adam_step_count", 0),
    )
    for key, arr in extra.items():
        if key.startswith("adam.m/"):
            state.m[key[len("adam.m/"):]] = arr.copy()
        elif key.startswith("adam.v/"):
            state.v[key[len("adam.v/"):]] = arr.copy()
    rng = _restore_rng(meta["rng_state"])
    return model, state, rng, int(meta["epoch"]), int(meta["global_step"])


def train(
    corpus: Corpus,
    codec: Codec,
    codebooks: Codebooks,
    cfg: RunConfig,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    """Epoch loop with per-epoch style-prompt resampling and periodic checkpoints."""
    prepare_corpus(corpus, codec, codebooks)
    tcfg = cfg.train
    holdout = set(tcfg.holdout_speakers)
    train_samples = [s for s in corpus.samples if s.speaker_id not in holdout]
    if not train_samples:
        raise TrainingError("holdout leaves no training samples")
    speaker_groups: Dict[int, List[TrainSample]] = {}
    for s in train_samples:
        speaker_groups.setdefault(s.speaker_id, []).append(s)

    if resume_from is not None:
        model, state, rng, start_epoch, global_step = load_training_checkpoint(resume_from)
    else:
        model = build_model(cfg.model)
        state = AdamState()
        rng = np.random.default_rng(tcfg.seed)
        start_epoch, global_step = 0, 0

    weights = LossWeights(tcfg.w_ar, tcfg.w_nar)
    out_path = Path(out_dir) if out_dir is not None else None
    ckpt_path = None
    metrics_file = None
    writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_path / "checkpoint.msve"
        metrics_path = out_path / "metrics.csv"
        new_file = resume_from is None or not metrics_path.exists()
        metrics_file = open(metrics_path, "a" if not new_file else "w", newline="")
        writer = csv.writer(metrics_file)
        if new_file:
            writer.writerow(["step", "loss_ar", "loss_nar", "lr"])

    metrics: List[Dict[str, float]] = []
    try:
        for epoch in range(start_epoch, tcfg.epochs):
            # fresh style prompts for every sample, every epoch
            prompts = []
            for s in train_samples:
                group = speaker_groups[s.speaker_id]
                exclude = next(i for i, g in enumerate(group) if g is s)
                idx = draw_style_indices(len(group), exclude, rng)
                prompts.append(np.concatenate([group[i].latents for i in idx], axis=0))

            order = rng.permutation(len(train_samples))
            for lo in range(0, len(order), tcfg.batch_size):
                chunk = order[lo : lo + tcfg.batch_size]
                batch = [(train_samples[i], prompts[i]) for i in chunk]
                lr = warmup_inverse_sqrt_lr(global_step + 1, tcfg.peak_lr, tcfg.warmup_steps)
                step_metrics = train_step(model, batch, weights, state, lr, rng)
                global_step += 1
                step_metrics["step"] = global_step
                step_metrics["lr"] = lr
                metrics.append(step_metrics)
                if writer is not None:
                    writer.writerow(
                        [global_step, step_metrics["loss_ar"], step_metrics["loss_nar"], lr]
                    )
            if writer is not None:
                metrics_file.flush()
            log.info(
                "epoch %d/%d step %d loss_ar %.4f loss_nar %.4f",
                epoch + 1, tcfg.epochs, global_step,
                metrics[-1]["loss_ar"], metrics[-1]["loss_nar"],
            )
            if ckpt_path is not None and (
                (epoch + 1) % tcfg.checkpoint_every == 0 or epoch + 1 == tcfg.epochs
            ):
                _save_training_checkpoint(ckpt_path, model, state, rng, epoch + 1, global_step)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return TrainResult(ckpt_path, metrics, model, state, global_step)
