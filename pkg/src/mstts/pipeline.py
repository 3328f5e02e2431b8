"""Zero-shot inference orchestration and objective evaluation.

Synthesis: build the text prompt (timbre transcript prepended to the target
text), concatenate the style utterances' codec latents, run the speaker-aware
encoder, continue layer 1 behind the timbre-prompt prefix with the AR
decoder, fill layers 2..8 with the NAR decoder conditioned on the full timbre
grid, decode through the RVQ and resynthesize. The returned audio covers only
the target text because generation starts after the prompt prefix.

Evaluation: a deterministic spectral-statistics speaker embedding (cosine
similarity in [0, 1] by construction), and mel-cepstral distortion under DTW
alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.fft import dct

from . import textfront
from .codec import CodeGrid, Codebooks, Codec, LatentFrames, Waveform, rvq_decode, rvq_encode
from .decoder import SamplingConfig
from .model import TTSModel
from .trainer import Corpus, TrainSample

MCD_CONSTANT = 10.0 * math.sqrt(2.0) / math.log(10.0)
EMBED_BANDS = 20
EMBED_BLOCK = 256
MIN_EMBED_SECONDS = 0.2
# desk equivalent of a ~3 s timbre prompt: short relative to training
# utterances, so generation starts at positions the AR decoder has seen
TIMBRE_PROMPT_MAX_FRAMES = 64


class SynthesisError(RuntimeError):
    """Zero-shot synthesis failed; carries diagnostics."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class ZeroShotRequest:
    """Everything one zero-shot synthesis needs.

    The style list must be non-empty; passing the timbre utterance as the
    only style utterance is the 3-second-prompt configuration.
    """

    target_text: Union[str, textfront.Transcript]
    style_utterances: List[Waveform]
    timbre_utterance: Waveform
    timbre_transcript: Union[str, textfront.Transcript]
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    no_style: bool = False
    no_timbre_prefix: bool = False
    style_equals_timbre: bool = False
    timbre_prompt_max_frames: int = TIMBRE_PROMPT_MAX_FRAMES

    def __post_init__(self):
        if not self.no_style:
            style = [self.timbre_utterance] if self.style_equals_timbre else self.style_utterances
            if not style:
                raise ValueError("style prompt list is empty")
        if self.timbre_utterance.samples.size == 0:
            raise ValueError("timbre utterance is empty")


@dataclass
class SynthesisResult:
    waveform: Waveform
    code_grid: CodeGrid
    layer1: np.ndarray
    prompt_len: int
    prompt_frames: int


def synthesize_zero_shot_result(
    req: ZeroShotRequest,
    model: TTSModel,
    codec: Codec,
    codebooks: Codebooks,
) -> SynthesisResult:
    if not req.no_timbre_prefix:
        phonemes, prompt_len = textfront.build_text_prompt(req.timbre_transcript, req.target_text)
        timbre_latents = codec.analyze(req.timbre_utterance)
        # drop the prompt's trailing silence so the continuation picks up
        # mid-speech instead of copying an end-of-utterance pause, and cap
        # the prefix at the short-prompt budget (keeping the most recent
        # frames, the ones generation continues from)
        energy = np.linalg.norm(timbre_latents.frames, axis=1)
        active = np.flatnonzero(energy > 1e-9)
        keep = int(active[-1]) + 1 if active.size else timbre_latents.frames.shape[0]
        start = max(0, keep - req.timbre_prompt_max_frames)
        timbre_grid = rvq_encode(timbre_latents, codebooks).codes[:, start:keep]
    else:
        phonemes = textfront.g2p(req.target_text)
        prompt_len = 0
        timbre_grid = np.zeros((8, 0), dtype=np.int64)

    if req.no_style:
        cond = model.encoder.encode_text_only(phonemes, prompt_len=prompt_len)
    else:
        style = [req.timbre_utterance] if req.style_equals_timbre else req.style_utterances
        style_latents = np.concatenate(
            [codec.analyze(w).frames for w in style], axis=0
        )
        cond = model.encoder(phonemes, style_latents, prompt_len=prompt_len)

    prefix = timbre_grid[0]
    layer1 = model.decoder.ar_generate(cond, prefix, sampling=req.sampling)
    if layer1.size == 0:
        raise SynthesisError(
            "AR decoder generated no tokens",
            diagnostics={
                "text_len": len(phonemes),
                "prompt_len": prompt_len,
                "prefix_frames": int(prefix.size),
                "sampling": req.sampling,
            },
        )
    grid = model.decoder.nar_generate(cond, timbre_grid, layer1)
    latents = rvq_decode(grid, codebooks, upto_stage=8, frame_hop=codec.frame_hop)
    wave = codec.synthesize(latents)
    return SynthesisResult(
        waveform=wave,
        code_grid=grid,
        layer1=layer1,
        prompt_len=prompt_len,
        prompt_frames=int(prefix.size),
    )


def synthesize_zero_shot(
    req: ZeroShotRequest, model: TTSModel, codec: Codec, codebooks: Codebooks
) -> Waveform:
    return synthesize_zero_shot_result(req, model, codec, codebooks).waveform


# -- speaker embedding and SECS ---------------------------------------------------


def _mel_filterbank(n_bands: int, n_bins: int, sample_rate: int) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    nyquist = sample_rate / 2.0
    mel_pts = np.linspace(0.0, hz_to_mel(nyquist), n_bands + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.linspace(0.0, nyquist, n_bins)
    fb = np.zeros((n_bands, n_bins))
    for b in range(n_bands):
        lo, mid, hi = hz_pts[b], hz_pts[b + 1], hz_pts[b + 2]
        up = (bin_freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - bin_freqs) / max(hi - mid, 1e-9)
        fb[b] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def _block_mel_power(samples: np.ndarray, sample_rate: int,
                     block: int, n_bands: int) -> np.ndarray:
    n_blocks = samples.size // block
    if n_blocks == 0:
        raise ValueError("signal shorter than one analysis block")
    trimmed = samples[: n_blocks * block].reshape(n_blocks, block)
    window = np.hanning(block)
    power = np.abs(np.fft.rfft(trimmed * window, axis=1)) ** 2
    fb = _mel_filterbank(n_bands, power.shape[1], sample_rate)
    return power @ fb.T


def speaker_embed(w: Waveform) -> np.ndarray:
    """Unit-norm 40-vector: per-mel-band power mean and standard deviation.

    All features are nonnegative, so cosine similarities of embeddings live
    in [0, 1]. Frames are non-overlapping blocks; the trailing partial block
    is dropped, which makes the statistics exactly invariant to duplicating a
    block-aligned signal.
    """
    if w.duration < MIN_EMBED_SECONDS:
        raise ValueError(
            f"waveform too short to embed: {w.duration:.3f}s < {MIN_EMBED_SECONDS}s"
        )
    mel = _block_mel_power(w.samples, w.sample_rate, EMBED_BLOCK, EMBED_BANDS)
    emb = np.concatenate([mel.mean(axis=0), mel.std(axis=0)])
    norm = np.linalg.norm(emb)
    if norm == 0.0:
        raise ValueError("cannot embed a silent waveform")
    return emb / norm


def secs(a: Waveform, b: Waveform) -> float:
    """Speaker-embedding cosine similarity; 1 means same voice statistics."""
    return float(np.dot(speaker_embed(a), speaker_embed(b)))


# -- mel cepstra, DTW, MCD ----------------------------------------------------------


def mel_cepstra(w: Waveform, frame: int = 256, hop: int = 64,
                n_bands: int = 24, n_coeffs: int = 13) -> np.ndarray:
    """Mel-cepstral coefficients 1..n_coeffs per frame (c0 excluded).

    Band powers are floored at 80 dB below the signal's own peak band power
    (with a tiny absolute floor for silence), a conventional dynamic-range
    cap that keeps empty bands from dominating the cepstra.
    """
    if w.samples.size < frame + hop:
        raise ValueError("waveform too short for cepstral analysis (need >= 2 frames)")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, frame)[::hop]
    window = np.hanning(frame)
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    fb = _mel_filterbank(n_bands, power.shape[1], w.sample_rate)
    mel = power @ fb.T
    floor = max(float(mel.max()) * 1e-8, 1e-12)
    logmel = np.log(np.maximum(mel, floor))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)
    out = ceps[:, 1 : n_coeffs + 1]
    if not np.isfinite(out).all():
        raise ValueError("degenerate cepstral frames (non-finite values)")
    return out


def dtw_align(cost: np.ndarray) -> Tuple[float, List[Tuple[int, int]]]:
    """Min-total-cost monotone path with steps (1,0), (0,1), (1,1).

    Returns the total path cost and the path itself (diagonal preferred on
    ties during backtracking).
    """
    n, m = cost.shape
    if n == 0 or m == 0:
        raise ValueError("empty cost matrix")
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            acc[i, j] = cost[i, j] + best
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        candidates = []
        if i > 0 and j > 0:
            candidates.append((acc[i - 1, j - 1], (i - 1, j - 1)))
        if i > 0:
            candidates.append((acc[i - 1, j], (i - 1, j)))
        if j > 0:
            candidates.append((acc[i, j - 1], (i, j - 1)))
        _, (i, j) = min(candidates, key=lambda c: c[0])
        path.append((i, j))
    path.reverse()
    return float(acc[n - 1, m - 1]), path


def frame_distance_matrix(ref: np.ndarray, syn: np.ndarray) -> np.ndarray:
    """Pairwise MCD frame distance (dB): (10*sqrt(2)/ln 10) * ||c_i - c_j||."""
    diff = ref[:, None, :] - syn[None, :, :]
    return MCD_CONSTANT * np.sqrt(np.sum(diff * diff, axis=2))


def mcd_dtw(ref: Waveform, syn: Waveform) -> float:
    """Mel-cepstral distortion in dB, averaged along the best DTW path."""
    c_ref = mel_cepstra(ref)
    c_syn = mel_cepstra(syn)
    cost = frame_distance_matrix(c_ref, c_syn)
    total, path = dtw_align(cost)
    return total / len(path)


# -- evaluation protocols -------------------------------------------------------------


@dataclass
class UtteranceEval:
    secs: float
    mcd: float

    def __post_init__(self):
        if not (-1e-9 <= self.secs <= 1.0 + 1e-9):
            raise ValueError(f"SECS out of range: {self.secs}")
        if self.mcd < 0:
            raise ValueError(f"MCD must be nonnegative: {self.mcd}")


@dataclass
class SweepRow:
    n_sentences: int
    mean_secs: float
    mean_mcd: float
    n_trials: int


@dataclass
class EvalReport:
    utterances: List[UtteranceEval] = field(default_factory=list)
    sweep_rows: List[SweepRow] = field(default_factory=list)

    @property
    def mean_secs(self) -> float:
        return float(np.mean([u.secs for u in self.utterances]))

    @property
    def mean_mcd(self) -> float:
        return float(np.mean([u.mcd for u in self.utterances]))

    def ci_halfwidth(self, values: Sequence[float]) -> float:
        """Normal-approximation 95% CI half-width."""
        v = np.asarray(values, dtype=np.float64)
        if v.size < 2:
            return 0.0
        return float(1.96 * v.std(ddof=1) / math.sqrt(v.size))

    @property
    def secs_ci(self) -> float:
        return self.ci_halfwidth([u.secs for u in self.utterances])

    @property
    def mcd_ci(self) -> float:
        return self.ci_halfwidth([u.mcd for u in self.utterances])


@dataclass
class TrialPlan:
    """One zero-shot trial: held-out target speaker, reference utterance to
    clone, timbre utterance, a pool of style utterances, and a distractor."""

    target_speaker: int
    distractor_speaker: int
    reference: TrainSample
    timbre: TrainSample
    style_pool: List[TrainSample]
    distractor_reference: TrainSample


def make_trial_plans(
    corpus: Corpus,
    holdout_speakers: Sequence[int],
    n_trials: int,
    seed: int,
    style_pool_size: int = 20,
) -> List[TrialPlan]:
    """Deterministic trial plans; trial i always uses the same utterances, so
    configurations compared across the same plans are paired."""
    if len(holdout_speakers) < 2:
        raise ValueError("need at least two held-out speakers")
    rng = np.random.default_rng([seed, 0xE7A1])
    plans = []
    for i in range(n_trials):
        target = holdout_speakers[i % len(holdout_speakers)]
        others = [s for s in holdout_speakers if s != target]
        distractor = others[int(rng.integers(len(others)))]
        group = corpus.by_speaker(target)
        ref_i = int(rng.integers(len(group)))
        # the shortest other utterance serves as the timbre prompt (the desk
        # stand-in for a ~3 s segment), keeping its transcript honest
        others = [k for k in range(len(group)) if k != ref_i]
        timbre_i = min(others, key=lambda k: group[k].waveform.samples.size)
        pool_candidates = [g for k, g in enumerate(group) if k not in (ref_i, timbre_i)]
        order = rng.permutation(len(pool_candidates))
        pool = [pool_candidates[k] for k in order[:style_pool_size]]
        d_group = corpus.by_speaker(distractor)
        d_ref = d_group[int(rng.integers(len(d_group)))]
        plans.append(
            TrialPlan(
                target_speaker=int(target),
                distractor_speaker=int(distractor),
                reference=group[ref_i],
                timbre=group[timbre_i],
                style_pool=pool,
                distractor_reference=d_ref,
            )
        )
    return plans


@dataclass
class TrialOutcome:
    plan: TrialPlan
    secs_target: float
    secs_distractor: float
    mcd: float

    @property
    def success(self) -> bool:
        return self.secs_target > self.secs_distractor


def run_trial(
    plan: TrialPlan,
    model: TTSModel,
    codec: Codec,
    codebooks: Codebooks,
    style_count: int = 5,
    sampling: Optional[SamplingConfig] = None,
    no_style: bool = False,
    no_timbre_prefix: bool = False,
) -> TrialOutcome:
    if style_count <= 1:
        style = [plan.timbre.waveform]        # 3s-prompt configuration
        style_equals_timbre = True
    else:
        pool = plan.style_pool
        picks = [pool[i % len(pool)] for i in range(style_count)]
        style = [p.waveform for p in picks]
        style_equals_timbre = False
    req = ZeroShotRequest(
        target_text=plan.reference.transcript,
        style_utterances=style,
        timbre_utterance=plan.timbre.waveform,
        timbre_transcript=plan.timbre.transcript,
        sampling=sampling or SamplingConfig(),
        no_style=no_style,
        no_timbre_prefix=no_timbre_prefix,
        style_equals_timbre=style_equals_timbre,
    )
    # degenerate synthesis is scored, not skipped: a failed or empty
    # generation becomes silence, a too-short output is padded to the
    # embeddable minimum, and fully silent audio takes zero similarity on
    # both sides (a failed trial by construction)
    try:
        out = synthesize_zero_shot(req, model, codec, codebooks)
    except SynthesisError:
        sr = plan.reference.waveform.sample_rate
        out = Waveform(np.zeros(int(MIN_EMBED_SECONDS * sr) + EMBED_BLOCK), sr)
    min_len = int(MIN_EMBED_SECONDS * out.sample_rate) + EMBED_BLOCK
    if out.samples.size < min_len:
        out = Waveform(
            np.concatenate([out.samples, np.zeros(min_len - out.samples.size)]),
            out.sample_rate,
        )
    if np.abs(out.samples).max() <= 1e-12:
        secs_target = secs_distractor = 0.0
    else:
        secs_target = secs(out, plan.reference.waveform)
        secs_distractor = secs(out, plan.distractor_reference.waveform)
    return TrialOutcome(
        plan=plan,
        secs_target=secs_target,
        secs_distractor=secs_distractor,
        mcd=mcd_dtw(plan.reference.waveform, out),
    )


def zero_shot_eval(
    model: TTSModel,
    codec: Codec,
    codebooks: Codebooks,
    corpus: Corpus,
    holdout_speakers: Sequence[int],
    n_trials: int,
    seed: int,
    style_count: int = 5,
    sampling: Optional[SamplingConfig] = None,
    no_style: bool = False,
    no_timbre_prefix: bool = False,
) -> Tuple[EvalReport, List[TrialOutcome]]:
    plans = make_trial_plans(corpus, holdout_speakers, n_trials, seed)
    outcomes = []
    for i, plan in enumerate(plans):
        s = sampling or SamplingConfig(seed=seed * 1000 + i)
        outcomes.append(
            run_trial(
                plan, model, codec, codebooks,
                style_count=style_count, sampling=s,
                no_style=no_style, no_timbre_prefix=no_timbre_prefix,
            )
        )
    report = EvalReport(
        utterances=[UtteranceEval(o.secs_target, o.mcd) for o in outcomes]
    )
    return report, outcomes


def prompt_length_sweep(
    model: TTSModel,
    codec: Codec,
    codebooks: Codebooks,
    corpus: Corpus,
    holdout_speakers: Sequence[int],
    counts: Sequence[int] = (1, 5, 10, 20),
    trials_per_cell: int = 10,
    seed: int = 0,
    sampling: Optional[SamplingConfig] = None,
) -> EvalReport:
    """Mean SECS / MCD as a function of the number of style sentences.

    Every cell reuses the same trial plans (paired comparison); style sets
    are nested across counts so longer prompts extend shorter ones. The
    single-sentence cell uses the timbre utterance as the style prompt.
    """
    plans = make_trial_plans(corpus, holdout_speakers, trials_per_cell, seed,
                             style_pool_size=max(counts))
    report = EvalReport()
    for count in counts:
        cell = []
        for i, plan in enumerate(plans):
            s = sampling or SamplingConfig(seed=seed * 1000 + i)
            cell.append(
                run_trial(plan, model, codec, codebooks, style_count=count, sampling=s)
            )
        report.sweep_rows.append(
            SweepRow(
                n_sentences=int(count),
                mean_secs=float(np.mean([o.secs_target for o in cell])),
                mean_mcd=float(np.mean([o.mcd for o in cell])),
                n_trials=len(cell),
            )
        )
    return report


def write_eval_csv(path, report: EvalReport) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "secs", "mcd"])
        for i, u in enumerate(report.utterances):
            w.writerow([i, f"{u.secs:.6f}", f"{u.mcd:.6f}"])
        w.writerow([])
        w.writerow(["mean_secs", f"{report.mean_secs:.6f}", "ci95", f"{report.secs_ci:.6f}"])
        w.writerow(["mean_mcd", f"{report.mean_mcd:.6f}", "ci95", f"{report.mcd_ci:.6f}"])


def write_sweep_csv(path, report: EvalReport) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n_sentences", "mean_secs", "mean_mcd", "n_trials"])
        for row in report.sweep_rows:
            w.writerow([row.n_sentences, f"{row.mean_secs:.6f}", f"{row.mean_mcd:.6f}", row.n_trials])
