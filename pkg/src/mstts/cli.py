"""Command-line interface.

Workflow: `corpus` writes a synthetic corpus to disk, `codec-fit` trains the
RVQ codebooks, `train` runs the joint training loop, `synth` clones a voice
from prompt WAVs, and `eval` / `sweep` produce the objective reports.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import audio, codec as codec_mod, config as config_mod, pipeline, trainer
from .codec import Codec, load_codebooks, save_codebooks, train_codebooks
from .decoder import SamplingConfig
from .model import load_model

log = logging.getLogger("mstts")


def _corpus_meta_path(corpus_dir: Path) -> Path:
    return corpus_dir / "meta.json"


def save_corpus(corpus_dir: Path, corpus: trainer.Corpus) -> None:
    wav_dir = corpus_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in corpus.samples:
        name = f"{s.key}.wav"
        audio.write_wav(wav_dir / name, s.waveform)
        entries.append(
            {
                "file": name,
                "speaker_id": s.speaker_id,
                "utterance_id": s.utterance_id,
                "transcript": s.transcript,
            }
        )
    meta = {
        "seed": corpus.seed,
        "sample_rate": corpus.sample_rate,
        "n_speakers": len(corpus.speakers),
        "utterances_per_speaker": len(corpus.samples) // max(len(corpus.speakers), 1),
        "lexicon": corpus.lexicon,
        "samples": entries,
    }
    with open(_corpus_meta_path(corpus_dir), "w") as f:
        json.dump(meta, f, indent=1)


def load_corpus(corpus_dir: Path) -> trainer.Corpus:
    with open(_corpus_meta_path(corpus_dir)) as f:
        meta = json.load(f)
    # regenerate procedurally and verify against the stored transcripts;
    # waveforms on disk are for listening, the generator is the source of truth
    corpus = trainer.synth_corpus(
        meta["n_speakers"], meta["utterances_per_speaker"], meta["seed"], meta["sample_rate"]
    )
    stored = {(e["speaker_id"], e["utterance_id"]): e["transcript"] for e in meta["samples"]}
    for s in corpus.samples:
        expect = stored.get((s.speaker_id, s.utterance_id))
        if expect is not None and expect != s.transcript:
            raise ValueError("corpus on disk does not match its seed (edited meta.json?)")
    return corpus


def _add_common_codec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--frame-hop", type=int, default=64)
    p.add_argument("--latent-dim", type=int, default=64)


def cmd_corpus(args) -> int:
    corpus = trainer.synth_corpus(args.speakers, args.utterances, args.seed, args.sample_rate)
    save_corpus(Path(args.out), corpus)
    print(f"wrote {len(corpus.samples)} utterances from {args.speakers} speakers to {args.out}")
    return 0


def cmd_codec_fit(args) -> int:
    corpus = load_corpus(Path(args.corpus))
    codec = Codec(corpus.sample_rate, args.frame_hop, args.latent_dim)
    latents = [codec.analyze(s.waveform) for s in corpus.samples]
    cb = train_codebooks(latents, k=args.k, seed=args.seed, iters=args.iters)
    save_codebooks(args.out, cb)
    print(f"fit {codec_mod.NUM_STAGES}-stage codebooks (K={cb.size}, D_c={cb.dim}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.desk_config()
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.holdout:
        cfg.train.holdout_speakers = tuple(int(x) for x in args.holdout.split(","))
    corpus = load_corpus(Path(args.corpus))
    codebooks = load_codebooks(args.codebooks)
    cfg.model.codebook_size = codebooks.size
    cfg.model.latent_dim = codebooks.dim
    codec = Codec(corpus.sample_rate, cfg.codec.frame_hop, codebooks.dim)
    result = trainer.train(
        corpus, codec, codebooks, cfg, out_dir=args.out_dir, resume_from=args.resume
    )
    print(f"trained {result.global_step} steps; checkpoint: {result.checkpoint_path}")
    return 0


def _load_synth_stack(args):
    model, _, _ = load_model(args.checkpoint)
    codebooks = load_codebooks(args.codebooks)
    codec = Codec(args.sample_rate, args.frame_hop, codebooks.dim)
    return model, codec, codebooks


def cmd_synth(args) -> int:
    model, codec, codebooks = _load_synth_stack(args)
    style = [audio.read_wav(p) for p in args.style_wavs.split(",")] if args.style_wavs else []
    timbre = audio.read_wav(args.timbre_wav)
    sampling = SamplingConfig(
        mode="greedy" if args.greedy else "topk", seed=args.seed
    )
    req = pipeline.ZeroShotRequest(
        target_text=args.text,
        style_utterances=style or [timbre],
        timbre_utterance=timbre,
        timbre_transcript=args.timbre_text,
        sampling=sampling,
        no_style=args.no_style,
        no_timbre_prefix=args.no_timbre_prefix,
        style_equals_timbre=args.style_equals_timbre,
    )
    wave = pipeline.synthesize_zero_shot(req, model, codec, codebooks)
    audio.write_wav(args.out, wave)
    print(f"wrote {wave.duration:.2f}s to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, codec, codebooks = _load_synth_stack(args)
    corpus = load_corpus(Path(args.corpus))
    holdout = tuple(int(x) for x in args.holdout.split(","))
    trainer.prepare_corpus(corpus, codec, codebooks)
    report, outcomes = pipeline.zero_shot_eval(
        model, codec, codebooks, corpus, holdout, args.trials, args.seed,
        style_count=args.style_count,
        no_style=args.no_style, no_timbre_prefix=args.no_timbre_prefix,
    )
    pipeline.write_eval_csv(args.out, report)
    wins = sum(o.success for o in outcomes)
    print(
        f"trials={len(outcomes)} target-vs-distractor wins={wins} "
        f"mean SECS={report.mean_secs:.4f} +/- {report.secs_ci:.4f} "
        f"mean MCD={report.mean_mcd:.3f} +/- {report.mcd_ci:.3f}"
    )
    return 0


def cmd_sweep(args) -> int:
    model, codec, codebooks = _load_synth_stack(args)
    corpus = load_corpus(Path(args.corpus))
    holdout = tuple(int(x) for x in args.holdout.split(","))
    trainer.prepare_corpus(corpus, codec, codebooks)
    counts = [int(x) for x in args.counts.split(",")]
    report = pipeline.prompt_length_sweep(
        model, codec, codebooks, corpus, holdout,
        counts=counts, trials_per_cell=args.trials, seed=args.seed,
    )
    pipeline.write_sweep_csv(args.out, report)
    for row in report.sweep_rows:
        print(
            f"n_sentences={row.n_sentences:3d} mean_secs={row.mean_secs:.4f} "
            f"mean_mcd={row.mean_mcd:.3f} n_trials={row.n_trials}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mstts", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="generate a synthetic corpus")
    c.add_argument("--out", required=True)
    c.add_argument("--speakers", type=int, default=8)
    c.add_argument("--utterances", type=int, default=40)
    c.add_argument("--seed", type=int, default=1234)
    c.add_argument("--sample-rate", type=int, default=8000)
    c.set_defaults(func=cmd_corpus)

    c = sub.add_parser("codec-fit", help="train RVQ codebooks on a corpus")
    c.add_argument("--corpus", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--k", type=int, default=64)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--iters", type=int, default=25)
    _add_common_codec_args(c)
    c.set_defaults(func=cmd_codec_fit)

    c = sub.add_parser("train", help="train the model")
    c.add_argument("--corpus", required=True)
    c.add_argument("--codebooks", required=True)
    c.add_argument("--out-dir", required=True)
    c.add_argument("--config", default=None)
    c.add_argument("--epochs", type=int, default=None)
    c.add_argument("--holdout", default="")
    c.add_argument("--resume", default=None)
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("synth", help="zero-shot synthesis from prompt WAVs")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--codebooks", required=True)
    c.add_argument("--text", required=True)
    c.add_argument("--style-wavs", default="")
    c.add_argument("--timbre-wav", required=True)
    c.add_argument("--timbre-text", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--greedy", action="store_true")
    c.add_argument("--no-style", action="store_true")
    c.add_argument("--no-timbre-prefix", action="store_true")
    c.add_argument("--style-equals-timbre", action="store_true")
    c.add_argument("--out", required=True)
    _add_common_codec_args(c)
    c.set_defaults(func=cmd_synth)

    c = sub.add_parser("eval", help="zero-shot objective evaluation")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--codebooks", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--holdout", required=True)
    c.add_argument("--trials", type=int, default=40)
    c.add_argument("--style-count", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--no-style", action="store_true")
    c.add_argument("--no-timbre-prefix", action="store_true")
    c.add_argument("--out", required=True)
    _add_common_codec_args(c)
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("sweep", help="style-prompt length sweep")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--codebooks", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--holdout", required=True)
    c.add_argument("--counts", default="1,5,10,20")
    c.add_argument("--trials", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    _add_common_codec_args(c)
    c.set_defaults(func=cmd_sweep)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
