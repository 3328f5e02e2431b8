"""Tuning harness for the desk experiment: trains and evaluates at
checkpoints so acceptance constants can be frozen from measurements."""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from mstts import pipeline, trainer
from mstts.codec import Codec, train_codebooks
from mstts.config import desk_config
from mstts.decoder import SamplingConfig

HOLDOUT = (2, 5)
SEED = 1234


def gen_length_stats(model, codec, cb, corpus, n=6):
    plans = pipeline.make_trial_plans(corpus, HOLDOUT, n, seed=123)
    ratios = []
    for i, p in enumerate(plans):
        req = pipeline.ZeroShotRequest(
            target_text=p.reference.transcript,
            style_utterances=[s.waveform for s in p.style_pool[:5]],
            timbre_utterance=p.timbre.waveform,
            timbre_transcript=p.timbre.transcript,
            sampling=SamplingConfig(mode="topk", k=8, seed=i),
        )
        try:
            res = pipeline.synthesize_zero_shot_result(req, model, codec, cb)
            ratios.append(res.code_grid.length / p.reference.grid.shape[1])
        except pipeline.SynthesisError:
            ratios.append(0.0)
    return np.array(ratios)


def evaluate(model, codec, cb, corpus, trials, tag, sampling_name="greedy"):
    sampling = {
        "topk8": None,
        "greedy": SamplingConfig(mode="greedy"),
        "topk4": SamplingConfig(mode="topk", k=4, temperature=0.8),
    }[sampling_name]

    def run(**kw):
        if sampling is None:
            return pipeline.zero_shot_eval(
                model, codec, cb, corpus, HOLDOUT, trials, seed=99, style_count=5, **kw
            )
        return pipeline.zero_shot_eval(
            model, codec, cb, corpus, HOLDOUT, trials, seed=99, style_count=5,
            sampling=sampling, **kw
        )

    report, outcomes = run()
    wins = sum(o.success for o in outcomes)
    _, no_style = run(no_style=True)
    ns_mean = float(np.mean([o.secs_target for o in no_style]))
    sweep = pipeline.prompt_length_sweep(
        model, codec, cb, corpus, HOLDOUT, counts=(1, 5),
        trials_per_cell=max(10, trials // 2), seed=99,
        sampling=sampling,
    )
    s1, s5 = sweep.sweep_rows[0].mean_secs, sweep.sweep_rows[1].mean_secs
    print(
        f"[{tag}|{sampling_name}] wins {wins}/{trials} ({100*wins/trials:.0f}%) "
        f"full {report.mean_secs:.4f} nostyle {ns_mean:.4f} "
        f"delta {report.mean_secs - ns_mean:+.4f} sweep1 {s1:.4f} sweep5 {s5:.4f} "
        f"mcd {report.mean_mcd:.1f}",
        flush=True,
    )


def main():
    t0 = time.time()
    utts = int(sys.argv[1]) if len(sys.argv) > 1 else 16
    total_epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 120
    eval_every = int(sys.argv[3]) if len(sys.argv) > 3 else 30
    trials = int(sys.argv[4]) if len(sys.argv) > 4 else 20

    corpus = trainer.synth_corpus(8, utts, seed=SEED)
    codec = Codec(8000, 64, 64)
    latents = [codec.analyze(s.waveform) for s in corpus.samples]
    cb = train_codebooks(latents, k=64, seed=0, iters=25)
    trainer.prepare_corpus(corpus, codec, cb)
    lens = [s.grid.shape[1] for s in corpus.samples]
    print(f"corpus ready in {time.time()-t0:.1f}s; frames/utt mean {np.mean(lens):.0f} "
          f"min {min(lens)} max {max(lens)}", flush=True)

    cfg = desk_config()
    cfg.train.holdout_speakers = HOLDOUT
    cfg.train.batch_size = 6
    cfg.model.max_generation_frames = 320

    out = Path("scripts/_tune_run")
    epochs_done = 0
    result = None
    while epochs_done < total_epochs:
        cfg.train.epochs = epochs_done + eval_every
        resume = out / "checkpoint.msve" if epochs_done else None
        t1 = time.time()
        result = trainer.train(corpus, codec, cb, cfg, out_dir=out, resume_from=resume)
        epochs_done += eval_every
        ratios = gen_length_stats(result.model, codec, cb, corpus)
        print(f"epochs {epochs_done} steps {result.global_step} "
              f"loss_ar {result.metrics[-1]['loss_ar']:.3f} "
              f"loss_nar {result.metrics[-1]['loss_nar']:.3f} "
              f"len-ratio {np.round(ratios, 2).tolist()} "
              f"({time.time()-t1:.0f}s train)", flush=True)
        t1 = time.time()
        evaluate(result.model, codec, cb, corpus, trials, f"e{epochs_done}")
        print(f"  eval took {time.time()-t1:.0f}s", flush=True)
    for name in ("topk8", "topk4"):
        evaluate(result.model, codec, cb, corpus, trials, "final", name)
    print(f"total {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
