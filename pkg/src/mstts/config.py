"""Run configuration: dataclasses plus a sectioned key/value file format.

The file format is plain configparser INI with sections model / codec /
corpus / train. Desk-scale defaults are what the test suite runs; the
full-scale preset records the published-regime settings (6 blocks per stack,
300k iterations) without ever being executed here.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from typing import Tuple

from . import textfront


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 2
    phoneme_blocks: int = 2
    ar_blocks: int = 2
    nar_blocks: int = 2
    ffn_dim: int = 256
    conv_kernel: int = 3
    vocab_size: int = textfront.VOCAB_SIZE
    latent_dim: int = 64
    codebook_size: int = 64
    max_generation_frames: int = 400
    init_seed: int = 0


@dataclass
class CodecSettings:
    sample_rate: int = 8000
    frame_hop: int = 64
    latent_dim: int = 64
    codebook_size: int = 64
    kmeans_iters: int = 25
    seed: int = 0


@dataclass
class CorpusConfig:
    n_speakers: int = 8
    utterances_per_speaker: int = 40
    seed: int = 1234
    sample_rate: int = 8000


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    peak_lr: float = 3e-3
    warmup_steps: int = 200
    seed: int = 7
    w_ar: float = 1.0
    w_nar: float = 1.0
    holdout_speakers: Tuple[int, ...] = ()
    checkpoint_every: int = 5


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    codec: CodecSettings = field(default_factory=CodecSettings)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def desk_config() -> RunConfig:
    """Defaults sized for a CPU desk run."""
    return RunConfig()


def full_scale_config() -> RunConfig:
    """Published-regime settings, recorded for reference; not run in CI."""
    cfg = RunConfig()
    cfg.model.phoneme_blocks = 6
    cfg.model.ar_blocks = 6
    cfg.model.nar_blocks = 6
    cfg.model.dim = 512
    cfg.model.ffn_dim = 2048
    cfg.model.heads = 8
    cfg.train.epochs = 300_000   # interpreted as iterations at full scale
    cfg.train.batch_size = 32
    return cfg


_SECTIONS = ("model", "codec", "corpus", "train")


def save_config(path, cfg: RunConfig) -> None:
    parser = configparser.ConfigParser()
    for section in _SECTIONS:
        values = asdict(getattr(cfg, section))
        parser[section] = {
            k: ",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
            for k, v in values.items()
        }
    with open(path, "w") as f:
        parser.write(f)


def _parse_value(kind, raw: str):
    if kind == int:
        return int(raw)
    if kind == float:
        return float(raw)
    if kind == Tuple[int, ...]:
        return tuple(int(x) for x in raw.split(",") if x.strip() != "")
    return raw


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)
    cfg = RunConfig()
    for section in _SECTIONS:
        target = getattr(cfg, section)
        if section not in parser:
            continue
        known = {f.name: f.type for f in fields(target)}
        type_map = {f.name: f for f in fields(target)}
        for key, raw in parser[section].items():
            if key not in known:
                raise KeyError(f"unknown config key [{section}] {key}")
            f = type_map[key]
            # dataclass field types arrive as strings under future annotations;
            # resolve from the default value instead
            default = getattr(type(target)(), key)
            if isinstance(default, bool):
                value = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            elif isinstance(default, tuple):
                value = tuple(int(x) for x in raw.split(",") if x.strip() != "")
            else:
                value = raw
            setattr(target, key, value)
    return cfg
