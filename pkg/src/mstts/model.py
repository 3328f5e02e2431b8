"""The full model (speaker-aware encoder + acoustic decoder) and its
checkpoint container.

Checkpoints are a single binary file: magic "MSVE1", a JSON header with the
model config and arbitrary metadata, then named float64 parameter blobs.
Training state (optimizer moments, RNG state, counters) rides along in the
same container under reserved names / header keys, so a training checkpoint
and a model-only checkpoint share one format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from typing import Dict, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .decoder import AcousticDecoder, DecoderConfig
from .encoder import EncoderConfig, SpeakerAwareTextEncoder
from .nncore import Module

CHECKPOINT_MAGIC = b"MSVE1"
FORMAT_VERSION = 1


class TTSModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        enc_cfg = EncoderConfig(
            dim=cfg.dim,
            heads=cfg.heads,
            phoneme_blocks=cfg.phoneme_blocks,
            ffn_dim=cfg.ffn_dim,
            conv_kernel=cfg.conv_kernel,
            latent_dim=cfg.latent_dim,
            vocab_size=cfg.vocab_size,
        )
        dec_cfg = DecoderConfig(
            dim=cfg.dim,
            heads=cfg.heads,
            ar_blocks=cfg.ar_blocks,
            nar_blocks=cfg.nar_blocks,
            ffn_dim=cfg.ffn_dim,
            codebook_size=cfg.codebook_size,
            max_generation_frames=cfg.max_generation_frames,
        )
        self.encoder = SpeakerAwareTextEncoder(enc_cfg, rng)
        self.decoder = AcousticDecoder(dec_cfg, rng)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter '{name}'")
            if arrays[name].shape != p.data.shape:
                raise ValueError(
                    f"parameter '{name}' shape {arrays[name].shape} != {p.data.shape}"
                )
            p.data = np.asarray(arrays[name], dtype=np.float64).copy()


def build_model(cfg: ModelConfig) -> TTSModel:
    """Deterministic construction: the model is a function of (config, seed)."""
    return TTSModel(cfg, np.random.default_rng(cfg.init_seed))


def save_checkpoint(
    path,
    config: ModelConfig,
    arrays: Dict[str, np.ndarray],
    meta: Optional[dict] = None,
) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(config),
        "meta": meta or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> Tuple[ModelConfig, Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        (n,) = struct.unpack("<I", f.read(4))
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(n):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
    cfg = ModelConfig(**header["model_config"])
    return cfg, arrays, header.get("meta", {})


def save_model(path, model: TTSModel, meta: Optional[dict] = None,
               extra_arrays: Optional[Dict[str, np.ndarray]] = None) -> None:
    arrays = model.state_arrays()
    for name, arr in (extra_arrays or {}).items():
        arrays[name] = arr
    save_checkpoint(path, model.cfg, arrays, meta)


def load_model(path) -> Tuple[TTSModel, Dict[str, np.ndarray], dict]:
    """Rebuild a model from a checkpoint; returns (model, extra arrays, meta).

    Reserved non-parameter arrays (optimizer moments etc.) come back in the
    extra dict, keyed by their stored names.
    """
    cfg, arrays, meta = load_checkpoint(path)
    model = build_model(cfg)
    param_names = {name for name, _ in model.named_parameters()}
    model.load_state_arrays({k: v for k, v in arrays.items() if k in param_names})
    extra = {k: v for k, v in arrays.items() if k not in param_names}
    return model, extra, meta
