"""Speaker-aware text encoder.

A phoneme encoder (embedding + feed-forward transformer blocks) meets an
acoustic encoder (8 strided 1-D convolutions, 16x total downsampling) in a
reference-attention module: phoneme embeddings query the downsampled style
embeddings, and the aligned result is added back onto the phoneme embeddings.
The output length is always the phoneme length, so the style prompt can be
arbitrarily long.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import textfront
from .nncore import (
    ConfigError,
    Conv1d,
    Embedding,
    Module,
    ModuleList,
    Tensor,
    TransformerBlock,
    conv1d_output_length,
    scaled_dot_attention,
    sinusoidal_positions,
)

# fixed stride schedule; the product is the 16x downsampling factor
ACOUSTIC_STRIDES: Tuple[int, ...] = (2, 1, 2, 1, 2, 1, 2, 1)
DOWNSAMPLE_FACTOR = int(np.prod(ACOUSTIC_STRIDES))


@dataclass
class EncoderConfig:
    dim: int = 64
    heads: int = 2
    phoneme_blocks: int = 2          # full-scale runs use 6
    ffn_dim: int = 256
    conv_kernel: int = 3
    latent_dim: int = 64
    vocab_size: int = textfront.VOCAB_SIZE
    strides: Tuple[int, ...] = ACOUSTIC_STRIDES

    def __post_init__(self):
        if tuple(self.strides) != ACOUSTIC_STRIDES:
            raise ConfigError(f"acoustic encoder strides are fixed at {ACOUSTIC_STRIDES}")


@dataclass
class StyleEmbeddings:
    """Quasi-phoneme-level style rows, one per 16 codec frames."""

    rows: Tensor
    source_frame_count: int


@dataclass
class SpeakerAwareEmbeddings:
    """Fused text+style rows, [L, D]; carries the text-prompt boundary."""

    rows: Tensor
    prompt_len: int = 0
    attention: Optional[np.ndarray] = None

    def __len__(self):
        return self.rows.data.shape[0]


class PhonemeEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.embed = Embedding(cfg.vocab_size, cfg.dim, rng)
        self.blocks = ModuleList(
            [TransformerBlock(cfg.dim, cfg.heads, cfg.ffn_dim, cfg.conv_kernel, rng)
             for _ in range(cfg.phoneme_blocks)]
        )
        self.dim = cfg.dim

    def forward(self, phonemes: textfront.PhonemeSequence) -> Tensor:
        ids = phonemes.ids if isinstance(phonemes, textfront.PhonemeSequence) else np.asarray(phonemes)
        if ids.size == 0:
            raise ValueError("phoneme sequence is empty")
        x = self.embed(ids) + sinusoidal_positions(ids.size, self.dim)
        for block in self.blocks:
            x = block(x)
        return x


class AcousticEncoder(Module):
    """8-layer strided conv stack over codec latents, ReLU between layers."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        convs = []
        din = cfg.latent_dim
        for stride in cfg.strides:
            convs.append(Conv1d(din, cfg.dim, cfg.conv_kernel, rng, stride=stride))
            din = cfg.dim
        self.convs = ModuleList(convs)
        self.strides = tuple(cfg.strides)
        self.kernel = cfg.conv_kernel

    @staticmethod
    def output_length(t: int, strides: Tuple[int, ...] = ACOUSTIC_STRIDES, kernel: int = 3) -> int:
        for s in strides:
            t = conv1d_output_length(t, s, kernel)
        return t

    def forward(self, style: np.ndarray) -> StyleEmbeddings:
        frames = np.asarray(style, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise ValueError("style prompt is empty; the encoder requires one")
        t_style = frames.shape[0]
        if t_style < DOWNSAMPLE_FACTOR:
            # short prompts are right-padded with their last frame
            pad = np.repeat(frames[-1:], DOWNSAMPLE_FACTOR - t_style, axis=0)
            frames = np.concatenate([frames, pad], axis=0)
        x = Tensor(frames)
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i != last:
                x = x.relu()
        return StyleEmbeddings(rows=x, source_frame_count=t_style)


class ReferenceAttention(Module):
    """Single-head scaled dot-product attention from phonemes onto style rows."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        from .nncore import Linear

        self.w_query = Linear(dim, dim, rng, bias=False)
        self.w_key = Linear(dim, dim, rng, bias=False)
        self.w_value = Linear(dim, dim, rng, bias=False)
        self.w_out = Linear(dim, dim, rng, bias=False)

    def forward(self, phon: Tensor, style_rows: Tensor) -> Tuple[Tensor, Tensor]:
        q = self.w_query(phon)
        k = self.w_key(style_rows)
        v = self.w_value(style_rows)
        attended, weights = scaled_dot_attention(q, k, v)
        return self.w_out(attended), weights


class SpeakerAwareTextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.phoneme_encoder = PhonemeEncoder(cfg, rng)
        self.acoustic_encoder = AcousticEncoder(cfg, rng)
        self.reference_attention = ReferenceAttention(cfg.dim, rng)

    def encode_style(self, style_latents: np.ndarray) -> StyleEmbeddings:
        return self.acoustic_encoder(style_latents)

    def forward(
        self,
        phonemes: textfront.PhonemeSequence,
        style_latents: np.ndarray,
        prompt_len: int = 0,
    ) -> SpeakerAwareEmbeddings:
        phon = self.phoneme_encoder(phonemes)
        style = self.encode_style(style_latents)
        aligned, weights = self.reference_attention(phon, style.rows)
        return SpeakerAwareEmbeddings(
            rows=phon + aligned, prompt_len=prompt_len, attention=weights.data
        )

    def encode_text_only(
        self, phonemes: textfront.PhonemeSequence, prompt_len: int = 0
    ) -> SpeakerAwareEmbeddings:
        """Style-bypass path used by the timbre-only ablation."""
        return SpeakerAwareEmbeddings(
            rows=self.phoneme_encoder(phonemes), prompt_len=prompt_len
        )
