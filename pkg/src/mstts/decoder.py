"""VALL-E-style acoustic decoder.

One autoregressive transformer predicts codebook layer 1 token by token
behind a timbre-prompt prefix; one non-autoregressive transformer fills in
layers 2..8, one layer per pass, conditioned on the summed embeddings of the
timbre-prompt layers up to the current stage and of the already-predicted
layers. Eight embedding tables are shared between the two; only layer 1 has
an end-of-sequence id (the codebook size K).

Next-token logits for the very first acoustic position are read off the last
conditioning row, so generation also works from an empty prefix and the
training loss covers every token of layer 1 plus the terminating EOS.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .codec import NUM_STAGES, CodeGrid
from .encoder import SpeakerAwareEmbeddings
from .nncore import (
    ConfigError,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    Tensor,
    TransformerBlock,
    concat,
    no_grad,
    sinusoidal_positions,
)

NAR_STAGES = tuple(range(2, NUM_STAGES + 1))  # seven target stages


class EmptyGenerationWarning(UserWarning):
    pass


@dataclass
class DecoderConfig:
    dim: int = 64
    heads: int = 2
    ar_blocks: int = 2               # full-scale runs use 6
    nar_blocks: int = 2
    ffn_dim: int = 256
    codebook_size: int = 64
    max_generation_frames: int = 400


@dataclass
class SamplingConfig:
    mode: str = "topk"               # "greedy" or "topk"
    k: int = 8
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "topk"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "topk" and (self.k < 1 or self.temperature <= 0.0):
            raise ValueError("topk sampling needs k >= 1 and temperature > 0")


def _cond_rows(cond: Union[SpeakerAwareEmbeddings, Tensor, np.ndarray]) -> Tensor:
    if isinstance(cond, SpeakerAwareEmbeddings):
        return cond.rows
    if isinstance(cond, Tensor):
        return cond
    return Tensor(cond)


def ar_attention_mask(text_len: int, acoustic_len: int) -> np.ndarray:
    """Boolean [n, n] mask: text attends within text, acoustic row t attends
    to all text and to acoustic rows <= t."""
    n = text_len + acoustic_len
    allow = np.zeros((n, n), dtype=bool)
    allow[:, :text_len] = True
    allow[text_len:, text_len:] = np.tril(np.ones((acoustic_len, acoustic_len), dtype=bool))
    allow[:text_len, text_len:] = False
    return allow


class AcousticDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.dim % cfg.heads != 0:
            raise ConfigError(f"decoder dim {cfg.dim} not divisible by {cfg.heads} heads")
        self.cfg = cfg
        k = cfg.codebook_size
        self.eos_id = k
        # table 0 carries the EOS row; tables 1..7 hold exactly K rows
        tables = [Embedding(k + 1, cfg.dim, rng)]
        tables += [Embedding(k, cfg.dim, rng) for _ in range(NUM_STAGES - 1)]
        self.embeddings = ModuleList(tables)
        # feed-forward kernels are 1 (position-wise) here: anything wider
        # would let the AR stack see future tokens past the attention mask
        self.ar_blocks = ModuleList(
            [TransformerBlock(cfg.dim, cfg.heads, cfg.ffn_dim, 1, rng)
             for _ in range(cfg.ar_blocks)]
        )
        self.nar_blocks = ModuleList(
            [TransformerBlock(cfg.dim, cfg.heads, cfg.ffn_dim, 1, rng)
             for _ in range(cfg.nar_blocks)]
        )
        self.ar_norm = LayerNorm(cfg.dim)
        self.nar_norm = LayerNorm(cfg.dim)
        self.ar_head = Linear(cfg.dim, k + 1, rng, scale=0.02)
        self.nar_heads = ModuleList(
            [Linear(cfg.dim, k, rng, scale=0.02) for _ in NAR_STAGES]
        )
        self.stage_embedding = Parameter(rng.normal(0.0, 0.02, size=(len(NAR_STAGES), cfg.dim)))

    # -- AR path -------------------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray, allow_eos: bool) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        hi = self.eos_id if allow_eos else self.eos_id - 1
        if tokens.size and (tokens.min() < 0 or tokens.max() > hi):
            raise ValueError(f"token ids outside [0, {hi}]: min={tokens.min()}, max={tokens.max()}")
        return tokens

    def _ar_hidden(self, cond, tokens: np.ndarray) -> Tensor:
        rows = _cond_rows(cond)
        text_len = rows.data.shape[0]
        x = rows + sinusoidal_positions(text_len, self.cfg.dim)
        t = int(tokens.size)
        if t:
            acoustic = self.embeddings[0](tokens) + sinusoidal_positions(t, self.cfg.dim)
            x = concat([x, acoustic], axis=0)
        mask = ar_attention_mask(text_len, t)
        for block in self.ar_blocks:
            x = block(x, mask=mask)
        return self.ar_norm(x)

    def ar_training_logits(self, cond, tokens) -> Tensor:
        """Logits for every layer-1 token plus the trailing EOS, [T+1, K+1].

        Row 0 is read off the last conditioning row, so the first token is a
        teacher-forced prediction too.
        """
        tokens = self._check_tokens(tokens, allow_eos=False)
        rows = _cond_rows(cond)
        text_len = rows.data.shape[0]
        hidden = self._ar_hidden(cond, tokens)
        return self.ar_head(hidden[text_len - 1 : text_len + tokens.size])

    def ar_forward(self, cond, layer1_tokens) -> Tensor:
        """Next-token logits at each acoustic position, [T, K+1]."""
        tokens = self._check_tokens(layer1_tokens, allow_eos=True)
        rows = _cond_rows(cond)
        text_len = rows.data.shape[0]
        hidden = self._ar_hidden(cond, tokens)
        return self.ar_head(hidden[text_len : text_len + tokens.size])

    def ar_generate(
        self,
        cond,
        prompt_layer1,
        sampling: Optional[SamplingConfig] = None,
        max_frames: Optional[int] = None,
    ) -> np.ndarray:
        """Continue layer 1 after the prompt prefix; returns new ids only."""
        sampling = sampling or SamplingConfig()
        limit = self.cfg.max_generation_frames if max_frames is None else max_frames
        prompt = self._check_tokens(prompt_layer1, allow_eos=False)
        rng = np.random.default_rng(sampling.seed)
        rows = _cond_rows(cond)
        text_len = rows.data.shape[0]
        tokens = list(prompt)
        generated: list[int] = []
        with no_grad():
            for _ in range(limit):
                hidden = self._ar_hidden(rows, np.asarray(tokens, dtype=np.int64))
                logits = self.ar_head(hidden[text_len - 1 + len(tokens)].reshape((1, -1)))
                next_id = _sample_token(logits.data[0], sampling, rng)
                if next_id == self.eos_id:
                    break
                tokens.append(next_id)
                generated.append(next_id)
        if not generated:
            warnings.warn("AR generation produced no tokens before EOS", EmptyGenerationWarning)
        return np.asarray(generated, dtype=np.int64)

    # -- NAR path --------------------------------------------------------------

    def nar_forward(
        self,
        cond,
        prompt_codes: np.ndarray,
        predicted: Sequence[np.ndarray],
        stage: int,
    ) -> Tensor:
        """Logits for the stage-th layer over the target region, [T, K].

        The prompt region sums embedded prompt layers 1..stage; the target
        region sums embedded predicted layers 1..stage-1 plus a stage
        embedding. Attention is fully bidirectional.
        """
        if not isinstance(stage, (int, np.integer)) or not 2 <= int(stage) <= NUM_STAGES:
            raise ValueError(f"stage must be an integer in [2, {NUM_STAGES}], got {stage}")
        stage = int(stage)
        prompt_codes = np.asarray(prompt_codes, dtype=np.int64)
        if prompt_codes.ndim != 2 or prompt_codes.shape[0] != NUM_STAGES:
            raise ValueError(f"prompt codes must be [{NUM_STAGES}, P], got {prompt_codes.shape}")
        predicted = [np.asarray(p, dtype=np.int64) for p in predicted]
        if len(predicted) != stage - 1:
            raise ValueError(
                f"stage {stage} needs {stage - 1} predicted layers, got {len(predicted)}"
            )
        t = predicted[0].size if predicted else 0
        for p in predicted:
            if p.size != t:
                raise ValueError("predicted layers must share one length")

        rows = _cond_rows(cond)
        text_len = rows.data.shape[0]
        dim = self.cfg.dim
        x = rows + sinusoidal_positions(text_len, dim)
        parts = [x]
        p_len = prompt_codes.shape[1]
        if p_len:
            prompt_emb = self.embeddings[0](prompt_codes[0])
            for layer in range(1, stage):
                prompt_emb = prompt_emb + self.embeddings[layer](prompt_codes[layer])
            parts.append(prompt_emb + sinusoidal_positions(p_len, dim))
        if t:
            target_emb = self.embeddings[0](predicted[0])
            for layer in range(1, stage - 1):
                target_emb = target_emb + self.embeddings[layer](predicted[layer])
            target_emb = target_emb + self.stage_embedding[stage - 2]
            parts.append(target_emb + sinusoidal_positions(t, dim))
        x = concat(parts, axis=0) if len(parts) > 1 else parts[0]
        for block in self.nar_blocks:
            x = block(x)
        hidden = self.nar_norm(x)
        return self.nar_heads[stage - 2](hidden[text_len + p_len :])

    def nar_generate(
        self,
        cond,
        prompt_codes: np.ndarray,
        layer1: np.ndarray,
        stage_order: Optional[Sequence[int]] = None,
    ) -> CodeGrid:
        """Greedy stage-by-stage fill of layers 2..8; assembles the full grid.

        stage_order exists for diagnostics; the default (2..8 in order) is the
        only order whose conditioning matches training.
        """
        layer1 = self._check_tokens(layer1, allow_eos=False)
        order = tuple(stage_order) if stage_order is not None else NAR_STAGES
        grid: List[np.ndarray] = [layer1]
        with no_grad():
            for stage in order:
                logits = self.nar_forward(cond, prompt_codes, grid, stage)
                grid.append(np.argmax(logits.data, axis=1).astype(np.int64))
        return CodeGrid(np.stack(grid), self.cfg.codebook_size)


def _sample_token(logits: np.ndarray, sampling: SamplingConfig, rng: np.random.Generator) -> int:
    if sampling.mode == "greedy":
        return int(np.argmax(logits))
    k = min(sampling.k, logits.size)
    # order by descending logit, ascending id on ties, for cross-run stability
    order = np.lexsort((np.arange(logits.size), -logits))[:k]
    scaled = logits[order] / sampling.temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    return int(rng.choice(order, p=probs))
