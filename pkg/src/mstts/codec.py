"""Toy neural-audio-codec stand-in.

Analysis turns a waveform into continuous latent frames via a windowed
transform (interleaved real/imaginary rFFT coordinates truncated to the
latent dim), an 8-stage residual vector quantizer maps latents to discrete
token grids, and synthesis inverts the analysis by overlap-add. The codec is
linear and frozen after codebook training; it stands in for a pre-trained
neural codec, so fidelity beyond keeping speakers distinguishable is not a
goal.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

NUM_STAGES = 8

CODEBOOK_MAGIC = b"MSPC1"
GRID_MAGIC = b"MSPG1"


class CorruptGridError(ValueError):
    """A code grid contains ids outside the codebook."""


@dataclass
class Waveform:
    """Mono audio, float samples clipped to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")
        np.clip(self.samples, -1.0, 1.0, out=self.samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class LatentFrames:
    """Continuous acoustic embeddings, [T, D_c], at one frame per hop."""

    frames: np.ndarray
    frame_hop: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"latent frames must be 2-D, got shape {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class CodeGrid:
    """Discrete acoustic tokens, exactly 8 layers of equal length."""

    codes: np.ndarray
    codebook_size: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2 or self.codes.shape[0] != NUM_STAGES:
            raise ValueError(f"code grid must be [{NUM_STAGES}, T], got {self.codes.shape}")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.codebook_size):
            raise CorruptGridError(
                f"code ids outside [0, {self.codebook_size}): "
                f"min={self.codes.min()}, max={self.codes.max()}"
            )

    @property
    def length(self) -> int:
        return self.codes.shape[1]


@dataclass
class Codebooks:
    """8 stages of [K, D_c] codewords; stage s quantizes the residual left by stages < s."""

    stages: List[np.ndarray]

    def __post_init__(self):
        if len(self.stages) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} codebook stages, got {len(self.stages)}")
        self.stages = [np.asarray(s, dtype=np.float64) for s in self.stages]
        k, d = self.stages[0].shape
        for s in self.stages:
            if s.shape != (k, d):
                raise ValueError("all codebook stages must share the same shape")

    @property
    def size(self) -> int:
        return self.stages[0].shape[0]

    @property
    def dim(self) -> int:
        return self.stages[0].shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for s in self.stages:
            h.update(s.tobytes())
        return h.hexdigest()


@dataclass
class Codec:
    """Frozen linear analysis/synthesis front-end.

    frame_hop samples per frame, an analysis window of 2 * frame_hop, and
    latent_dim retained transform coordinates (interleaved Re/Im, so the
    latents keep the band below latent_dim/4 * sample_rate / frame_hop Hz).
    """

    sample_rate: int = 8000
    frame_hop: int = 64
    latent_dim: int = 64

    def __post_init__(self):
        max_dim = 2 * (self.frame_hop + 1)
        if not 1 <= self.latent_dim <= max_dim:
            raise ValueError(f"latent_dim must be in [1, {max_dim}], got {self.latent_dim}")
        self._window = _periodic_hann(2 * self.frame_hop)

    def num_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.frame_hop)

    def analyze(self, w: Waveform) -> LatentFrames:
        """Frame, window, transform, truncate to the latent dim."""
        hop = self.frame_hop
        t = self.num_frames(w.samples.size)
        padded = np.zeros((t + 1) * hop)
        padded[: w.samples.size] = w.samples
        frames = np.lib.stride_tricks.sliding_window_view(padded, 2 * hop)[::hop][:t]
        spectra = np.fft.rfft(frames * self._window, axis=1)
        feats = np.empty((t, 2 * (hop + 1)))
        feats[:, 0::2] = spectra.real
        feats[:, 1::2] = spectra.imag
        return LatentFrames(feats[:, : self.latent_dim].copy(), hop)

    def synthesize(self, latents: LatentFrames) -> Waveform:
        """Approximate inverse of analyze via overlap-add."""
        hop = self.frame_hop
        t, d = latents.frames.shape
        if latents.frame_hop != hop:
            raise ValueError(f"latents hop {latents.frame_hop} does not match codec hop {hop}")
        feats = np.zeros((max(t, 1), 2 * (hop + 1)))
        feats[:t, :d] = latents.frames
        spectra = feats[:, 0::2] + 1j * feats[:, 1::2]
        segments = np.fft.irfft(spectra, n=2 * hop, axis=1)
        buf = np.zeros((t + 1) * hop)
        wsum = np.zeros((t + 1) * hop)
        for i in range(t):
            buf[i * hop : i * hop + 2 * hop] += segments[i]
            wsum[i * hop : i * hop + 2 * hop] += self._window
        out = buf[: t * hop] / np.maximum(wsum[: t * hop], 1e-2)
        return Waveform(np.clip(out, -1.0, 1.0), self.sample_rate)

    def fingerprint(self) -> str:
        return f"codec:{self.sample_rate}:{self.frame_hop}:{self.latent_dim}"


def _periodic_hann(n: int) -> np.ndarray:
    # periodic form so shifted copies at 50% overlap sum to exactly 1
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


# -- residual vector quantization ------------------------------------------------


def _nearest(residual: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Index of the nearest codeword per row; ties resolve to the lowest id."""
    d2 = (
        np.sum(residual * residual, axis=1, keepdims=True)
        - 2.0 * residual @ codewords.T
        + np.sum(codewords * codewords, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def rvq_encode(latents: Union[LatentFrames, np.ndarray], cb: Codebooks) -> CodeGrid:
    """Greedy stage-wise quantization of each frame."""
    frames = latents.frames if isinstance(latents, LatentFrames) else np.asarray(latents, dtype=np.float64)
    if frames.shape[1] != cb.dim:
        raise ValueError(f"latent dim {frames.shape[1]} does not match codebooks dim {cb.dim}")
    residual = frames.copy()
    ids = np.empty((NUM_STAGES, frames.shape[0]), dtype=np.int64)
    for s in range(NUM_STAGES):
        chosen = _nearest(residual, cb.stages[s])
        ids[s] = chosen
        residual -= cb.stages[s][chosen]
    return CodeGrid(ids, cb.size)


def rvq_decode(
    codes: CodeGrid,
    cb: Codebooks,
    upto_stage: int = NUM_STAGES,
    frame_hop: int = 64,
) -> LatentFrames:
    """Sum the selected codewords of stages 1..upto_stage per frame."""
    if not 1 <= upto_stage <= NUM_STAGES:
        raise ValueError(f"upto_stage must be in [1, {NUM_STAGES}], got {upto_stage}")
    if codes.codes.size and codes.codes.max() >= cb.size:
        raise CorruptGridError(
            f"code id {codes.codes.max()} out of range for codebook size {cb.size}"
        )
    out = np.zeros((codes.length, cb.dim))
    for s in range(upto_stage):
        out += cb.stages[s][codes.codes[s]]
    return LatentFrames(out, frame_hop)


def residual_norms(latents: Union[LatentFrames, np.ndarray], cb: Codebooks) -> np.ndarray:
    """Per-frame residual L2 norm after each stage, [9, T] (row 0 = input norm)."""
    frames = latents.frames if isinstance(latents, LatentFrames) else np.asarray(latents, dtype=np.float64)
    residual = frames.copy()
    norms = [np.linalg.norm(residual, axis=1)]
    for s in range(NUM_STAGES):
        chosen = _nearest(residual, cb.stages[s])
        residual -= cb.stages[s][chosen]
        norms.append(np.linalg.norm(residual, axis=1))
    return np.stack(norms)


# -- codebook training -------------------------------------------------------------


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int) -> np.ndarray:
    """Plain k-means with k-means++ seeding and empty-cluster carryover."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i] = points[rng.integers(n)]
            continue
        centers[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    for _ in range(iters):
        labels = _nearest(points, centers)
        new_centers = centers.copy()
        for c in range(k):
            members = points[labels == c]
            if members.shape[0]:
                new_centers[c] = members.mean(axis=0)
        if np.abs(new_centers - centers).max() < 1e-12:
            centers = new_centers
            break
        centers = new_centers
    return centers


def _force_zero_and_dedupe(centers: np.ndarray) -> tuple[np.ndarray, int]:
    """Zero out the centroid nearest the origin and make all rows distinct."""
    centers = centers.copy()
    centers[np.argmin(np.linalg.norm(centers, axis=1))] = 0.0
    seen: dict[bytes, int] = {}
    n_dups = 0
    for i in range(centers.shape[0]):
        key = centers[i].tobytes()
        while key in seen:
            n_dups += 1
            centers[i, 0] += 1e-7 * (n_dups + 1)
            key = centers[i].tobytes()
        seen[key] = i
    return centers, n_dups


def train_codebooks(
    corpus: Sequence[Union[LatentFrames, np.ndarray]],
    k: int = 64,
    seed: int = 0,
    iters: int = 25,
    max_fit_frames: int = 8192,
) -> Codebooks:
    """Stage-wise k-means over residuals, deterministic given the seed.

    Every stage gets the zero vector as a codeword so per-frame residual
    norms can never grow across stages. If a stage sees fewer distinct
    residuals than k, the surplus rows are tiny deterministic offsets of the
    collapsed centroids (effective codebook smaller than k; logged).
    """
    frames = np.vstack([
        c.frames if isinstance(c, LatentFrames) else np.asarray(c, dtype=np.float64)
        for c in corpus
    ])
    if frames.shape[0] < k:
        raise ValueError(f"need at least k={k} frames to fit codebooks, got {frames.shape[0]}")
    rng = np.random.default_rng(seed)
    if frames.shape[0] > max_fit_frames:
        pick = rng.choice(frames.shape[0], size=max_fit_frames, replace=False)
        residual = frames[np.sort(pick)].copy()
    else:
        residual = frames.copy()
    stages = []
    for s in range(NUM_STAGES):
        centers = _kmeans(residual, k, rng, iters)
        centers, n_dups = _force_zero_and_dedupe(centers)
        if n_dups:
            log.warning(
                "codebook stage %d: %d duplicate centroids, effective size %d < %d",
                s + 1, n_dups, k - n_dups, k,
            )
        stages.append(centers)
        chosen = _nearest(residual, centers)
        residual = residual - centers[chosen]
    return Codebooks(stages)


# -- binary containers --------------------------------------------------------------


def save_codebooks(path, cb: Codebooks) -> None:
    """MSPC1 container: magic, K, D_c, then 8 stages of row-major float64."""
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<II", cb.size, cb.dim))
        for s in cb.stages:
            f.write(np.ascontiguousarray(s, dtype="<f8").tobytes())


def load_codebooks(path) -> Codebooks:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != CODEBOOK_MAGIC:
            raise ValueError(f"bad codebook magic {magic!r}")
        k, d = struct.unpack("<II", f.read(8))
        stages = []
        for _ in range(NUM_STAGES):
            raw = f.read(k * d * 8)
            if len(raw) != k * d * 8:
                raise ValueError("truncated codebook file")
            stages.append(np.frombuffer(raw, dtype="<f8").reshape(k, d).copy())
    return Codebooks(stages)


def save_code_grid(path, grid: CodeGrid) -> None:
    """MSPG1 container: magic, T, K, then 8 x T little-endian uint16 ids."""
    if grid.codebook_size > 0xFFFF:
        raise ValueError("grid file format holds 16-bit ids only")
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<II", grid.length, grid.codebook_size))
        f.write(np.ascontiguousarray(grid.codes, dtype="<u2").tobytes())


def load_code_grid(path) -> CodeGrid:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != GRID_MAGIC:
            raise ValueError(f"bad code grid magic {magic!r}")
        t, k = struct.unpack("<II", f.read(8))
        raw = f.read(NUM_STAGES * t * 2)
        if len(raw) != NUM_STAGES * t * 2:
            raise ValueError("truncated code grid file")
        codes = np.frombuffer(raw, dtype="<u2").reshape(NUM_STAGES, t).astype(np.int64)
    return CodeGrid(codes, k)
