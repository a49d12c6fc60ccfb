"""The unified timbre pathway.

Two frozen deterministic encoders stand in for large pretrained models: a
chunk-statistics speech encoder and an attribute-lookup caption encoder.
Only the linear projector that maps caption embeddings into the speech
timbre space is trainable, plus the learned null sequences used for the
unconditional guidance branch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .autograd import Tensor, matmul, mul, reshape

# fixed seed for the frozen encoders; identical across every model instance
FROZEN_ENCODER_SEED = 0x7E57ED

ATTRIBUTE_NAMES = ("gender", "pitch", "rate", "expressiveness")
ATTRIBUTE_ARITIES = (3, 3, 3, 3)


@dataclass(frozen=True)
class Caption:
    """Structured speaker description: one discrete level per attribute."""

    gender: int
    pitch: int
    rate: int
    expressiveness: int

    def __post_init__(self):
        for name, arity in zip(ATTRIBUTE_NAMES, ATTRIBUTE_ARITIES):
            level = getattr(self, name)
            if not 0 <= level < arity:
                raise ValueError(f"caption {name} level {level} outside 0..{arity - 1}")

    def levels(self) -> tuple:
        return (self.gender, self.pitch, self.rate, self.expressiveness)


class SpeechEncoder(nn.Module):
    """Frozen stand-in speaker encoder.

    Splits the prompt into non-overlapping chunks, takes per-bin mean and
    standard deviation of each chunk, and maps the statistics through a
    fixed random affine layer with a tanh squash. One output frame per chunk.
    """

    def __init__(self, n_bins: int, d_timbre: int, chunk_size: int = 8):
        super().__init__()
        self.n_bins = n_bins
        self.chunk_size = chunk_size
        self.w = nn.Parameter((2 * n_bins, d_timbre), ("normal", 0.25), frozen=True)
        self.b = nn.Parameter((d_timbre,), ("normal", 0.3), frozen=True)

    def __call__(self, prompt_mel: np.ndarray) -> np.ndarray:
        mel = np.asarray(prompt_mel)
        if mel.ndim != 2 or mel.shape[1] != self.n_bins:
            raise ValueError(f"prompt must be (frames, {self.n_bins}), got {mel.shape}")
        n_chunks = mel.shape[0] // self.chunk_size
        if n_chunks < 1:
            raise ValueError(
                f"prompt has {mel.shape[0]} frames, need at least {self.chunk_size}"
            )
        chunks = mel[: n_chunks * self.chunk_size].reshape(n_chunks, self.chunk_size, self.n_bins)
        stats = np.concatenate([chunks.mean(axis=1), chunks.std(axis=1)], axis=1)
        return np.tanh(stats.astype(self.w.dtype) @ self.w.data + self.b.data)


class TextEncoder(nn.Module):
    """Frozen caption encoder: one embedding per attribute level plus a
    per-position tag, then a parameter-free global-average mixing step.
    Output length equals the number of attributes."""

    def __init__(self, d_text: int = 24):
        super().__init__()
        self.d_text = d_text
        self.tables = nn.ModuleList(
            [_FrozenTable(arity, d_text) for arity in ATTRIBUTE_ARITIES]
        )
        self.tags = nn.Parameter((len(ATTRIBUTE_NAMES), d_text), ("normal", 0.5), frozen=True)

    def lookup(self, caption: Caption) -> np.ndarray:
        """Pre-mixing representation; differs only at changed attributes."""
        rows = [t.weight.data[level] for t, level in zip(self.tables, caption.levels())]
        return np.stack(rows) + self.tags.data

    def __call__(self, caption: Caption) -> np.ndarray:
        h = self.lookup(caption)
        return h + 0.5 * h.mean(axis=0, keepdims=True)


class _FrozenTable(nn.Module):
    def __init__(self, arity: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter((arity, dim), ("normal", 1.0), frozen=True)


class Projector(nn.Module):
    """Trainable affine map from caption-embedding space into timbre space."""

    def __init__(self, d_text: int, d_timbre: int):
        super().__init__()
        self.w = nn.Parameter((d_text, d_timbre), ("normal", 0.12))
        self.b = nn.Parameter((d_timbre,), ("zeros",))

    def __call__(self, text_embeds):
        x = text_embeds if isinstance(text_embeds, Tensor) else Tensor(text_embeds)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"projector input must be (frames, d_text), got {x.shape}")
        return matmul(x, self.w) + self.b


class NullConditions(nn.Module):
    """Learned null sequences for the unconditional branch: a single timbre
    frame and a repeated conditioning frame."""

    def __init__(self, d_timbre: int, d_model: int):
        super().__init__()
        self.timbre_frame = nn.Parameter((1, d_timbre), ("normal", 0.1))
        self.cond_frame = nn.Parameter((1, d_model), ("normal", 0.1))

    def null_timbre(self) -> Tensor:
        return reshape(self.timbre_frame, (1, self.timbre_frame.shape[1]))

    def null_cond(self, n_frames: int) -> Tensor:
        ones = np.ones((n_frames, 1), dtype=self.cond_frame.dtype)
        return mul(ones, self.cond_frame)


class TimbreEncoder(nn.Module):
    """Bundles both branches, the projector, and the null conditions."""

    def __init__(self, n_bins: int, d_timbre: int, d_model: int,
                 chunk_size: int = 8, d_text: int = 24):
        super().__init__()
        self.speech_enc = SpeechEncoder(n_bins, d_timbre, chunk_size)
        self.text_enc = TextEncoder(d_text)
        self.projector = Projector(d_text, d_timbre)
        self.nulls = NullConditions(d_timbre, d_model)

    def encode_speech(self, prompt_mel: np.ndarray) -> np.ndarray:
        return self.speech_enc(prompt_mel)

    def encode_caption(self, caption: Caption) -> Tensor:
        return self.projector(self.text_enc(caption))


def make_frozen_speech_encoder(n_bins: int, d_timbre: int, chunk_size: int = 8) -> SpeechEncoder:
    """The canonical frozen speech encoder, identical to the one embedded in
    any model instance; evaluation metrics use this directly."""
    enc = SpeechEncoder(n_bins, d_timbre, chunk_size)
    nn.initialize(enc, FROZEN_ENCODER_SEED)
    return enc
