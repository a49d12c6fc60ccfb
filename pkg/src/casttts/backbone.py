"""The synthesis network.

Character tokens are embedded, filler-padded to the target frame count, and
refined by ConvNeXt-style blocks. The noisy grid is concatenated with that
conditioning per frame and projected into the latent width, then processed
by transformer blocks whose self-attention, timbre cross-attention, and FFN
branches are all modulated by zero-initialized adaptive layer norm driven by
the flow-step embedding. Mirrored long skips join the two halves of the
stack. Fusion variants rewire how the timbre sequence enters:

  SA      timbre concatenated along time with the latent, no cross-attention
  SACA    speech timbre concatenated, text timbre via cross-attention
  CA      all timbre via cross-attention
  CA_TV   CA plus a learnable per-modality tag frame prepended to the timbre

For the concat variants the speech branch feeds the raw prompt grid itself
(the mel-like sequence common to this fusion style), so speaker identity
arrives entangled with the prompt's content; the cross-attention variants
receive the compact encoder output instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .autograd import Tensor, concat, gelu, matmul, reshape, silu, softmax, transpose

FUSION_KINDS = ("SA", "SACA", "CA", "CA_TV")
MASK_NEG = -1e30


@dataclass(frozen=True)
class BlockConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_timbre: int = 32
    fusion: str = "CA"
    n_bins: int = 16
    vocab_size: int = 7
    filler_id: int = 6
    n_conv_blocks: int = 2
    conv_kernel: int = 7
    ffn_mult: int = 4
    d_text: int = 24
    chunk_size: int = 8

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.n_layers % 2 != 0:
            raise ValueError(f"n_layers must be even for mirrored skips, got {self.n_layers}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"unknown fusion variant {self.fusion!r}")
        if not 0 <= self.filler_id < self.vocab_size:
            raise ValueError("filler_id outside vocabulary")


def embed_and_pad(embedding: nn.Embedding, chars, target_frames: int, filler_id: int) -> Tensor:
    """Look up character embeddings and append filler embeddings out to the
    target frame count."""
    ids = np.asarray(chars)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("chars must be a nonempty 1-d id sequence")
    if np.any(ids < 0) or np.any(ids >= embedding.weight.shape[0]):
        raise ValueError("character id outside vocabulary")
    if ids.size > target_frames:
        raise ValueError(
            f"transcription of {ids.size} tokens longer than {target_frames} target frames"
        )
    padded = np.concatenate([ids, np.full(target_frames - ids.size, filler_id, dtype=ids.dtype)])
    return embedding(padded)


class GRN(nn.Module):
    """Global response normalization over the sequence axis."""

    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Parameter((dim,), ("zeros",))
        self.beta = nn.Parameter((dim,), ("zeros",))

    def __call__(self, x: Tensor) -> Tensor:
        gx = (x * x).sum(axis=0, keepdims=True) ** 0.5  # (1, C)
        nx = gx / (gx.mean(axis=-1, keepdims=True) + 1e-6)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtBlock(nn.Module):
    """Depthwise conv, layer norm, 4x pointwise expansion with a smooth gate,
    GRN, pointwise projection, residual."""

    def __init__(self, dim: int, kernel: int = 7, mult: int = 4):
        super().__init__()
        self.kernel = kernel
        self.dw_w = nn.Parameter((kernel, dim), ("normal", 0.02))
        self.dw_b = nn.Parameter((dim,), ("zeros",))
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(dim, mult * dim)
        self.grn = GRN(mult * dim)
        self.pw2 = nn.Linear(mult * dim, dim)

    def _dwconv(self, x: Tensor) -> Tensor:
        L = x.shape[0]
        pad_rows = np.zeros((self.kernel // 2, x.shape[1]), dtype=x.dtype)
        xp = concat([Tensor(pad_rows), x, Tensor(pad_rows)], axis=0)
        acc = None
        for k in range(self.kernel):
            term = xp[k : k + L] * self.dw_w[k]
            acc = term if acc is None else acc + term
        return acc + self.dw_b

    def __call__(self, x: Tensor) -> Tensor:
        res = x
        x = self._dwconv(x)
        x = self.norm(x)
        x = gelu(self.pw1(x))
        x = self.grn(x)
        x = self.pw2(x)
        return res + x


def convnext_encode(blocks, x: Tensor) -> Tensor:
    if x.shape[0] < 1:
        raise ValueError("conv encoder needs a nonempty sequence")
    for b in blocks:
        x = b(x)
    return x


class StepEmbed(nn.Module):
    """Sinusoidal features of the flow step followed by a two-layer MLP."""

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.lin1 = nn.Linear(d_model, d_model)
        self.lin2 = nn.Linear(d_model, d_model)

    def features(self, tau: np.ndarray, dtype) -> np.ndarray:
        half = self.d_model // 2
        omega = np.exp(np.linspace(0.0, math.log(1000.0), half))
        args = np.asarray(tau, dtype=float)[:, None] * omega[None, :]
        return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(dtype)

    def __call__(self, tau: np.ndarray) -> Tensor:
        feats = self.features(tau, self.lin1.w.dtype)
        return self.lin2(silu(self.lin1(Tensor(feats))))


class Modulation(nn.Module):
    """adaLN-zero parameters (shift, scale, gate) for one residual branch."""

    def __init__(self, d_model: int):
        super().__init__()
        self.d = d_model
        self.lin = nn.Linear(d_model, 3 * d_model, zero_init=True)

    def __call__(self, t_emb: Tensor):
        m = self.lin(silu(t_emb))  # (B, 3d)
        B = m.shape[0]
        m = reshape(m, (B, 1, 3 * self.d))
        return (
            m[:, :, : self.d],
            m[:, :, self.d : 2 * self.d],
            m[:, :, 2 * self.d :],
        )


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


_ROTARY_CACHE = {}


def _rotary_tables(seq_len: int, d_head: int, dtype):
    key = (seq_len, d_head, np.dtype(dtype).str)
    hit = _ROTARY_CACHE.get(key)
    if hit is not None:
        return hit
    half = d_head // 2
    inv_freq = 10000.0 ** (-np.arange(half) / half)
    angles = np.arange(seq_len)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1).astype(dtype)
    _ROTARY_CACHE[key] = (cos, sin)
    return cos, sin


def _rotate_half(x: Tensor) -> Tensor:
    half = x.shape[-1] // 2
    return concat([x[..., half:] * -1.0, x[..., :half]], axis=-1)


def _apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    return x * cos + _rotate_half(x) * sin


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, S, D = x.shape
    return transpose(reshape(x, (B, S, n_heads, D // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, S, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, S, H * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, key_mask_add) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
    if key_mask_add is not None:
        scores = scores + key_mask_add
    return matmul(softmax(scores, axis=-1), v)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def __call__(self, x: Tensor, rot, key_mask_add) -> Tensor:
        q = _split_heads(self.wq(x), self.n_heads)
        k = _split_heads(self.wk(x), self.n_heads)
        v = _split_heads(self.wv(x), self.n_heads)
        cos, sin = rot
        q = _apply_rotary(q, cos, sin)
        k = _apply_rotary(k, cos, sin)
        return self.wo(_merge_heads(_attend(q, k, v, key_mask_add)))


class CrossAttention(nn.Module):
    """Queries from the latent; keys/values from the timbre sequence, which
    carries no positional encoding and is treated as an unordered set."""

    def __init__(self, d_model: int, d_timbre: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_timbre, d_model)
        self.wv = nn.Linear(d_timbre, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def __call__(self, x: Tensor, timbre: Tensor, key_mask_add) -> Tensor:
        q = _split_heads(self.wq(x), self.n_heads)
        k = _split_heads(self.wk(timbre), self.n_heads)
        v = _split_heads(self.wv(timbre), self.n_heads)
        return self.wo(_merge_heads(_attend(q, k, v, key_mask_add)))


class FFN(nn.Module):
    def __init__(self, d_model: int, mult: int):
        super().__init__()
        self.lin1 = nn.Linear(d_model, mult * d_model)
        self.lin2 = nn.Linear(mult * d_model, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(gelu(self.lin1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, cfg: BlockConfig, has_cross: bool):
        super().__init__()
        self.has_cross = has_cross
        self.norm_sa = nn.LayerNorm(cfg.d_model, affine=False)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads)
        self.mod_sa = Modulation(cfg.d_model)
        if has_cross:
            self.norm_ca = nn.LayerNorm(cfg.d_model, affine=False)
            self.cross = CrossAttention(cfg.d_model, cfg.d_timbre, cfg.n_heads)
            self.mod_ca = Modulation(cfg.d_model)
        self.norm_ffn = nn.LayerNorm(cfg.d_model, affine=False)
        self.ffn = FFN(cfg.d_model, cfg.ffn_mult)
        self.mod_ffn = Modulation(cfg.d_model)

    def __call__(self, x, t_emb, timbre, rot, self_mask_add, timbre_mask_add):
        shift, scale, gate = self.mod_sa(t_emb)
        x = x + gate * self.attn(modulate(self.norm_sa(x), shift, scale), rot, self_mask_add)
        if self.has_cross and timbre is not None:
            shift, scale, gate = self.mod_ca(t_emb)
            x = x + gate * self.cross(
                modulate(self.norm_ca(x), shift, scale), timbre, timbre_mask_add
            )
        shift, scale, gate = self.mod_ffn(t_emb)
        x = x + gate * self.ffn(modulate(self.norm_ffn(x), shift, scale))
        return x


class Backbone(nn.Module):
    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.char_embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.conv_blocks = nn.ModuleList(
            [ConvNeXtBlock(cfg.d_model, cfg.conv_kernel, 4) for _ in range(cfg.n_conv_blocks)]
        )
        self.in_proj = nn.Linear(cfg.n_bins + cfg.d_model, cfg.d_model)
        self.step_embed = StepEmbed(cfg.d_model)
        has_cross = cfg.fusion != "SA"
        if cfg.fusion in ("SA", "SACA"):
            self.timbre_in = nn.Linear(cfg.d_timbre, cfg.d_model)
            self.timbre_in_mel = nn.Linear(cfg.n_bins, cfg.d_model)
        if cfg.fusion == "CA_TV":
            self.tag_speech = nn.Parameter((1, cfg.d_timbre), ("normal", 0.1))
            self.tag_text = nn.Parameter((1, cfg.d_timbre), ("normal", 0.1))
        self.blocks = nn.ModuleList(
            [TransformerBlock(cfg, has_cross) for _ in range(cfg.n_layers)]
        )
        self.skip_proj = nn.ModuleList(
            [
                nn.Linear(2 * cfg.d_model, cfg.d_model)
                for _ in range(cfg.n_layers // 2)
            ]
        )
        for lin in self.skip_proj:
            lin.w.init_spec = ("skip_identity",)
        self.final_norm = nn.LayerNorm(cfg.d_model, affine=False)
        self.final_mod = nn.Linear(cfg.d_model, 2 * cfg.d_model, zero_init=True)
        self.head = nn.Linear(cfg.d_model, cfg.n_bins, zero_init=True)

    @property
    def dtype(self):
        return self.in_proj.w.dtype

    def encode_chars(self, chars, target_frames: int) -> Tensor:
        """embed_and_pad followed by the ConvNeXt stack; one sample."""
        x = embed_and_pad(self.char_embed, chars, target_frames, self.cfg.filler_id)
        return convnext_encode(self.conv_blocks, x)

    def _concat_path(self, modality: str) -> bool:
        if self.cfg.fusion == "SA":
            return True
        if self.cfg.fusion == "SACA":
            return modality == "speech"
        return False

    def expected_timbre_width(self, modality) -> int:
        """Concat variants take the raw grid for speech prompts; everything
        else moves through the d_timbre embedding space."""
        if modality == "speech" and self._concat_path("speech"):
            return self.cfg.n_bins
        return self.cfg.d_timbre

    def forward_batch(
        self,
        x_tau: np.ndarray,
        cond: Tensor,
        timbre,
        tau: np.ndarray,
        modality=None,
        frame_mask=None,
        timbre_mask=None,
        null_timbre=None,
    ) -> Tensor:
        """Predict velocity for a padded batch.

        x_tau: (B, L, n_bins) constant. cond: (B, L, d_model). timbre:
        (B, T, d_timbre) or None when the concat path consumes it entirely.
        Masks are boolean (B, L) / (B, T); None means fully valid.
        """
        B, L, nb = x_tau.shape
        cfg = self.cfg
        if cond.shape != (B, L, cfg.d_model):
            raise ValueError(f"cond shape {cond.shape} does not match frames {(B, L)}")
        dtype = self.dtype
        x_tau = np.asarray(x_tau, dtype=dtype)

        t_emb = self.step_embed(np.asarray(tau))
        h = self.in_proj(concat([Tensor(x_tau), cond], axis=-1))

        cross_timbre = timbre
        timbre_key_mask = timbre_mask
        seq_mask = frame_mask
        concat_len = 0
        if timbre is not None and self._concat_path(modality if modality else ""):
            proj_in = self.timbre_in_mel if modality == "speech" else self.timbre_in
            lat = proj_in(timbre)  # (B, T, d_model)
            concat_len = lat.shape[1]
            h = concat([lat, h], axis=1)
            tm = np.ones((B, concat_len), dtype=bool) if timbre_mask is None else timbre_mask
            fm = np.ones((B, L), dtype=bool) if frame_mask is None else frame_mask
            seq_mask = np.concatenate([tm, fm], axis=1)
            if cfg.fusion == "SACA":
                # cross-attention still runs, against the learned null frame
                cross_timbre = null_timbre
                timbre_key_mask = None
            else:
                cross_timbre = None
                timbre_key_mask = None

        S = concat_len + L
        rot = _rotary_tables(S, cfg.d_model // cfg.n_heads, dtype)
        self_mask_add = None
        if seq_mask is not None and not seq_mask.all():
            self_mask_add = np.where(seq_mask, 0.0, MASK_NEG).astype(dtype)[:, None, None, :]
        timbre_mask_add = None
        if timbre_key_mask is not None and not timbre_key_mask.all():
            timbre_mask_add = np.where(timbre_key_mask, 0.0, MASK_NEG).astype(dtype)[
                :, None, None, :
            ]

        half = cfg.n_layers // 2
        skips = []
        for i, block in enumerate(self.blocks):
            if i >= half:
                h = self.skip_proj[i - half](concat([h, skips.pop()], axis=-1))
            h = block(h, t_emb, cross_timbre, rot, self_mask_add, timbre_mask_add)
            if i < half:
                skips.append(h)

        if concat_len:
            h = h[:, concat_len:, :]
        fm = self.final_mod(silu(t_emb))  # (B, 2d)
        fm = reshape(fm, (B, 1, 2 * cfg.d_model))
        h = modulate(self.final_norm(h), fm[:, :, : cfg.d_model], fm[:, :, cfg.d_model :])
        return self.head(h)
