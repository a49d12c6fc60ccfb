"""Full synthesis model: timbre pathway plus backbone, with the null
substitution used for the unconditional guidance branch.

Parameter naming (used by stage freezing and checkpoints):
  timbre.speech_enc.*   frozen speech-branch stand-in
  timbre.text_enc.*     frozen caption-branch stand-in
  timbre.projector.*    trainable text-to-timbre projector
  timbre.nulls.*        learned null sequences
  backbone.*            character embeddings, conv encoder, transformer
"""
from __future__ import annotations

import numpy as np

from . import nn
from .autograd import Tensor, concat, stack
from .backbone import Backbone, BlockConfig
from .timbre import FROZEN_ENCODER_SEED, TimbreEncoder


class TtsModel(nn.Module):
    def __init__(self, cfg: BlockConfig, seed: int, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.timbre = TimbreEncoder(
            n_bins=cfg.n_bins,
            d_timbre=cfg.d_timbre,
            d_model=cfg.d_model,
            chunk_size=cfg.chunk_size,
            d_text=cfg.d_text,
        )
        self.backbone = Backbone(cfg)
        nn.initialize(self, seed, dtype=dtype)
        # the frozen encoders are seeded independently of the model seed so
        # every model instance embeds the identical stand-ins
        nn.initialize(self.timbre.speech_enc, FROZEN_ENCODER_SEED, dtype=dtype)
        nn.initialize(self.timbre.text_enc, FROZEN_ENCODER_SEED, dtype=dtype)
        self.forward_calls = 0

    @property
    def dtype(self):
        return self.backbone.dtype

    def tagged_timbre(self, timbre, modality):
        """Prepend the modality tag frame for the CA_TV variant."""
        if self.cfg.fusion != "CA_TV" or modality is None:
            return timbre
        tag = self.backbone.tag_speech if modality == "speech" else self.backbone.tag_text
        if not isinstance(timbre, Tensor):
            timbre = Tensor(np.asarray(timbre, dtype=self.dtype))
        return concat([tag, timbre], axis=0)

    def speech_timbre(self, prompt_mel: np.ndarray) -> np.ndarray:
        """The speech-branch conditioning for this variant: the raw prompt
        grid when the concat path consumes it, the frozen-encoder output
        otherwise."""
        if self.backbone._concat_path("speech"):
            return np.asarray(prompt_mel, dtype=self.dtype)
        return self.timbre.encode_speech(prompt_mel)

    def forward_single(self, x_tau, cond, timbre, tau, modality=None, cfg_drop=False):
        """One-sample velocity prediction; see forward_batch for the batched
        training path. `cond` may be None only when cfg_drop is set."""
        x_tau = np.asarray(x_tau, dtype=self.dtype)
        L = x_tau.shape[0]
        if cfg_drop:
            cond = self.timbre.nulls.null_cond(L)
            timbre = self.timbre.nulls.null_timbre()
            modality = None
        else:
            if cond is None:
                raise ValueError("cond required unless cfg_drop is set")
            if timbre is None:
                raise ValueError("timbre required unless cfg_drop is set")
            timbre = self.tagged_timbre(timbre, modality)
        if not isinstance(cond, Tensor):
            cond = Tensor(np.asarray(cond, dtype=self.dtype))
        if not isinstance(timbre, Tensor):
            timbre = Tensor(np.asarray(timbre, dtype=self.dtype))
        expected = self.backbone.expected_timbre_width(modality)
        if timbre.shape[-1] != expected:
            raise ValueError(
                f"timbre width {timbre.shape[-1]} does not match expected {expected}"
            )

        self.forward_calls += 1
        out = self.backbone.forward_batch(
            x_tau[None],
            stack([cond]),
            stack([timbre]),
            tau=np.asarray([float(tau.tau) if hasattr(tau, "tau") else float(tau)]),
            modality=modality,
            null_timbre=stack([self.timbre.nulls.null_timbre()]),
        )
        return out[0]

    def forward_batch(self, x_tau, cond, timbre, tau, modality=None,
                      frame_mask=None, timbre_mask=None):
        self.forward_calls += 1
        return self.backbone.forward_batch(
            x_tau,
            cond,
            timbre,
            tau,
            modality=modality,
            frame_mask=frame_mask,
            timbre_mask=timbre_mask,
            null_timbre=stack([self.timbre.nulls.null_timbre() for _ in range(x_tau.shape[0])]),
        )

    def param_dict(self):
        return dict(self.named_parameters())


def build_variant(cfg: BlockConfig, seed: int, dtype=np.float32) -> TtsModel:
    """Construct a model wired for the requested fusion variant."""
    return TtsModel(cfg, seed=seed, dtype=dtype)


def stage_trainable(stage: str):
    """Predicate over parameter names for each training stage."""
    if stage == "stage1":
        prefixes = ("backbone.", "timbre.nulls.")
    elif stage == "stage2":
        prefixes = ("timbre.projector.",)
    elif stage in ("stage3", "base"):
        prefixes = ("backbone.", "timbre.nulls.", "timbre.projector.")
    else:
        raise ValueError(f"unknown stage {stage!r}")

    def pred(name: str) -> bool:
        return name.startswith(prefixes)

    return pred
