"""End-to-end synthesis: duration estimation, condition preparation, and
guided ODE sampling.

Both prompt modalities funnel into one sampler entry point; after the
timbre sequence is built the code path is identical, with modality carried
as data. At guidance 1.0 the null branch is skipped entirely, which is
exact under the guidance formula.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import BASE_FRAMES, encode_text, round_half_up
from .flow import GuidanceScale, cfg_combine, euler_sample
from .model import TtsModel
from .timbre import Caption

RATE_MIDPOINTS = {0: 0.65, 1: 1.0, 2: 1.6}  # slow, normal, fast

DEFAULT_NUM_STEPS = 32
DEFAULT_CFG_SCALE = 3.0


@dataclass(frozen=True)
class SpeechPrompt:
    mel: np.ndarray
    ref_text: str


@dataclass(frozen=True)
class SynthesisRequest:
    target_text: str
    speech: Optional[SpeechPrompt] = None
    caption: Optional[Caption] = None
    guidance: GuidanceScale = GuidanceScale(DEFAULT_CFG_SCALE)
    num_steps: int = DEFAULT_NUM_STEPS
    seed: int = 0

    def __post_init__(self):
        if not self.target_text:
            raise ValueError("target_text must be nonempty")
        if (self.speech is None) == (self.caption is None):
            raise ValueError("exactly one of speech prompt or caption required")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")


def duration_from_speech(ref_text: str, ref_frames: int, gen_text: str) -> int:
    """Frame budget scaled by the character-count ratio, at least one frame.
    Halves round up."""
    if not gen_text:
        raise ValueError("gen_text must be nonempty")
    if not ref_text or ref_frames < 1:
        raise ValueError("reference text must be nonempty with >= 1 frame")
    return max(1, round_half_up(ref_frames * len(gen_text) / len(ref_text)))


def duration_from_caption(caption: Caption, gen_text: str,
                          base_frames: int = BASE_FRAMES) -> int:
    """Rule-based duration: characters times the frames-per-character implied
    by the caption's rate level midpoint."""
    if not gen_text:
        raise ValueError("gen_text must be nonempty")
    fpc = round_half_up(base_frames / RATE_MIDPOINTS[caption.rate])
    return len(gen_text) * max(1, fpc)


@contextmanager
def inference_mode(model: TtsModel):
    """Temporarily disable gradient graphs for faster sampling."""
    saved = [(p, p.requires_grad) for p in model.parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, rg in saved:
            p.requires_grad = rg


def synthesize(model: TtsModel, req: SynthesisRequest) -> np.ndarray:
    """Generate a mel grid for the request; deterministic given the seed.

    Runs 2 * num_steps backbone forwards at guidance != 1, num_steps at
    guidance 1 (the null branch is elided)."""
    chars = encode_text(req.target_text)
    if req.speech is not None:
        duration = duration_from_speech(
            req.speech.ref_text, req.speech.mel.shape[0], req.target_text
        )
        timbre = model.speech_timbre(req.speech.mel)
        modality = "speech"
    else:
        duration = duration_from_caption(req.caption, req.target_text)
        timbre = model.timbre.encode_caption(req.caption).data
        modality = "text"

    w = req.guidance.w
    rng = np.random.Generator(np.random.Philox(key=req.seed))
    x1 = rng.standard_normal((duration, model.cfg.n_bins)).astype(model.dtype)

    with inference_mode(model):
        cond = model.backbone.encode_chars(chars, duration)

        def velocity(x, step):
            v_cond = model.forward_single(x, cond, timbre, step, modality=modality).data
            if w == 1.0:
                return v_cond
            v_uncond = model.forward_single(x, None, None, step, cfg_drop=True).data
            return cfg_combine(v_uncond, v_cond, w)

        mel = euler_sample(velocity, x1, req.num_steps)
    return mel.astype(np.float32)


def save_mel(path, mel: np.ndarray, seed: int, cfg_scale: float, num_steps: int) -> None:
    """Write the grid as 32-bit little-endian floats plus a text sidecar
    recording shape and sampling settings."""
    mel = np.ascontiguousarray(mel, dtype="<f4")
    with open(path, "wb") as f:
        f.write(mel.tobytes())
    with open(str(path) + ".txt", "w") as f:
        f.write(f"frames: {mel.shape[0]}\n")
        f.write(f"bins: {mel.shape[1]}\n")
        f.write(f"seed: {seed}\n")
        f.write(f"cfg_scale: {cfg_scale}\n")
        f.write(f"num_steps: {num_steps}\n")


def load_mel(path) -> np.ndarray:
    meta = {}
    with open(str(path) + ".txt") as f:
        for line in f:
            k, v = line.split(":", 1)
            meta[k.strip()] = v.strip()
    frames, bins = int(meta["frames"]), int(meta["bins"])
    data = np.fromfile(path, dtype="<f4", count=frames * bins)
    return data.reshape(frames, bins)
