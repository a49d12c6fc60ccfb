"""Objective evaluation: oracle attribute recovery, timbre similarity,
style accuracy with adjacent-level relaxation, and the ablation harness.

The attribute inverter exploits the generator's structure: per-bin medians
isolate the floor-plus-tilt background, bump positions land on a stride-3
grid so pitch is the offset mod 3, run lengths of constant-argmax frames
give frames-per-character, and a fixed-period sinusoid fit on bump
amplitudes recovers expressiveness.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as D
from .backbone import BlockConfig
from .flow import GuidanceScale, fm_loss, interpolate
from .inference import SpeechPrompt, SynthesisRequest, inference_mode, synthesize
from .model import TtsModel
from .timbre import ATTRIBUTE_NAMES, Caption, make_frozen_speech_encoder
from .trainer import TrainConfig, run_pipeline

LETTER_PEAK_THRESHOLD = 0.3


@dataclass(frozen=True)
class EstimatedParams:
    pitch_idx: int
    tilt: float
    rate: float
    expressiveness: float


def estimate_params(mel: np.ndarray) -> EstimatedParams:
    """Invert the toy generator: recover speaker attributes from a grid."""
    mel = np.asarray(mel, dtype=float)
    if mel.ndim != 2 or mel.shape[0] < 1:
        raise ValueError("mel must be a nonempty (frames, bins) grid")
    n_frames, n_bins = mel.shape

    background = np.median(mel, axis=0)
    z = (np.arange(n_bins) - (n_bins - 1) / 2.0) / ((n_bins - 1) / 2.0)
    slope = float(z @ background / (z @ z))
    tilt = float(np.clip(slope / D.TILT_GAIN, -1.0, 1.0))

    resid = mel - background[None, :]
    peaks = resid.max(axis=1)
    letter = peaks > LETTER_PEAK_THRESHOLD
    if not letter.any():
        return EstimatedParams(pitch_idx=0, tilt=tilt, rate=1.0, expressiveness=0.0)

    argmax_bins = resid.argmax(axis=1)
    offsets = (argmax_bins[letter] - 1) % D.BIN_STRIDE
    pitch = int(np.bincount(offsets, minlength=3).argmax())

    # run lengths of consecutive letter frames sharing one argmax bin
    runs = []
    run_len = 0
    prev_bin = None
    for f in range(n_frames):
        if letter[f] and argmax_bins[f] == prev_bin:
            run_len += 1
        else:
            if run_len:
                runs.append(run_len)
            run_len = 1 if letter[f] else 0
            prev_bin = argmax_bins[f] if letter[f] else None
    if run_len:
        runs.append(run_len)
    fpc = float(np.median(runs))
    rate = float(np.clip(D.BASE_FRAMES / fpc, 0.5, 2.0))

    frames_idx = np.flatnonzero(letter)
    amps = resid[frames_idx, argmax_bins[frames_idx]]
    mean_amp = amps.mean()
    if mean_amp <= 0:
        expressiveness = 0.0
    else:
        u = amps / mean_amp - 1.0
        phase = 2.0 * np.pi * frames_idx / D.MOD_PERIOD
        basis = np.stack([np.sin(phase), np.cos(phase)], axis=1)
        coef, *_ = np.linalg.lstsq(basis, u, rcond=None)
        expressiveness = float(np.clip(np.hypot(*coef) / D.MOD_DEPTH, 0.0, 1.0))

    return EstimatedParams(pitch_idx=pitch, tilt=tilt, rate=rate,
                           expressiveness=expressiveness)


def estimated_caption(est: EstimatedParams) -> Caption:
    return Caption(
        gender=D.quantize_tilt(est.tilt),
        pitch=est.pitch_idx,
        rate=D.quantize_rate(est.rate),
        expressiveness=D.quantize_expressiveness(est.expressiveness),
    )


_ENCODER_CACHE = {}


def _encoder(n_bins: int, d_timbre: int, chunk_size: int):
    key = (n_bins, d_timbre, chunk_size)
    if key not in _ENCODER_CACHE:
        _ENCODER_CACHE[key] = make_frozen_speech_encoder(n_bins, d_timbre, chunk_size)
    return _ENCODER_CACHE[key]


def timbre_similarity(a: np.ndarray, b: np.ndarray, d_timbre: int = 32,
                      chunk_size: int = 8) -> float:
    """Cosine similarity of mean-pooled frozen speech-encoder embeddings."""
    a, b = np.asarray(a), np.asarray(b)
    enc = _encoder(a.shape[1], d_timbre, chunk_size)
    ea = enc(a).mean(axis=0)
    eb = enc(b).mean(axis=0)
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm embedding: similarity undefined")
    return float(ea @ eb / (na * nb))


def style_accuracy(generated: np.ndarray, caption: Caption) -> dict:
    """Per-attribute correctness with adjacent-level relaxation: a predicted
    level counts when it equals the caption level or differs by one."""
    est = estimated_caption(estimate_params(generated))
    return {
        name: abs(getattr(est, name) - getattr(caption, name)) <= 1
        for name in ATTRIBUTE_NAMES
    }


def macro_style_accuracy(results: list) -> float:
    per_attr = {n: np.mean([r[n] for r in results]) for n in ATTRIBUTE_NAMES}
    return float(np.mean(list(per_attr.values())))


@dataclass
class EvalReport:
    timbre_sim: float
    style_acc: dict  # per attribute, plus the macro average under "macro"
    recon_mse: float
    n_samples: int
    pitch_exact: float = 0.0  # fraction with exact pitch recovery


@dataclass(frozen=True)
class EvalRequest:
    speaker: D.SpeakerParams
    ref_text: str
    gen_text: str
    prompt_mel: np.ndarray
    seed: int


def build_eval_suite(n_requests: int, seed: int) -> list:
    """Deterministic request suite with fresh speakers and texts."""
    root = np.random.SeedSequence((seed, 0xE7A1))
    rng = np.random.Generator(np.random.Philox(root))
    suite = []
    for i in range(n_requests):
        speaker = D.sample_speaker(rng)
        ref_text = D.sample_text(rng)
        gen_text = D.sample_text(rng)
        u = D.gen_utterance(speaker, ref_text, seed=int(rng.integers(2**31)))
        suite.append(
            EvalRequest(speaker=speaker, ref_text=ref_text, gen_text=gen_text,
                        prompt_mel=u.mel, seed=int(rng.integers(2**31)))
        )
    return suite


def recon_mse(model: TtsModel, pairs, modality: str, seed: int, limit: int = 32) -> float:
    """Teacher-forced one-step velocity error at mid-path on held-out pairs;
    a modality-neutral quality proxy specific to this artifact."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    losses = []
    with inference_mode(model):
        for pair in pairs[:limit]:
            x0 = pair.target_mel.astype(model.dtype)
            x1 = rng.standard_normal(x0.shape).astype(model.dtype)
            x_tau = interpolate(x0, x1, 0.5)
            cond = model.backbone.encode_chars(pair.target_chars, x0.shape[0])
            if modality == "speech":
                timbre = model.speech_timbre(pair.prompt_mel)
            else:
                timbre = model.timbre.encode_caption(pair.caption).data
            v = model.forward_single(x_tau, cond, timbre, 0.5, modality=modality).data
            losses.append(fm_loss(v, x0, x1, np.ones(x0.shape[0], dtype=bool)))
    return float(np.mean(losses))


def evaluate_speech(model: TtsModel, suite, heldout_pairs, num_steps: int = 32,
                    cfg_scale: float = 3.0, seed: int = 0) -> EvalReport:
    sims, styles, pitch_hits = [], [], []
    for req in suite:
        mel = synthesize(model, SynthesisRequest(
            target_text=req.gen_text,
            speech=SpeechPrompt(mel=req.prompt_mel, ref_text=req.ref_text),
            guidance=GuidanceScale(cfg_scale), num_steps=num_steps, seed=req.seed,
        ))
        sims.append(timbre_similarity(req.prompt_mel, mel, model.cfg.d_timbre,
                                      model.cfg.chunk_size))
        styles.append(style_accuracy(mel, D.caption_from_params(req.speaker)))
        pitch_hits.append(estimate_params(mel).pitch_idx == req.speaker.pitch_idx)
    acc = {n: float(np.mean([s[n] for s in styles])) for n in ATTRIBUTE_NAMES}
    acc["macro"] = macro_style_accuracy(styles)
    return EvalReport(
        timbre_sim=float(np.mean(sims)), style_acc=acc,
        recon_mse=recon_mse(model, heldout_pairs, "speech", seed),
        n_samples=len(suite), pitch_exact=float(np.mean(pitch_hits)),
    )


def evaluate_text(model: TtsModel, suite, heldout_pairs, num_steps: int = 32,
                  cfg_scale: float = 3.0, seed: int = 0) -> EvalReport:
    styles, sims, pitch_hits = [], [], []
    for req in suite:
        caption = D.caption_from_params(req.speaker)
        mel = synthesize(model, SynthesisRequest(
            target_text=req.gen_text, caption=caption,
            guidance=GuidanceScale(cfg_scale), num_steps=num_steps, seed=req.seed,
        ))
        styles.append(style_accuracy(mel, caption))
        sims.append(timbre_similarity(req.prompt_mel, mel, model.cfg.d_timbre,
                                      model.cfg.chunk_size))
        pitch_hits.append(estimate_params(mel).pitch_idx == req.speaker.pitch_idx)
    acc = {n: float(np.mean([s[n] for s in styles])) for n in ATTRIBUTE_NAMES}
    acc["macro"] = macro_style_accuracy(styles)
    return EvalReport(
        timbre_sim=float(np.mean(sims)), style_acc=acc,
        recon_mse=recon_mse(model, heldout_pairs, "text", seed),
        n_samples=len(suite), pitch_exact=float(np.mean(pitch_hits)),
    )


@dataclass
class AblationVariant:
    name: str
    cfg: BlockConfig
    strategy: str  # "multistage" | "base"


@dataclass
class AblationRow:
    name: str
    strategy: str
    speech: EvalReport = None
    text: EvalReport = None
    steps_run: int = 0
    error: str = ""


def run_ablation(variants, corpus, train_cfg: TrainConfig, seed: int,
                 n_requests: int = 30, num_steps: int = 32,
                 cfg_scale: float = 3.0) -> list:
    """Train every variant with an identical step budget, seed, and data
    order, then evaluate all of them on identical request suites."""
    if len(variants) < 2:
        raise ValueError("ablation needs at least two variants")
    suite = build_eval_suite(n_requests, seed)
    held = D.build_corpus(4, 8, seed=seed + 101)
    rows = []
    for var in variants:
        row = AblationRow(name=var.name, strategy=var.strategy)
        try:
            if var.strategy not in ("multistage", "base"):
                raise ValueError(f"unknown training strategy {var.strategy!r}")
            model = TtsModel(var.cfg, seed=seed)
            mode = "all" if var.strategy == "multistage" else "base"
            records = run_pipeline(model, corpus, train_cfg, seed, mode=mode)
            row.steps_run = sum(train_cfg.scaled_steps())
            row.speech = evaluate_speech(model, suite, held.speech_pairs,
                                         num_steps, cfg_scale, seed)
            row.text = evaluate_text(model, suite, held.text_pairs,
                                     num_steps, cfg_scale, seed)
        except Exception as exc:  # partial table with a failure marker
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


TABLE_COLUMNS = (
    "variant", "strategy", "speech_timbre_sim", "speech_style_macro",
    "speech_recon_mse", "text_timbre_sim", "text_style_macro", "text_recon_mse",
)


def ablation_table_tsv(rows) -> str:
    lines = ["\t".join(TABLE_COLUMNS)]
    for r in rows:
        if r.error:
            lines.append("\t".join([r.name, r.strategy] + ["FAILED:" + r.error] * 6))
            continue
        lines.append("\t".join([
            r.name, r.strategy,
            f"{r.speech.timbre_sim:.4f}", f"{r.speech.style_acc['macro']:.4f}",
            f"{r.speech.recon_mse:.4f}", f"{r.text.timbre_sim:.4f}",
            f"{r.text.style_acc['macro']:.4f}", f"{r.text.recon_mse:.4f}",
        ]))
    return "\n".join(lines) + "\n"


def ablation_table_pretty(rows) -> str:
    tsv = ablation_table_tsv(rows).strip().split("\n")
    cells = [line.split("\t") for line in tsv]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
    out = []
    for row in cells:
        out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(out) + "\n"
