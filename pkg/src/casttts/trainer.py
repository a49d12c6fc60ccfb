"""Three-stage training: speech-synthesis pretraining, projector-only text
alignment, then joint fine-tuning. A single-stage "base" mode trains
end-to-end on the combined data for the same total budget.

Freezing is by parameter name: each stage builds an optimizer over exactly
its trainable set, so frozen parameters have no optimizer state and are
untouched byte-for-byte.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat, stack
from .data import Corpus, round_half_up
from .flow import interpolate
from .model import TtsModel, stage_trainable

STAGE_MIX = {"stage1": "speech_only", "stage2": "text_only", "stage3": "combined", "base": "combined"}
_STAGE_SALT = {"stage1": 1, "stage2": 2, "stage3": 3, "base": 4}


@dataclass
class StageConfig:
    stage_id: str
    steps: int
    peak_lr: float
    dataset_mix: str = ""
    batch_size: int = 16
    p_drop: float = 0.1
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    log_interval: int = 50

    def __post_init__(self):
        if self.stage_id not in STAGE_MIX:
            raise ValueError(f"unknown stage {self.stage_id!r}")
        if not self.dataset_mix:
            self.dataset_mix = STAGE_MIX[self.stage_id]
        if self.dataset_mix != STAGE_MIX[self.stage_id]:
            raise ValueError(
                f"{self.stage_id} must train on {STAGE_MIX[self.stage_id]}, got {self.dataset_mix}"
            )
        if self.steps < 1 or self.peak_lr <= 0:
            raise ValueError("steps must be >= 1 and peak_lr > 0")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError(f"p_drop must lie in [0, 1), got {self.p_drop}")

    @property
    def trainable_set(self):
        return stage_trainable(self.stage_id)


def lr_at(step: int, stage: StageConfig) -> float:
    """Linear warmup to the peak over the first warmup fraction, then linear
    decay to zero at stage.steps."""
    if not 0 <= step <= stage.steps:
        raise ValueError(f"step {step} outside [0, {stage.steps}]")
    warmup = max(1, round_half_up(stage.warmup_frac * stage.steps))
    if stage.steps >= 2:
        warmup = min(warmup, stage.steps - 1)
        if step <= warmup:
            return stage.peak_lr * step / warmup
        return stage.peak_lr * (stage.steps - step) / (stage.steps - warmup)
    return stage.peak_lr * step


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay. State exists
    only for the parameters handed in."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        apply_update(self.params, {n: p.grad for n, p in self.params.items()},
                     self, lr, self.weight_decay)


def apply_update(params: dict, grads: dict, opt: AdamW, lr: float,
                 weight_decay: float = 0.01) -> None:
    """One adaptive-moment update with decoupled decay, in place. Parameters
    without a gradient are treated as zero-gradient (decay still applies)."""
    opt.t += 1
    b1, b2 = opt.b1, opt.b2
    bc1 = 1.0 - b1**opt.t
    bc2 = 1.0 - b2**opt.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise RuntimeError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        m = opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        v = opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps) + weight_decay * p.data
        p.data = p.data - lr * update


def drop_conditions(batch, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """Per-sample joint condition-drop flags: a flagged sample has both its
    conditioning streams replaced by the learned nulls."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop must lie in [0, 1), got {p_drop}")
    return rng.random(len(batch)) < p_drop


@dataclass
class _Sample:
    modality: str  # "speech" | "text"
    target_mel: np.ndarray
    chars: np.ndarray
    timbre_const: np.ndarray = None  # speech branch output (frozen)
    text_raw: np.ndarray = None  # caption-encoder output, pre-projection
    cond_const: np.ndarray = None  # cached conditioning when the encoder is frozen


def _build_pool(model: TtsModel, corpus: Corpus, mix: str):
    """Training pool sorted by target length so batches of neighbors carry
    little padding."""
    pool = []
    if mix in ("speech_only", "combined"):
        for p in corpus.speech_pairs:
            pool.append(_Sample("speech", p.target_mel, p.target_chars,
                                timbre_const=model.speech_timbre(p.prompt_mel)))
    if mix in ("text_only", "combined"):
        for p in corpus.text_pairs:
            pool.append(_Sample("text", p.target_mel, p.target_chars,
                                text_raw=model.timbre.text_enc(p.caption)))
    pool.sort(key=lambda s: (s.target_mel.shape[0], s.modality))
    return pool


def _group_loss(model: TtsModel, items, dtype):
    """Forward one wiring group (same effective modality) and return the
    summed per-sample masked MSE."""
    modality = items[0][1]
    B = len(items)
    Lmax = max(it[2].shape[0] for it in items)
    nb = model.cfg.n_bins
    x_tau = np.zeros((B, Lmax, nb), dtype=dtype)
    target = np.zeros((B, Lmax, nb), dtype=dtype)
    frame_mask = np.zeros((B, Lmax), dtype=bool)
    taus = np.zeros(B)
    conds, timbres = [], []
    for bi, (_, _, xt, tgt, tau, cond, timb) in enumerate(items):
        L = xt.shape[0]
        x_tau[bi, :L] = xt
        target[bi, :L] = tgt
        frame_mask[bi, :L] = True
        taus[bi] = tau
        conds.append(_pad_rows(cond, Lmax, dtype))
        timbres.append(timb)

    Tmax = max(t.shape[0] for t in timbres)
    timbre_mask = np.zeros((B, Tmax), dtype=bool)
    padded_t = []
    for bi, t in enumerate(timbres):
        timbre_mask[bi, : t.shape[0]] = True
        padded_t.append(_pad_rows(t, Tmax, dtype))

    v = model.forward_batch(
        x_tau, stack(conds), stack(padded_t), taus,
        modality=modality, frame_mask=frame_mask, timbre_mask=timbre_mask,
    )
    diff = v - target
    sq = diff * diff
    masked = sq * frame_mask.astype(dtype)[:, :, None]
    per_sample = masked.sum(axis=(1, 2))  # (B,)
    inv = (1.0 / (frame_mask.sum(axis=1) * nb)).astype(dtype)
    return (per_sample * inv).sum()


def _pad_rows(t: Tensor, n_rows: int, dtype) -> Tensor:
    missing = n_rows - t.shape[0]
    if missing == 0:
        return t
    return concat([t, Tensor(np.zeros((missing, t.shape[1]), dtype=dtype))], axis=0)


def train_step(model: TtsModel, batch, drop_flags, rng: np.random.Generator) -> float:
    """One optimizer-ready forward/backward over a mixed batch. Returns the
    batch loss; gradients are left on the trainable parameters."""
    dtype = model.dtype
    prepared = []
    for sample, dropped in zip(batch, drop_flags):
        x0 = sample.target_mel.astype(dtype)
        L = x0.shape[0]
        x1 = rng.standard_normal(x0.shape).astype(dtype)
        tau = float(rng.uniform())
        x_tau = interpolate(x0, x1, tau).astype(dtype)
        tgt = (x1 - x0).astype(dtype)
        if dropped:
            cond = model.timbre.nulls.null_cond(L)
            timb = model.timbre.nulls.null_timbre()
            eff = None
        else:
            if sample.cond_const is not None:
                cond = Tensor(sample.cond_const)
            else:
                cond = model.backbone.encode_chars(sample.chars, L)
            if sample.modality == "speech":
                timb = Tensor(sample.timbre_const.astype(dtype))
            else:
                timb = model.timbre.projector(Tensor(sample.text_raw.astype(dtype)))
            timb = model.tagged_timbre(timb, sample.modality)
            eff = sample.modality
        prepared.append((None, eff, x_tau, tgt, tau, cond, timb))

    total = None
    for key in ("speech", "text", None):
        items = [p for p in prepared if p[1] == key]
        if not items:
            continue
        part = _group_loss(model, items, dtype)
        total = part if total is None else total + part
    loss = total * (1.0 / len(batch))
    model.zero_grad()
    loss.backward()
    return float(loss)


def run_stage(model: TtsModel, stage: StageConfig, corpus: Corpus, seed: int):
    """Execute one stage; returns the metrics records. The model is updated
    in place; parameters outside the stage's trainable set are untouched."""
    pool = _build_pool(model, corpus, stage.dataset_mix)
    if not pool:
        raise ValueError(f"no data available for mix {stage.dataset_mix!r}")
    pred = stage.trainable_set
    trainable = {n: p for n, p in model.named_parameters() if pred(n) and not p.frozen}
    for n, p in model.named_parameters():
        p.requires_grad = n in trainable
    if not any(n.startswith("backbone.") for n in trainable):
        # character encoder frozen this stage: conditioning is a constant
        for s in pool:
            s.cond_const = model.backbone.encode_chars(
                s.chars, s.target_mel.shape[0]
            ).data
    opt = AdamW(trainable, weight_decay=stage.weight_decay)
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((seed, _STAGE_SALT[stage.stage_id])))
    )
    records = []
    B = min(stage.batch_size, len(pool))
    for step in range(stage.steps):
        # contiguous window of the length-sorted pool: low padding waste
        start = int(rng.integers(0, len(pool) - B + 1))
        batch = pool[start : start + B]
        flags = drop_conditions(batch, stage.p_drop, rng)
        loss = train_step(model, batch, flags, rng)
        lr = lr_at(step + 1, stage)
        opt.step(lr)
        if (step + 1) % stage.log_interval == 0 or step == stage.steps - 1 or step == 0:
            records.append(
                {"step": step + 1, "stage": stage.stage_id, "loss": loss, "lr": lr}
            )
    for _, p in model.named_parameters():
        p.requires_grad = not p.frozen
    return records


@dataclass
class TrainConfig:
    stage_steps: tuple = (2000, 1000, 500)
    stage_lrs: tuple = (7.5e-5, 1.5e-5, 2.5e-5)
    scale_factor: float = 1.0
    batch_size: int = 16
    p_drop: float = 0.1
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    log_interval: int = 50

    def scaled_steps(self):
        return tuple(max(1, round_half_up(s * self.scale_factor)) for s in self.stage_steps)

    def stage_configs(self):
        steps = self.scaled_steps()
        ids = ("stage1", "stage2", "stage3")
        return [
            StageConfig(
                stage_id=ids[i], steps=steps[i], peak_lr=self.stage_lrs[i],
                batch_size=self.batch_size, p_drop=self.p_drop,
                weight_decay=self.weight_decay, warmup_frac=self.warmup_frac,
                log_interval=self.log_interval,
            )
            for i in range(3)
        ]

    def base_config(self):
        return StageConfig(
            stage_id="base", steps=sum(self.scaled_steps()), peak_lr=self.stage_lrs[0],
            batch_size=self.batch_size, p_drop=self.p_drop,
            weight_decay=self.weight_decay, warmup_frac=self.warmup_frac,
            log_interval=self.log_interval,
        )


def run_pipeline(model: TtsModel, corpus: Corpus, train_cfg: TrainConfig, seed: int,
                 mode: str = "all", on_stage_done=None):
    """Run the staged schedule (mode="all"), one stage, or end-to-end base
    training. Returns the per-stage metrics records."""
    all_records = []
    if mode == "base":
        stages = [train_cfg.base_config()]
    elif mode == "all":
        stages = train_cfg.stage_configs()
    elif mode in ("stage1", "stage2", "stage3"):
        idx = int(mode[-1]) - 1
        stages = [train_cfg.stage_configs()[idx]]
    else:
        raise ValueError(f"unknown pipeline mode {mode!r}")
    for stage in stages:
        records = run_stage(model, stage, corpus, seed)
        all_records.extend(records)
        if on_stage_done is not None:
            on_stage_done(stage, model, records)
    return all_records


def write_metrics_log(path, records) -> None:
    """Append-only line-delimited records (step, stage, loss, lr)."""
    with open(path, "a") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
