"""Flow-matching math: the linear data-to-noise path, its target velocity,
the masked training loss, guided velocity combination, and the Euler sampler.

All functions here are pure. `fm_loss` accepts either a plain ndarray or an
autograd Tensor for the prediction, so training and standalone evaluation
share one implementation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor


@dataclass(frozen=True)
class FlowStep:
    """Scalar time on the data(0) <-> prior(1) path."""

    tau: float

    def __post_init__(self):
        if not (0.0 <= self.tau <= 1.0) or not np.isfinite(self.tau):
            raise ValueError(f"flow step must lie in [0, 1], got {self.tau}")


@dataclass(frozen=True)
class GuidanceScale:
    w: float

    def __post_init__(self):
        if not (self.w >= 0.0) or not np.isfinite(self.w):
            raise ValueError(f"guidance scale must be >= 0, got {self.w}")


def _as_step(tau) -> FlowStep:
    return tau if isinstance(tau, FlowStep) else FlowStep(float(tau))


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def interpolate(x0: np.ndarray, x1: np.ndarray, tau) -> np.ndarray:
    """Point on the linear path, (1 - tau) * x0 + tau * x1. Exact at endpoints."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    _check_same_shape(x0, x1, "interpolate")
    t = _as_step(tau).tau
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Velocity of the linear path; constant in tau."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    _check_same_shape(x0, x1, "target_velocity")
    return x1 - x0


@dataclass(frozen=True)
class FlowSample:
    """A training point: endpoints, the step, and the interpolant."""

    x0: np.ndarray
    x1: np.ndarray
    tau: FlowStep
    x_tau: np.ndarray

    @classmethod
    def make(cls, x0, x1, tau) -> "FlowSample":
        step = _as_step(tau)
        return cls(x0=np.asarray(x0), x1=np.asarray(x1), tau=step,
                   x_tau=interpolate(x0, x1, step))


def fm_loss(v_pred, x0: np.ndarray, x1: np.ndarray, frame_mask: np.ndarray):
    """Mean squared velocity error over unmasked frames.

    Masked (padding) frames contribute nothing to the value or gradient.
    Returns a float for ndarray input, a scalar Tensor for Tensor input.
    """
    x0, x1 = np.asarray(x0), np.asarray(x1)
    _check_same_shape(x0, x1, "fm_loss")
    pred_shape = v_pred.shape
    if tuple(pred_shape) != x0.shape:
        raise ValueError(f"fm_loss: prediction shape {pred_shape} vs target {x0.shape}")
    mask = np.asarray(frame_mask, dtype=bool)
    if mask.shape != (x0.shape[0],):
        raise ValueError(f"fm_loss: mask length {mask.shape} vs {x0.shape[0]} frames")
    n_live = int(mask.sum())
    if n_live == 0:
        raise ValueError("fm_loss: all frames masked, loss undefined")

    target = x1 - x0
    diff = v_pred - target
    sq = diff * diff
    masked = sq * mask.astype(x0.dtype)[:, None]
    total = masked.sum()
    out = total * (1.0 / (n_live * x0.shape[1]))
    if isinstance(out, Tensor):
        return out
    return float(out)


def cfg_combine(v_uncond: np.ndarray, v_cond: np.ndarray, w) -> np.ndarray:
    """Guided velocity (1 - w) * v_uncond + w * v_cond.

    Collapses exactly to v_cond at w=1 and to v_uncond at w=0.
    """
    v_uncond, v_cond = np.asarray(v_uncond), np.asarray(v_cond)
    _check_same_shape(v_uncond, v_cond, "cfg_combine")
    scale = w.w if isinstance(w, GuidanceScale) else GuidanceScale(float(w)).w
    if scale == 1.0:
        return v_cond.copy()
    if scale == 0.0:
        return v_uncond.copy()
    return (1.0 - scale) * v_uncond + scale * v_cond


VelocityFn = Callable[[np.ndarray, FlowStep], np.ndarray]


def euler_sample(velocity_fn: VelocityFn, x1: np.ndarray, num_steps: int) -> np.ndarray:
    """Integrate dx/dtau = v from tau=1 down to tau=0 with uniform explicit
    Euler steps; returns the state at tau=0."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    x = np.array(x1, copy=True)
    h = 1.0 / num_steps
    for k in range(num_steps):
        tau = FlowStep((num_steps - k) / num_steps)
        v = np.asarray(velocity_fn(x, tau))
        _check_same_shape(v, x, "euler_sample velocity")
        x = x - h * v
    return x
