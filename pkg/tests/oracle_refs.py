"""Scalar-loop reference implementations used as independent oracles.

Deliberately written with explicit python loops over indices so they share
no code path with the vectorized library implementations they check.
"""
import numpy as np


def ref_interpolate(x0, x1, tau):
    out = np.empty_like(np.asarray(x0, dtype=float))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = (1.0 - tau) * x0[i, j] + tau * x1[i, j]
    return out


def ref_target_velocity(x0, x1):
    out = np.empty_like(np.asarray(x0, dtype=float))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = x1[i, j] - x0[i, j]
    return out


def ref_fm_loss(v_pred, x0, x1, frame_mask):
    total = 0.0
    count = 0
    for i in range(x0.shape[0]):
        if not frame_mask[i]:
            continue
        for j in range(x0.shape[1]):
            d = v_pred[i, j] - (x1[i, j] - x0[i, j])
            total += d * d
            count += 1
    return total / count


def ref_cfg_combine(v_uncond, v_cond, w):
    out = np.empty_like(np.asarray(v_uncond, dtype=float))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = (1.0 - w) * v_uncond[i, j] + w * v_cond[i, j]
    return out
