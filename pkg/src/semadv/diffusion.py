"""Noise schedules, the deterministic DDIM step, spatially-masked guidance,
and the adaptive-depth residual rollout used to estimate the clean sample.

Step indexing convention: t ranges over the sampler's own grid 1..T and all
intervals are measured in grid units. alpha_bar[0] = 1 so a step landing at
t = 0 returns a clean sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError, StepRangeError
from . import numerics as nm

__all__ = [
    "NoiseSchedule", "GuidanceMask", "Conditioning", "make_schedule",
    "masked_epsilon", "ddim_step", "k_schedule", "residual_predict",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise ratios for the forward and reverse processes.

    betas has length T (betas[i] applies at step i+1); alpha_bars has length
    T+1 with alpha_bars[0] = 1 and alpha_bars[t] the cumulative product of
    (1 - beta) up to step t.
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray


@dataclass(frozen=True)
class GuidanceMask:
    """Per-position weights mixing unconditional and conditional predictions.

    The interior carries m_mid; the border band (the outer 1/16 of the height
    and width on each side) carries m_edge.
    """

    grid: np.ndarray
    m_mid: float
    m_edge: float

    @classmethod
    def bordered(cls, height, width, m_mid=3.0, m_edge=0.3):
        rows = np.arange(height)
        cols = np.arange(width)
        # exact rational test: interior is [h/16, 15h/16) x [w/16, 15w/16)
        row_in = (16 * rows >= height) & (16 * rows < 15 * height)
        col_in = (16 * cols >= width) & (16 * cols < 15 * width)
        interior = row_in[:, None] & col_in[None, :]
        grid = np.where(interior, float(m_mid), float(m_edge))
        return cls(grid=grid, m_mid=float(m_mid), m_edge=float(m_edge))

    @classmethod
    def uniform(cls, height, width, value=1.0):
        return cls(grid=np.full((height, width), float(value)),
                   m_mid=float(value), m_edge=float(value))

    def border_region(self):
        """Boolean grid of positions in the edge band."""
        h, w = self.grid.shape
        row_in = (16 * np.arange(h) >= h) & (16 * np.arange(h) < 15 * h)
        col_in = (16 * np.arange(w) >= w) & (16 * np.arange(w) < 15 * w)
        return ~(row_in[:, None] & col_in[None, :])


@dataclass(frozen=True)
class Conditioning:
    """Discrete conditioning token plus the instruction text it came from.

    The text is carried as metadata only; the denoiser sees the token index.
    """

    token: int
    prompt_text: str = ""


def make_schedule(T, beta_min, beta_max):
    """Linear beta schedule with cumulative-product alpha bars."""
    if T < 2:
        raise ConfigurationError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError(
            f"betas must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, T)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T=int(T), betas=betas, alpha_bars=alpha_bars)


def masked_epsilon(denoiser, x_t, t, cond, mask):
    """Spatial mix of unconditional and conditional noise predictions:
    (1 - M) * eps_unconditional + M * eps_conditional, elementwise in M.

    Works on plain arrays and on graph tensors; one call counts as a single
    denoiser evaluation on instrumented denoisers.
    """
    values = x_t.values if isinstance(x_t, nm.Tensor) else np.asarray(x_t)
    if tuple(values.shape[-2:]) != mask.grid.shape:
        raise ShapeError(
            f"latent spatial extent {values.shape[-2:]} does not match mask {mask.grid.shape}")
    eps_unc, eps_cond = denoiser.predict_pair(x_t, t, cond.token)
    m = mask.grid
    return eps_unc * (1.0 - m) + eps_cond * m


def ddim_step(x_t, t, dT, eps, schedule):
    """Deterministic reverse step from x_t to x_{t-dT} given the predicted noise."""
    t, dT = int(t), int(dT)
    if dT < 1 or t > schedule.T:
        raise StepRangeError(f"step t={t}, dT={dT} outside grid 1..{schedule.T}")
    if dT > t:
        raise StepRangeError(f"interval dT={dT} exceeds current step t={t}")
    ab_t = schedule.alpha_bars[t]
    ab_s = schedule.alpha_bars[t - dT]
    scale = math.sqrt(ab_s / ab_t)
    return (x_t - eps * math.sqrt(1.0 - ab_t)) * scale + eps * math.sqrt(1.0 - ab_s)


def k_schedule(t, T, K):
    """Interval list [dT_1, ..., dT_k] of the residual rollout from step t.

    Strides are floor(T/K); the first listed interval is the remainder
    t mod floor(T/K), or a full stride when the remainder is zero. The
    rollout applies the list back-to-front, so the remainder lands last,
    ending exactly at step 0.
    """
    t, T, K = int(t), int(T), int(K)
    if K < 1:
        raise ConfigurationError(f"residual depth K must be >= 1, got {K} (K=0 bypasses)")
    if t < 1 or t > T:
        raise StepRangeError(f"step t={t} out of range 1..{T}")
    stride = T // K
    k = -(-t // stride)  # ceil
    first = t % stride
    if first == 0:
        first = stride
    intervals = [first] + [stride] * (k - 1)
    assert sum(intervals) == t
    return intervals


def residual_predict(denoiser, x_t, t, cond, mask, K, schedule):
    """Coarse estimate of the clean sample by a K-bounded DDIM rollout.

    Returns x_t unchanged when K = 0 (degenerate mode). The rollout is built
    from registered operations, so gradients flow back to x_t.
    """
    if K == 0:
        return x_t
    x = x_t
    cur = int(t)
    for dT in reversed(k_schedule(t, schedule.T, K)):
        eps = masked_epsilon(denoiser, x, cur, cond, mask)
        x = ddim_step(x, cur, dT, eps, schedule)
        cur -= dT
    assert cur == 0
    return x
