"""Attack-success accounting and the pairwise semantic-difference metric.

Relative attack success counts a sample only when the adversarial output is
misclassified into the forbidden set while its exemplar is classified
correctly, normalized by exemplar accuracy. The semantic metric is
multi-scale SSIM with an 11-tap Gaussian window (sigma 1.5) and standard
level weights truncated and renormalized to the feasible level count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, LevelError, UndefinedMetricError

__all__ = ["SampleRecord", "asr_relative", "accuracy", "ms_ssim", "ssim",
           "l2_diff", "max_feasible_levels", "MS_SSIM_WEIGHTS"]

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class SampleRecord:
    """Per-sample verdicts for one task against one or more target models."""

    task_id: str
    a_text_indices: tuple
    adv_verdicts: dict      # model id -> predicted leaf index
    exemplar_verdicts: dict
    semantic_diffs: dict = field(default_factory=dict)  # metric name -> value
    trace_summary: str = ""

    def attack_success(self, model_id):
        return self.adv_verdicts[model_id] in set(self.a_text_indices)

    def exemplar_correct(self, model_id):
        return self.exemplar_verdicts[model_id] not in set(self.a_text_indices)


def asr_relative(records, target_model_id):
    """Joint success-and-correct count over the exemplar-correct count."""
    if not records:
        raise ContractError("need at least one record")
    correct = sum(r.exemplar_correct(target_model_id) for r in records)
    if correct == 0:
        raise UndefinedMetricError(
            f"exemplar accuracy is zero for model {target_model_id!r}")
    joint = sum(r.attack_success(target_model_id) and r.exemplar_correct(target_model_id)
                for r in records)
    return joint / (len(records) * (correct / len(records)))


def accuracy(records, which, target_model_id):
    """Fraction classified correctly (outside the forbidden set)."""
    if not records:
        raise ContractError("need at least one record")
    if which == "adv":
        hits = sum(not r.attack_success(target_model_id) for r in records)
    elif which == "exemplar":
        hits = sum(r.exemplar_correct(target_model_id) for r in records)
    else:
        raise ContractError(f"which must be 'adv' or 'exemplar', got {which!r}")
    return hits / len(records)


def l2_diff(a, b):
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)
                                - np.asarray(b, dtype=np.float64)))


# ---------------------------------------------------------------------------
# SSIM / MS-SSIM

def _gaussian_window(kernel, sigma):
    half = (kernel - 1) / 2.0
    x = np.arange(kernel) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _window_filter(img, win):
    """Separable valid-mode windowed mean over the two leading axes."""
    k = len(win)
    v = np.lib.stride_tricks.sliding_window_view(img, k, axis=0)
    v = np.tensordot(v, win, axes=([v.ndim - 1], [0]))
    v = np.lib.stride_tricks.sliding_window_view(v, k, axis=1)
    return np.tensordot(v, win, axes=([v.ndim - 1], [0]))


def _downsample2(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _ssim_cs(a, b, win, data_range):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _window_filter(a, win)
    mu_b = _window_filter(b, win)
    sa = _window_filter(a * a, win) - mu_a * mu_a
    sb = _window_filter(b * b, win) - mu_b * mu_b
    sab = _window_filter(a * b, win) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * sab + c2) / (sa + sb + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def max_feasible_levels(side, kernel=11):
    levels = 0
    while side >= kernel * 2 ** levels:
        levels += 1
    return levels


def ssim(a, b, kernel=11, sigma=1.5, data_range=2.0):
    """Single-scale structural similarity (the levels=1 case)."""
    return ms_ssim(a, b, kernel=kernel, sigma=sigma, levels=1, data_range=data_range)


def ms_ssim(a, b, kernel=11, sigma=1.5, levels=None, data_range=2.0):
    """Multi-scale SSIM; symmetric in (a, b), equal to 1 at identical inputs.

    Images are (H, W) or (H, W, C). `levels=None` picks the largest count the
    image side supports (side >= kernel * 2**(levels-1)); asking for more
    raises a LevelError naming the feasible maximum.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    side = min(a.shape[0], a.shape[1])
    feasible = max_feasible_levels(side, kernel)
    if feasible < 1:
        raise LevelError(f"side {side} smaller than kernel {kernel}", max_levels=0)
    if levels is None:
        levels = min(feasible, len(MS_SSIM_WEIGHTS))
    if levels < 1 or levels > feasible:
        raise LevelError(
            f"requested {levels} levels but side {side} supports at most {feasible}",
            max_levels=feasible)
    weights = np.array(MS_SSIM_WEIGHTS[:levels])
    weights = weights / weights.sum()
    win = _gaussian_window(kernel, sigma)
    floor = 1e-12  # keeps the value strictly positive under anticorrelation
    value = 1.0
    for level in range(levels):
        full, cs = _ssim_cs(a, b, win, data_range)
        if level == levels - 1:
            value *= max(full, floor) ** weights[level]
        else:
            value *= max(cs, floor) ** weights[level]
            a = _downsample2(a)
            b = _downsample2(b)
    return float(value)
