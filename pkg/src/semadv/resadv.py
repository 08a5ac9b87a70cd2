"""Residual-guided adversarial DDIM sampling.

The sampler co-generates an adversarial trajectory and a pure-DDIM exemplar
trajectory from the same state, forked at the attack start step. Per-step
gradient-ascent iterations maximize the attack loss evaluated on a cheap
rollout estimate of the clean sample; an early-stop predicate bounds the
iteration count; an L2 projection around the exemplar trajectory enforces
the semantic budget; the optimized border region is written back into the
exemplar after generation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .diffusion import Conditioning, ddim_step, masked_epsilon, residual_predict
from .errors import ContractError, NumericalFailureError, SetupError

__all__ = [
    "AttackConfig", "AttackTrace", "StepRecord", "AttackResult",
    "attack_loss", "should_optimize", "semantic_clip", "run_resadv_ddim",
    "predicted_min_steps", "mi_fgsm", "reject_sampling_attack",
    "RejectSamplingOutcome", "CountingDenoiser",
]


@dataclass(frozen=True)
class AttackConfig:
    """Every sampler hyperparameter. t_s and t_k are fractions of T,
    converted to grid steps by rounding down."""

    epsilon: float = 2.5
    K: int = 4
    t_s: float = 0.75
    t_k: float = 0.4
    xi1: float = 0.1
    xi2: float = 0.01
    m: int = 3
    M_iter: int = 10
    beta_mom: float = 0.5
    s: float = 0.7
    T: int = 100

    def __post_init__(self):
        if not (0.0 < self.xi2 < self.xi1 < 1.0):
            raise ContractError(f"need 0 < xi2 < xi1 < 1, got xi1={self.xi1}, xi2={self.xi2}")
        if self.m > self.M_iter:
            raise ContractError(f"need m <= M_iter, got m={self.m}, M_iter={self.M_iter}")
        if self.epsilon <= 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if not (0 < self.t_k_step <= self.t_s_step <= self.T):
            raise ContractError(
                f"need 0 < t_k <= t_s <= T, got steps {self.t_k_step}, {self.t_s_step}, T={self.T}")
        if self.K < 0:
            raise ContractError(f"K must be >= 0, got {self.K}")

    @property
    def t_s_step(self):
        return int(self.t_s * self.T)

    @property
    def t_k_step(self):
        return int(self.t_k * self.T)

    def max_iterations(self, t):
        """Per-step iteration cap: boosted at the start step and final steps."""
        return self.M_iter if (t == self.t_s_step or t < 4) else self.m


@dataclass
class StepRecord:
    """Per-diffusion-step instrumentation."""

    t: int
    iterations: int
    confidences: list = field(default_factory=list)
    denoiser_evals: int = 0
    clipped: bool = False
    distance: float = 0.0
    target_label: int = -1


@dataclass
class AttackTrace:
    steps: list = field(default_factory=list)
    denoiser_evals: int = 0

    def total_iterations(self):
        return sum(s.iterations for s in self.steps)

    def lines(self):
        out = []
        for s in self.steps:
            confs = ",".join(f"{c:.6f}" for c in s.confidences)
            out.append(
                f"step={s.t} iters={s.iterations} target={s.target_label} "
                f"clipped={int(s.clipped)} dist={s.distance:.9f} "
                f"evals={s.denoiser_evals} confs={confs}")
        out.append(f"total_denoiser_evals={self.denoiser_evals}")
        return out


@dataclass
class AttackResult:
    x_adv: np.ndarray
    x_exemplar: np.ndarray
    trace: AttackTrace
    adv_verdict: int
    exemplar_verdict: int


class CountingDenoiser:
    """Per-run proxy counting guided-epsilon evaluations of the wrapped net."""

    def __init__(self, net):
        self.net = net
        self.calls = 0

    def predict_pair(self, x_t, t, cond_token):
        self.calls += 1
        return self.net.predict_pair(x_t, t, cond_token)


def attack_loss(logits, a_text, l_tar):
    """Confidence gap pushing the selected forbidden label above the rest
    of the forbidden set: log-softmax at the target minus the forbidden-set
    mean. Maximized by gradient ascent.
    """
    values = logits.values if isinstance(logits, nm.Tensor) else np.asarray(logits)
    n_labels = values.shape[-1]
    a_idx = sorted(int(a) for a in a_text)
    if not a_idx or len(a_idx) >= n_labels:
        raise ContractError(
            f"forbidden set must be a nonempty strict subset of {n_labels} labels")
    if int(l_tar) not in a_idx:
        raise ContractError(f"target label {l_tar} not in forbidden set {a_idx}")
    if not isinstance(logits, nm.Tensor):
        logits = nm.constant(logits)
    flat = nm.reshape(logits, (n_labels,))
    ls = nm.log_softmax(flat, axis=-1)
    target_term = ls[int(l_tar)]
    forbidden_mean = nm.tmean(nm.take(ls, a_idx, axis=0))
    return target_term - forbidden_mean


def should_optimize(i, t, correct_conf, cfg):
    """Early-stop predicate: continue iff (i <= n and conf > xi1) or the
    first-iteration exception (i = 1 and conf > xi2); n is the per-step cap."""
    if i < 1:
        raise ContractError(f"iteration index starts at 1, got {i}")
    n = cfg.max_iterations(t)
    return (i <= n and correct_conf > cfg.xi1) or (i == 1 and correct_conf > cfg.xi2)


def semantic_clip(x_adv_next, x_ex_next, epsilon):
    """Project onto the L2 ball of radius epsilon around the exemplar state."""
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    if x_adv_next.shape != x_ex_next.shape:
        raise ContractError(
            f"shape mismatch {x_adv_next.shape} vs {x_ex_next.shape}")
    delta = x_adv_next - x_ex_next
    dist = float(np.linalg.norm(delta))
    if dist <= epsilon:
        return x_adv_next
    return x_ex_next + delta * (epsilon / dist)


def correct_confidence(probs, a_text):
    """Highest probability over labels outside the forbidden set: the
    estimated probability the attack has not yet succeeded."""
    keep = [i for i in range(len(probs)) if i not in a_text]
    return float(np.max(probs[keep]))


def select_target(logits_values, a_text):
    """Highest-confidence forbidden label; ties broken by lowest index."""
    a_idx = sorted(int(a) for a in a_text)
    sub = logits_values[a_idx]
    return a_idx[int(np.argmax(sub))]


def _check_finite(arr, t):
    if not np.all(np.isfinite(arr)):
        raise NumericalFailureError(f"non-finite latent at step {t}", step=t)


def run_resadv_ddim(denoiser, surrogate, task, cfg, mask, seed):
    """Full attack run; returns adversarial and exemplar samples plus a trace.

    The exemplar forks from the shared trajectory state at the attack start
    step, before any optimization touches it, and evolves by pure DDIM; every
    later adversarial step is projected into the epsilon ball around it.
    """
    schedule = denoiser.schedule
    if schedule is None or schedule.T != cfg.T:
        raise SetupError(
            f"denoiser schedule T={getattr(schedule, 'T', None)} does not match config T={cfg.T}")
    res = denoiser.resolution
    if mask.grid.shape != (res, res):
        raise SetupError(f"mask {mask.grid.shape} does not match denoiser resolution {res}")
    if surrogate.n_labels <= max(task.a_text_indices):
        raise SetupError("surrogate label space does not cover the forbidden set")
    cond = Conditioning(token=task.leaf_index, prompt_text=task.prompt)
    a_text = sorted(task.a_text_indices)

    counting = CountingDenoiser(denoiser)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, denoiser.channels, res, res))
    v = np.zeros_like(x)
    x_ex = None
    l_tar = None
    t_s, t_k = cfg.t_s_step, cfg.t_k_step
    trace = AttackTrace()

    for t in range(cfg.T, 0, -1):
        rec = StepRecord(t=t, iterations=0)
        if t == t_s:
            x_ex = x.copy()
        if t <= t_s:
            for i in range(1, cfg.max_iterations(t) + 1):
                x_leaf = nm.leaf(x)
                x0_hat = residual_predict(counting, x_leaf, t, cond, mask, cfg.K, schedule)
                logits = surrogate.forward(x0_hat)
                logits_values = logits.values.reshape(-1)
                probs = np.exp(logits_values - logits_values.max())
                probs = probs / probs.sum()
                conf = correct_confidence(probs, a_text)
                rec.confidences.append(conf)
                if not should_optimize(i, t, conf, cfg):
                    break
                if t == t_s or t < t_k or l_tar is None:
                    l_tar = select_target(logits_values, a_text)
                loss = attack_loss(logits, a_text, l_tar)
                (g,) = nm.backward(loss, [x_leaf])
                v = cfg.beta_mom * v + (1.0 - cfg.beta_mom) * g
                x = x + cfg.s * v
                _check_finite(x, t)
                rec.iterations += 1
            rec.target_label = -1 if l_tar is None else int(l_tar)
        eps = masked_epsilon(counting, x, t, cond, mask)
        x = ddim_step(x, t, 1, eps.values, schedule)
        if x_ex is not None:
            eps_ex = masked_epsilon(counting, x_ex, t, cond, mask)
            x_ex = ddim_step(x_ex, t, 1, eps_ex.values, schedule)
            raw_dist = float(np.linalg.norm(x - x_ex))
            x = semantic_clip(x, x_ex, cfg.epsilon)
            rec.clipped = raw_dist > cfg.epsilon
            rec.distance = float(np.linalg.norm(x - x_ex))
        _check_finite(x, t - 1)
        rec.denoiser_evals = counting.calls
        trace.steps.append(rec)

    # border write-back: average the optimized background into the exemplar
    border = mask.border_region()
    if border.any():
        x_ex = x_ex.copy()
        x_ex[..., border] = 0.5 * (x[..., border] + x_ex[..., border])

    trace.denoiser_evals = counting.calls
    adv_verdict = int(np.argmax(surrogate.logits_np(x)))
    ex_verdict = int(np.argmax(surrogate.logits_np(x_ex)))
    return AttackResult(x_adv=x[0], x_exemplar=x_ex[0], trace=trace,
                        adv_verdict=adv_verdict, exemplar_verdict=ex_verdict)


def predicted_min_steps(T, K, t_s):
    """Exact denoiser-evaluation floor when every step early-stops at the
    first iteration: (K*t_s/T + 3)*t_s/2 + T, requiring K | T and (T/K) | t_s."""
    T, K, t_s = int(T), int(K), int(t_s)
    if K < 1 or T % K != 0:
        raise ContractError(f"bound requires K | T, got T={T}, K={K}")
    d = T // K
    if t_s % d != 0:
        raise ContractError(f"bound requires (T/K) | t_s, got t_s={t_s}, T/K={d}")
    m = t_s // d
    return d * m * (m + 1) // 2 + t_s + T


def mi_fgsm(classifier, x0, a_text, steps, eps_inf, mu=1.0):
    """Momentum iterative sign-gradient baseline under an L-infinity budget."""
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if eps_inf <= 0:
        raise ContractError(f"budget must be positive, got {eps_inf}")
    x0 = np.asarray(x0, dtype=np.float64)
    squeeze = x0.ndim == 3
    base = x0[None] if squeeze else x0
    a_idx = sorted(int(a) for a in a_text)
    alpha = eps_inf / steps
    x = base.copy()
    v = np.zeros_like(x)
    for _ in range(steps):
        x_leaf = nm.leaf(x)
        logits = classifier.forward(x_leaf)
        l_tar = select_target(logits.values.reshape(-1), a_idx)
        loss = attack_loss(logits, a_idx, l_tar)
        (g,) = nm.backward(loss, [x_leaf])
        v = mu * v + g / max(np.abs(g).sum(), 1e-12)
        x = x + alpha * np.sign(v)
        x = np.clip(x, base - eps_inf, base + eps_inf)
        x = np.clip(x, -1.0, 1.0)
    return x[0] if squeeze else x


@dataclass
class RejectSamplingOutcome:
    result: AttackResult | None
    attempts: int
    gave_up: bool


def reject_sampling_attack(attack_fn, surrogate, task, p_s, eps_fail):
    """Rerun attack_fn until the surrogate classifies the exemplar correctly,
    capped at ceil(log(eps_fail) / log(1 - p_s)) attempts."""
    if not (0.0 < p_s < 1.0):
        raise ContractError(f"p_s must be in (0,1), got {p_s}")
    if not (0.0 < eps_fail < 1.0):
        raise ContractError(f"eps_fail must be in (0,1), got {eps_fail}")
    cap = math.ceil(math.log(eps_fail) / math.log(1.0 - p_s))
    a_text = set(task.a_text_indices)
    result = None
    for attempt in range(1, cap + 1):
        result = attack_fn(attempt)
        if result.exemplar_verdict not in a_text:
            return RejectSamplingOutcome(result=result, attempts=attempt, gave_up=False)
    return RejectSamplingOutcome(result=result, attempts=cap, gave_up=True)
