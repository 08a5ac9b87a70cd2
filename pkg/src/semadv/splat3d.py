"""Differentiable isotropic Gaussian-splat rendering and the multi-view
attack loop over a latent-parameterized cloud.

A cloud is a fixed set of anchor positions plus a flat latent holding, per
point, color (3), opacity (1), log-scale (1), and a bounded position offset
(3). Rendering projects each point through a look-at pinhole camera and
alpha-composites depth-sorted isotropic footprints front to back; camera
poses perturb a base orientation uniformly within +/- pi/4 on a radius-2
sphere. Attack gradients average over sampled views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .diffusion import ddim_step, k_schedule
from .errors import ContractError, NumericalFailureError, SetupError
from .resadv import (AttackResult, AttackTrace, StepRecord, attack_loss,
                     correct_confidence, select_target, semantic_clip,
                     should_optimize)

__all__ = [
    "GaussianCloud", "CameraPose", "sample_camera", "render", "eot_gradient",
    "EotGradient", "run_attack_3d", "Attack3dResult", "object_templates",
    "template_base_positions", "template_latent", "composite",
    "LATENT_PER_POINT", "DEFAULT_POINTS", "CountingLatentDenoiser",
]

LATENT_PER_POINT = 8  # color 3, opacity 1, log-scale 1, offset 3
DEFAULT_POINTS = 64
OFFSET_BOUND = 0.2
SCALE_BOUNDS = (0.02, 0.5)
YAW_PITCH_JITTER = math.pi / 4.0


@dataclass(frozen=True)
class GaussianCloud:
    """Anchor positions plus the flat latent that decodes to splat parameters."""

    base_positions: np.ndarray  # (N, 3) fixed semantic anchors
    latent: np.ndarray          # (N * LATENT_PER_POINT,)

    def __post_init__(self):
        n = self.base_positions.shape[0]
        if self.latent.shape != (n * LATENT_PER_POINT,):
            raise ContractError(
                f"latent length {self.latent.shape} does not match {n} points")

    @property
    def n_points(self):
        return self.base_positions.shape[0]


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera on the radius-2 sphere looking at the origin, up-axis Z."""

    yaw: float
    pitch: float
    eye: np.ndarray
    fov_deg: float = 40.0
    resolution: int = 24

    @property
    def focal(self):
        return (self.resolution / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)


def _camera_from_angles(yaw, pitch, fov_deg=40.0, resolution=24):
    eye = 2.0 * np.array([
        math.sin(yaw) * math.cos(pitch),
        math.cos(yaw) * math.cos(pitch),
        math.sin(pitch),
    ])
    return CameraPose(yaw=yaw, pitch=pitch, eye=eye, fov_deg=fov_deg,
                      resolution=resolution)


def sample_camera(rng, theta_yaw=0.0, theta_pitch=0.0, fov_deg=40.0, resolution=24):
    """Perturb the base orientation uniformly within +/- pi/4 on each axis."""
    yaw = theta_yaw + rng.uniform(-YAW_PITCH_JITTER, YAW_PITCH_JITTER)
    pitch = theta_pitch + rng.uniform(-YAW_PITCH_JITTER, YAW_PITCH_JITTER)
    return _camera_from_angles(yaw, pitch, fov_deg=fov_deg, resolution=resolution)


def _look_at(eye):
    fwd = -eye / np.linalg.norm(eye)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-12:  # looking straight along Z: pick a fixed right axis
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nrm
    cam_up = np.cross(right, fwd)
    return right, cam_up, fwd


def composite(alphas, colors, background):
    """Front-to-back alpha blending with an explicit backward recurrence.

    alphas: (N, P) per-point per-pixel opacity in [0, 1), depth-sorted front
    first; colors: (N, C); background: (C,). Returns (P, C) pixel colors.
    The per-pixel blend weights plus the background weight sum to one.
    """
    a = alphas.values if isinstance(alphas, nm.Tensor) else np.asarray(alphas)
    c = colors.values if isinstance(colors, nm.Tensor) else np.asarray(colors)
    bg = background.values if isinstance(background, nm.Tensor) else np.asarray(background)
    n, p = a.shape

    trans = np.empty((n + 1, p))
    trans[0] = 1.0
    for i in range(n):
        trans[i + 1] = trans[i] * (1.0 - a[i])
    weights = trans[:n] * a                     # (N, P)
    out = weights.T @ c + trans[n][:, None] * bg[None, :]

    def vjp(g):
        # g: (P, C)
        d_weights = g @ c.T                      # (P, N)
        d_colors = weights @ g                   # (N, C)
        d_bg = (trans[n][:, None] * g).sum(axis=0)
        d_alpha = np.empty_like(a)
        carry = (g * bg[None, :]).sum(axis=1)    # dL/d trans[n]
        for i in range(n - 1, -1, -1):
            dw = d_weights[:, i]
            d_alpha[i] = trans[i] * (dw - carry)
            carry = (1.0 - a[i]) * carry + a[i] * dw
        return d_alpha, d_colors, d_bg

    return nm.custom_node(out, (alphas, colors, background), vjp, "composite")


def decode_latent(latent, n_points):
    """Split and bound the flat latent: sigmoid colors and opacity, clamped
    exponential scale, clamped position offsets."""
    z = latent if isinstance(latent, nm.Tensor) else nm.constant(latent)
    z = nm.reshape(z, (n_points, LATENT_PER_POINT))
    colors = nm.sigmoid(z[:, 0:3])
    opacity = nm.sigmoid(z[:, 3])
    scale = nm.clip(nm.exp(z[:, 4]), *SCALE_BOUNDS)
    offsets = nm.clip(z[:, 5:8], -OFFSET_BOUND, OFFSET_BOUND)
    return colors, opacity, scale, offsets


def render(cloud, cam, background=None):
    """Differentiable image of the cloud under the pose; channels in [0, 1].

    Returns a graph tensor of shape (resolution, resolution, 3). Depth ties
    sort by point index, so identical inputs render bit-identically.
    """
    if np.linalg.norm(cam.eye) < 1e-9:
        raise ContractError("degenerate pose: eye at the origin")
    n = cloud.n_points
    colors, opacity, scale, offsets = decode_latent(cloud.latent, n)
    base = nm.constant(cloud.base_positions)
    pos = base + offsets

    right, cam_up, fwd = _look_at(cam.eye)
    rel = pos - nm.constant(cam.eye[None, :])
    basis = np.stack([right, cam_up, fwd], axis=1)  # world -> camera columns
    cam_xyz = nm.matmul(rel, nm.constant(basis))    # (N, 3): x right, y up, z depth
    depth = nm.clip(cam_xyz[:, 2], 1e-3, 1e9)

    res = cam.resolution
    half = res / 2.0
    u = cam_xyz[:, 0] / depth * cam.focal + half
    v = cam_xyz[:, 1] / depth * cam.focal + half
    sigma = scale / depth * cam.focal

    grid = np.arange(res, dtype=np.float64)  # pixel centers on integer grid
    px = np.tile(grid, res)                  # fast axis: x
    py = np.repeat(grid, res)
    du = nm.reshape(u, (n, 1)) - px[None, :]
    dv = nm.reshape(v, (n, 1)) - py[None, :]
    s2 = nm.reshape(sigma * sigma, (n, 1))
    foot = nm.exp((du * du + dv * dv) / s2 * -0.5)
    alphas = nm.reshape(opacity, (n, 1)) * foot

    order = np.argsort(depth.values, kind="stable")
    alphas_sorted = nm.take(alphas, order, axis=0)
    colors_sorted = nm.take(colors, order, axis=0)
    bg = nm.constant(np.zeros(3) if background is None else background)
    flat = composite(alphas_sorted, colors_sorted, bg)   # (P, 3)
    return nm.reshape(flat, (res, res, 3))


def render_image(cloud, cam, background=None):
    """Plain-array render in NCHW layout for classifier input."""
    img = render(cloud, cam, background).values
    return img.transpose(2, 0, 1)[None]


@dataclass
class EotGradient:
    gradient: np.ndarray
    per_view: list
    cameras: list
    mean_loss: float


def eot_gradient(loss_fn, latent, E, rng=None, cameras=None, base_yaw=0.0,
                 base_pitch=0.0, resolution=24):
    """Average of per-view attack gradients over E sampled camera poses.

    loss_fn(latent_tensor, camera) must return a scalar graph tensor. An
    explicit camera list overrides sampling and makes the result independent
    of the rng.
    """
    if E < 1:
        raise ContractError(f"need at least one view, got E={E}")
    if cameras is None:
        if rng is None:
            raise ContractError("need an rng when no camera list is given")
        cameras = [sample_camera(rng, base_yaw, base_pitch, resolution=resolution)
                   for _ in range(E)]
    else:
        cameras = list(cameras)[:E]
        if len(cameras) != E:
            raise ContractError(f"camera list shorter than E={E}")
    per_view = []
    losses = []
    for cam in cameras:
        z_leaf = nm.leaf(latent)
        loss = loss_fn(z_leaf, cam)
        (g,) = nm.backward(loss, [z_leaf])
        per_view.append(g)
        losses.append(loss.item())
    grad = per_view[0].copy()
    for g in per_view[1:]:
        grad = grad + g
    grad = grad / float(E)
    return EotGradient(gradient=grad, per_view=per_view, cameras=cameras,
                       mean_loss=float(np.mean(losses)))


# ---------------------------------------------------------------------------
# object templates

def template_base_positions(name, n_points=DEFAULT_POINTS, seed=0):
    """Fixed anchor layout per template; the attack never moves these."""
    offsets = {"blob": 11, "box": 23, "ring": 37}
    if name not in offsets:
        raise ContractError(f"unknown template {name!r}")
    rng = np.random.default_rng(seed + offsets[name])
    if name == "blob":
        pts = rng.standard_normal((n_points, 3)) * 0.35
    elif name == "box":
        pts = rng.uniform(-0.55, 0.55, size=(n_points, 3))
        face = rng.integers(0, 3, size=n_points)
        side = rng.choice([-0.55, 0.55], size=n_points)
        pts[np.arange(n_points), face] = side
    elif name == "ring":
        ang = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
        pts = np.stack([0.7 * np.cos(ang), 0.7 * np.sin(ang),
                        rng.uniform(-0.08, 0.08, n_points)], axis=1)
    else:
        raise ContractError(f"unknown template {name!r}")
    return pts


_TEMPLATE_COLOR_CENTERS = {
    "blob": np.array([1.2, -0.4, -0.8]),   # pre-sigmoid: warm
    "box": np.array([-0.8, 1.2, -0.6]),    # green
    "ring": np.array([-0.8, -0.4, 1.4]),   # blue
}


def template_latent(name, rng, n_points=DEFAULT_POINTS):
    """Ground-truth latent sample for a template instance (pre-decode space)."""
    center = _TEMPLATE_COLOR_CENTERS[name]
    z = np.empty((n_points, LATENT_PER_POINT))
    z[:, 0:3] = center[None, :] + rng.standard_normal((n_points, 3)) * 0.35
    z[:, 3] = 1.6 + rng.standard_normal(n_points) * 0.3      # opacity ~ 0.83
    z[:, 4] = np.log(0.16) + rng.standard_normal(n_points) * 0.18
    z[:, 5:8] = rng.standard_normal((n_points, 3)) * 0.05
    return z.reshape(-1)


def object_templates():
    return ("blob", "box", "ring")


def make_latent_corpus(n_per_template, seed, n_points=DEFAULT_POINTS):
    """Latent training set for the 3-d denoiser, one label per template."""
    rng = np.random.default_rng(seed)
    names = object_templates()
    latents = np.stack([template_latent(names[ci], rng, n_points)
                        for ci in range(len(names))
                        for _ in range(n_per_template)])
    labels = np.repeat(np.arange(len(names)), n_per_template)
    return latents, labels


# ---------------------------------------------------------------------------
# the multi-view attack loop

class CountingLatentDenoiser:
    """Counts guided-epsilon evaluations; mixes unconditional and conditional
    predictions with a uniform scalar weight (no spatial structure in latent
    space)."""

    def __init__(self, net, guidance_weight=1.0):
        self.net = net
        self.w = float(guidance_weight)
        self.calls = 0

    def epsilon(self, z_t, t, cond_token):
        self.calls += 1
        eps_unc, eps_cond = self.net.predict_pair(z_t, t, cond_token)
        return eps_unc * (1.0 - self.w) + eps_cond * self.w


def _latent_rollout(guided, z_t, t, cond_token, K, schedule):
    if K == 0:
        return z_t
    z = z_t
    cur = int(t)
    for dT in reversed(k_schedule(t, schedule.T, K)):
        eps = guided.epsilon(z, cur, cond_token)
        z = ddim_step(z, cur, dT, eps, schedule)
        cur -= dT
    return z


@dataclass
class Attack3dResult:
    result: AttackResult
    adv_view_verdicts: list
    exemplar_view_verdicts: list
    ring_cameras: list

    @property
    def adv_majority(self):
        return _majority(self.adv_view_verdicts)

    @property
    def exemplar_majority(self):
        return _majority(self.exemplar_view_verdicts)


def _majority(verdicts):
    counts = np.bincount(np.asarray(verdicts, dtype=np.int64))
    return int(np.argmax(counts))  # ties resolve to the lowest index


def evaluation_ring(n_views=12, pitch=0.3, resolution=24):
    """Evenly spaced yaw orbit at fixed pitch."""
    return [_camera_from_angles(2.0 * math.pi * i / n_views, pitch,
                                resolution=resolution)
            for i in range(n_views)]


def run_attack_3d(denoiser3d, surrogate, task, cfg, E=1, seed=0,
                  guidance_weight=1.0, n_views=12, n_points=DEFAULT_POINTS,
                  background=None):
    """Residual-guided attack over a cloud latent with view-averaged gradients.

    The exemplar latent forks at the attack start step exactly as in the 2-d
    sampler; the semantic budget applies in latent space. Success is judged
    by the majority vote of per-view classifications over an evenly spaced
    evaluation ring.
    """
    schedule = denoiser3d.schedule
    if schedule is None or schedule.T != cfg.T:
        raise SetupError("denoiser schedule does not match attack config T")
    base_positions = template_base_positions(task.leaf_label, n_points)
    a_text = sorted(task.a_text_indices)
    cond_token = task.leaf_index
    guided = CountingLatentDenoiser(denoiser3d, guidance_weight)
    rng = np.random.default_rng(seed)
    dim = n_points * LATENT_PER_POINT
    z = rng.standard_normal((1, dim))
    v = np.zeros_like(z)
    z_ex = None
    l_tar = None
    t_s, t_k = cfg.t_s_step, cfg.t_k_step
    trace = AttackTrace()
    resolution = surrogate.resolution

    def view_logits(z_leaf, t, cam):
        """One view's graph: rollout, decode, render, classify."""
        z0_hat = _latent_rollout(guided, z_leaf, t, cond_token, cfg.K, schedule)
        cloud_t = _TensorCloud(base_positions, nm.reshape(z0_hat, (-1,)))
        img = render(cloud_t, cam, background)
        nchw = nm.reshape(nm.transpose(img, (2, 0, 1)),
                          (1, 3, resolution, resolution))
        return surrogate.forward(nchw)

    for t in range(cfg.T, 0, -1):
        rec = StepRecord(t=t, iterations=0)
        if t == t_s:
            z_ex = z.copy()
        if t <= t_s:
            for i in range(1, cfg.max_iterations(t) + 1):
                base_yaw = rng.uniform(0.0, 2.0 * math.pi)
                cams = [sample_camera(rng, base_yaw + 2.0 * math.pi * k / max(E, 1),
                                      0.3, resolution=resolution)
                        for k in range(E)]
                # one graph per view, reused for early-stop check and gradient
                views = []
                for cam in cams:
                    z_leaf = nm.leaf(z)
                    views.append((z_leaf, view_logits(z_leaf, t, cam)))
                logit_rows = [lg.values.reshape(-1) for _, lg in views]
                confs = []
                for row in logit_rows:
                    e = np.exp(row - row.max())
                    confs.append(correct_confidence(e / e.sum(), a_text))
                conf = float(np.mean(confs))
                rec.confidences.append(conf)
                if not should_optimize(i, t, conf, cfg):
                    break
                if t == t_s or t < t_k or l_tar is None:
                    l_tar = select_target(np.mean(logit_rows, axis=0), a_text)
                per_view = []
                for z_leaf, logits in views:
                    loss = attack_loss(logits, a_text, l_tar)
                    (g,) = nm.backward(loss, [z_leaf])
                    per_view.append(g)
                grad = per_view[0].copy()
                for g in per_view[1:]:
                    grad = grad + g
                grad = grad / float(len(per_view))
                v = cfg.beta_mom * v + (1.0 - cfg.beta_mom) * grad
                z = z + cfg.s * v
                if not np.all(np.isfinite(z)):
                    raise NumericalFailureError(f"non-finite latent at step {t}", step=t)
                rec.iterations += 1
            rec.target_label = -1 if l_tar is None else int(l_tar)
        eps = guided.epsilon(z, t, cond_token)
        z = ddim_step(z, t, 1, eps.values, schedule)
        if z_ex is not None:
            eps_ex = guided.epsilon(z_ex, t, cond_token)
            z_ex = ddim_step(z_ex, t, 1, eps_ex.values, schedule)
            raw = float(np.linalg.norm(z - z_ex))
            z = semantic_clip(z, z_ex, cfg.epsilon)
            rec.clipped = raw > cfg.epsilon
            rec.distance = float(np.linalg.norm(z - z_ex))
        rec.denoiser_evals = guided.calls
        trace.steps.append(rec)

    trace.denoiser_evals = guided.calls
    ring = evaluation_ring(n_views=n_views, resolution=resolution)
    adv_cloud = GaussianCloud(base_positions=base_positions, latent=z[0])
    ex_cloud = GaussianCloud(base_positions=base_positions, latent=z_ex[0])
    adv_verdicts = [int(np.argmax(surrogate.logits_np(
        render_image(adv_cloud, cam, background)))) for cam in ring]
    ex_verdicts = [int(np.argmax(surrogate.logits_np(
        render_image(ex_cloud, cam, background)))) for cam in ring]
    result = AttackResult(x_adv=z[0], x_exemplar=z_ex[0], trace=trace,
                          adv_verdict=_majority(adv_verdicts),
                          exemplar_verdict=_majority(ex_verdicts))
    return Attack3dResult(result=result, adv_view_verdicts=adv_verdicts,
                          exemplar_view_verdicts=ex_verdicts, ring_cameras=ring)


@dataclass(frozen=True)
class _TensorCloud:
    """Cloud view whose latent is a graph tensor mid-attack."""

    base_positions: np.ndarray
    latent: object

    @property
    def n_points(self):
        return self.base_positions.shape[0]
