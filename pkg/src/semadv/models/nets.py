"""Tiny conditional denoisers and classifiers built on the autodiff engine.

All parameter sets stay well under the 200k-parameter desk budget. Forward
passes accept plain arrays or graph tensors; gradients flow to whichever
inputs (or parameter overrides) are differentiation leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nm
from ..diffusion import NoiseSchedule, make_schedule

__all__ = ["DenoiserNet", "ClassifierNet", "MlpDenoiserNet", "time_features",
           "param_count"]


def time_features(t, dim):
    """Sinusoidal step embedding; t may be a scalar or an (N,) array."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def param_count(params):
    return sum(int(np.prod(v.shape)) for v in params.values())


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _p(params, name):
    v = params[name]
    return v if isinstance(v, nm.Tensor) else nm.constant(v)


class DenoiserNet:
    """Small U-shaped noise predictor with timestep and token conditioning.

    Two pooling stages give the bottleneck a global receptive field at
    16x16. Tokens 0..n_labels-1 are the leaf classes; index n_labels is the
    unconditional token used for classifier-free guidance.
    """

    kind = "denoiser2d"

    def __init__(self, resolution, channels, n_labels, width=40, emb_dim=32,
                 schedule=None, params=None, rng=None):
        self.resolution = int(resolution)
        self.channels = int(channels)
        self.n_labels = int(n_labels)
        self.n_tokens = self.n_labels + 1
        self.width = int(width)
        self.emb_dim = int(emb_dim)
        self.schedule = schedule
        self.params = params if params is not None else self._init(rng or np.random.default_rng(0))

    @property
    def uncond_token(self):
        return self.n_labels

    def _init(self, rng):
        w, c, d = self.width, self.channels, self.emb_dim
        return {
            "enc1.w": _he(rng, (w, c, 3, 3), c * 9),
            "enc1.b": np.zeros(w),
            "time.w": _he(rng, (d, w), d),
            "time.b": np.zeros(w),
            "cond.emb": rng.standard_normal((self.n_tokens, w)) * 0.1,
            "enc2.w": _he(rng, (w, w, 3, 3), w * 9),
            "enc2.b": np.zeros(w),
            "time_mid.w": _he(rng, (d, w), d),
            "time_mid.b": np.zeros(w),
            "cond_mid.emb": rng.standard_normal((self.n_tokens, w)) * 0.1,
            "mid.w": _he(rng, (w, w, 3, 3), w * 9),
            "mid.b": np.zeros(w),
            "dec2.w": _he(rng, (w, w, 3, 3), w * 9),
            "dec2.b": np.zeros(w),
            "dec1.w": _he(rng, (w, w, 3, 3), w * 9),
            "dec1.b": np.zeros(w),
            "out.w": _he(rng, (c, w, 3, 3), w * 9) * 0.1,
            "out.b": np.zeros(c),
        }

    def arch_descriptor(self):
        desc = {"kind": self.kind, "resolution": self.resolution,
                "channels": self.channels, "n_labels": self.n_labels,
                "width": self.width, "emb_dim": self.emb_dim}
        if self.schedule is not None:
            desc.update(schedule_T=self.schedule.T,
                        schedule_beta_min=float(self.schedule.betas[0]),
                        schedule_beta_max=float(self.schedule.betas[-1]))
        return desc

    @classmethod
    def from_descriptor(cls, desc, params):
        schedule = None
        if "schedule_T" in desc:
            schedule = make_schedule(int(desc["schedule_T"]),
                                     float(desc["schedule_beta_min"]),
                                     float(desc["schedule_beta_max"]))
        return cls(resolution=int(desc["resolution"]), channels=int(desc["channels"]),
                   n_labels=int(desc["n_labels"]), width=int(desc["width"]),
                   emb_dim=int(desc["emb_dim"]), schedule=schedule, params=params)

    def forward(self, x, t, tokens, params=None):
        """Predicted noise for latents x at steps t under conditioning tokens."""
        p = params or self.params
        n = (x.values if isinstance(x, nm.Tensor) else x).shape[0]
        t = np.broadcast_to(np.atleast_1d(t), (n,))
        tokens = np.broadcast_to(np.atleast_1d(tokens), (n,)).astype(np.intp)
        tf = nm.constant(time_features(t, self.emb_dim))
        temb = nm.matmul(tf, _p(p, "time.w")) + _p(p, "time.b")
        cemb = nm.take(_p(p, "cond.emb"), tokens, axis=0)
        inject = nm.reshape(temb + cemb, (n, self.width, 1, 1))
        temb_m = nm.matmul(tf, _p(p, "time_mid.w")) + _p(p, "time_mid.b")
        cemb_m = nm.take(_p(p, "cond_mid.emb"), tokens, axis=0)
        inject_mid = nm.reshape(temb_m + cemb_m, (n, self.width, 1, 1))

        enc1 = nm.relu(nm.conv2d(x, _p(p, "enc1.w"), _p(p, "enc1.b"), pad=1) + inject)
        enc2 = nm.relu(nm.conv2d(nm.avgpool2d(enc1, 2),
                                 _p(p, "enc2.w"), _p(p, "enc2.b"), pad=1))
        mid = nm.relu(nm.conv2d(nm.avgpool2d(enc2, 2),
                                _p(p, "mid.w"), _p(p, "mid.b"), pad=1) + inject_mid)
        up2 = nm.upsample2d(mid, 2) + enc2
        dec2 = nm.relu(nm.conv2d(up2, _p(p, "dec2.w"), _p(p, "dec2.b"), pad=1))
        up1 = nm.upsample2d(dec2, 2) + enc1
        dec1 = nm.relu(nm.conv2d(up1, _p(p, "dec1.w"), _p(p, "dec1.b"), pad=1))
        return nm.conv2d(dec1, _p(p, "out.w"), _p(p, "out.b"), pad=1)

    def predict_pair(self, x_t, t, cond_token):
        """Unconditional and conditional noise predictions in one batched pass.

        Returns a pair of graph tensors regardless of the input container.
        """
        arr = x_t.values if isinstance(x_t, nm.Tensor) else np.asarray(x_t)
        if arr.ndim != 4:
            raise ValueError(f"predict_pair expects a (N,C,H,W) latent, got {arr.shape}")
        x2 = nm.concat([x_t, x_t], axis=0) if isinstance(x_t, nm.Tensor) \
            else np.concatenate([x_t, x_t], axis=0)
        n = arr.shape[0]
        tokens = np.concatenate([np.full(n, self.uncond_token), np.full(n, cond_token)])
        out = self.forward(x2, np.full(2 * n, t), tokens)
        return out[:n], out[n:]


class ClassifierNet:
    """Three-block convolutional classifier over leaf labels."""

    kind = "classifier2d"

    def __init__(self, resolution, channels, n_labels, widths=(16, 32, 32),
                 params=None, rng=None):
        self.resolution = int(resolution)
        self.channels = int(channels)
        self.n_labels = int(n_labels)
        self.widths = tuple(int(w) for w in widths)
        self.final_spatial = self.resolution // (2 ** len(self.widths))
        if self.final_spatial < 1:
            raise ValueError(f"resolution {resolution} too small for 3 pooling stages")
        self.flat_dim = self.widths[-1] * self.final_spatial ** 2
        self.params = params if params is not None else self._init(rng or np.random.default_rng(0))

    def _init(self, rng):
        params = {}
        cin = self.channels
        for i, w in enumerate(self.widths):
            params[f"conv{i}.w"] = _he(rng, (w, cin, 3, 3), cin * 9)
            params[f"conv{i}.b"] = np.zeros(w)
            cin = w
        params["fc.w"] = _he(rng, (self.flat_dim, self.n_labels), self.flat_dim)
        params["fc.b"] = np.zeros(self.n_labels)
        return params

    def arch_descriptor(self):
        return {"kind": self.kind, "resolution": self.resolution,
                "channels": self.channels, "n_labels": self.n_labels,
                "widths": ",".join(str(w) for w in self.widths)}

    @classmethod
    def from_descriptor(cls, desc, params):
        return cls(resolution=int(desc["resolution"]), channels=int(desc["channels"]),
                   n_labels=int(desc["n_labels"]),
                   widths=tuple(int(w) for w in str(desc["widths"]).split(",")),
                   params=params)

    def forward(self, x, params=None):
        """Logits over leaf labels; differentiable w.r.t. the image."""
        p = params or self.params
        h = x
        for i in range(len(self.widths)):
            h = nm.relu(nm.conv2d(h, _p(p, f"conv{i}.w"), _p(p, f"conv{i}.b"), pad=1))
            h = nm.avgpool2d(h, 2)
        n = (h.values if isinstance(h, nm.Tensor) else h).shape[0]
        flat = nm.reshape(h, (n, self.flat_dim))
        return nm.matmul(flat, _p(p, "fc.w")) + _p(p, "fc.b")

    def logits_np(self, images):
        """Plain-array forward for evaluation loops."""
        out = self.forward(nm.constant(images))
        return out.values

    def predict(self, images):
        return np.argmax(self.logits_np(images), axis=1)


class MlpDenoiserNet:
    """Noise predictor over flat latent vectors (the 3-d object lane)."""

    kind = "denoiser_mlp"

    def __init__(self, latent_dim, n_labels, hidden=128, emb_dim=32,
                 schedule=None, params=None, rng=None):
        self.latent_dim = int(latent_dim)
        self.n_labels = int(n_labels)
        self.n_tokens = self.n_labels + 1
        self.hidden = int(hidden)
        self.emb_dim = int(emb_dim)
        self.schedule = schedule
        self.params = params if params is not None else self._init(rng or np.random.default_rng(0))

    @property
    def uncond_token(self):
        return self.n_labels

    def _init(self, rng):
        d, h = self.latent_dim, self.hidden
        return {
            "l1.w": _he(rng, (d, h), d), "l1.b": np.zeros(h),
            "time.w": _he(rng, (self.emb_dim, h), self.emb_dim), "time.b": np.zeros(h),
            "cond.emb": rng.standard_normal((self.n_tokens, h)) * 0.1,
            "l2.w": _he(rng, (h, h), h), "l2.b": np.zeros(h),
            "l3.w": _he(rng, (h, d), h) * 0.1, "l3.b": np.zeros(d),
        }

    def arch_descriptor(self):
        desc = {"kind": self.kind, "latent_dim": self.latent_dim,
                "n_labels": self.n_labels, "hidden": self.hidden,
                "emb_dim": self.emb_dim}
        if self.schedule is not None:
            desc.update(schedule_T=self.schedule.T,
                        schedule_beta_min=float(self.schedule.betas[0]),
                        schedule_beta_max=float(self.schedule.betas[-1]))
        return desc

    @classmethod
    def from_descriptor(cls, desc, params):
        schedule = None
        if "schedule_T" in desc:
            schedule = make_schedule(int(desc["schedule_T"]),
                                     float(desc["schedule_beta_min"]),
                                     float(desc["schedule_beta_max"]))
        return cls(latent_dim=int(desc["latent_dim"]), n_labels=int(desc["n_labels"]),
                   hidden=int(desc["hidden"]), emb_dim=int(desc["emb_dim"]),
                   schedule=schedule, params=params)

    def forward(self, z, t, tokens, params=None):
        p = params or self.params
        n = (z.values if isinstance(z, nm.Tensor) else z).shape[0]
        t = np.broadcast_to(np.atleast_1d(t), (n,))
        tokens = np.broadcast_to(np.atleast_1d(tokens), (n,)).astype(np.intp)
        tf = nm.constant(time_features(t, self.emb_dim))
        temb = nm.matmul(tf, _p(p, "time.w")) + _p(p, "time.b")
        cemb = nm.take(_p(p, "cond.emb"), tokens, axis=0)
        h = nm.relu(nm.matmul(z, _p(p, "l1.w")) + _p(p, "l1.b") + temb + cemb)
        h = nm.relu(nm.matmul(h, _p(p, "l2.w")) + _p(p, "l2.b") + h)
        return nm.matmul(h, _p(p, "l3.w")) + _p(p, "l3.b")

    def predict_pair(self, z_t, t, cond_token):
        x2 = nm.concat([z_t, z_t], axis=0) if isinstance(z_t, nm.Tensor) \
            else np.concatenate([z_t, z_t], axis=0)
        n = (z_t.values if isinstance(z_t, nm.Tensor) else z_t).shape[0]
        tokens = np.concatenate([np.full(n, self.uncond_token), np.full(n, cond_token)])
        out = self.forward(x2, np.full(2 * n, t), tokens)
        return out[:n], out[n:]
