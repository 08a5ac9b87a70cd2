"""Training loops for the denoisers and classifiers, plus the Adam optimizer."""

from __future__ import annotations

import numpy as np

from .. import numerics as nm
from ..errors import TrainingError
from .nets import ClassifierNet, DenoiserNet, MlpDenoiserNet

__all__ = ["Adam", "train_denoiser", "train_classifier", "train_mlp_denoiser",
           "train_classifier_images", "classifier_accuracy", "classify"]

UNCOND_DROPOUT = 0.1


class Adam:
    def __init__(self, params, lr=2e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _run_sgd(params, loss_for_batch, batches_per_epoch, epochs, lr, rng):
    """Generic loop: loss_for_batch(leaf params, epoch rng) -> scalar Tensor.

    Learning rate steps down by 3x at 70% and 90% of the epoch budget.
    """
    opt = Adam(params, lr=lr)
    history = []
    step = 0
    for epoch in range(epochs):
        frac = epoch / max(epochs, 1)
        opt.lr = lr * (1.0 if frac < 0.7 else (1 / 3 if frac < 0.9 else 1 / 9))
        total, count = 0.0, 0
        for _ in range(batches_per_epoch):
            leaves = {k: nm.leaf(v) for k, v in params.items()}
            loss = loss_for_batch(leaves, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged at step {step}", step=step)
            grads_list = nm.backward(loss, list(leaves.values()))
            grads = dict(zip(leaves.keys(), grads_list))
            params = opt.step(params, grads)
            total += value
            count += 1
            step += 1
        history.append(total / count)
    return params, history


def train_denoiser(dataset, schedule, epochs, seed, width=48, batch_size=64, lr=2e-3):
    """Noise-prediction training with unconditional-token dropout for guidance.

    Returns the trained net (schedule attached) and the per-epoch MSE history.
    """
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    rng = np.random.default_rng(seed)
    spec = dataset.spec
    net = DenoiserNet(resolution=spec.resolution, channels=spec.channels,
                      n_labels=len(spec.leaf_labels), width=width,
                      schedule=schedule, rng=rng)
    images, labels = dataset.images, dataset.labels
    n = len(dataset)
    batches = max(1, n // batch_size)

    def batch_loss(leaves, brng):
        idx = brng.integers(0, n, size=min(batch_size, n))
        x0 = images[idx]
        t = brng.integers(1, schedule.T + 1, size=len(idx))
        noise = brng.standard_normal(x0.shape)
        ab = schedule.alpha_bars[t][:, None, None, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
        tokens = labels[idx].copy()
        drop = brng.random(len(idx)) < UNCOND_DROPOUT
        tokens[drop] = net.uncond_token
        pred = net.forward(nm.constant(x_t), t, tokens, params=leaves)
        diff = pred - nm.constant(noise)
        return nm.tmean(diff * diff)

    net.params, history = _run_sgd(net.params, batch_loss, batches, epochs, lr, rng)
    return net, history


def train_mlp_denoiser(latents, labels, n_labels, schedule, epochs, seed,
                       hidden=128, batch_size=64, lr=2e-3):
    """Same objective as train_denoiser over flat latent vectors."""
    if len(latents) == 0:
        raise TrainingError("dataset is empty")
    rng = np.random.default_rng(seed)
    net = MlpDenoiserNet(latent_dim=latents.shape[1], n_labels=n_labels,
                         hidden=hidden, schedule=schedule, rng=rng)
    n = len(latents)
    batches = max(1, n // batch_size)

    def batch_loss(leaves, brng):
        idx = brng.integers(0, n, size=min(batch_size, n))
        z0 = latents[idx]
        t = brng.integers(1, schedule.T + 1, size=len(idx))
        noise = brng.standard_normal(z0.shape)
        ab = schedule.alpha_bars[t][:, None]
        z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise
        tokens = labels[idx].copy()
        drop = brng.random(len(idx)) < UNCOND_DROPOUT
        tokens[drop] = net.uncond_token
        pred = net.forward(nm.constant(z_t), t, tokens, params=leaves)
        diff = pred - nm.constant(noise)
        return nm.tmean(diff * diff)

    net.params, history = _run_sgd(net.params, batch_loss, batches, epochs, lr, rng)
    return net, history


def train_classifier_images(images, labels, n_labels, epochs, seed,
                            widths=(16, 32, 32), batch_size=64, lr=2e-3,
                            noise_aug=0.15):
    """Cross-entropy training on labeled images; mild noise augmentation
    keeps gradients on off-manifold inputs from being trivially exploitable."""
    if len(images) == 0:
        raise TrainingError("dataset is empty")
    rng = np.random.default_rng(seed)
    net = ClassifierNet(resolution=images.shape[2], channels=images.shape[1],
                        n_labels=n_labels, widths=widths, rng=rng)
    n = len(images)
    batches = max(1, n // batch_size)

    def batch_loss(leaves, brng):
        idx = brng.integers(0, n, size=min(batch_size, n))
        x = images[idx]
        if noise_aug > 0:
            x = x + brng.standard_normal(x.shape) * brng.uniform(0, noise_aug)
        logits = net.forward(nm.constant(x), params=leaves)
        ls = nm.log_softmax(logits, axis=1)
        rows = np.arange(len(idx))
        picked = ls[rows, labels[idx]]
        return -nm.tmean(picked)

    net.params, history = _run_sgd(net.params, batch_loss, batches, epochs, lr, rng)
    return net, history


def train_classifier(dataset, epochs, seed, **kw):
    """Classifier trained on a shape dataset."""
    return train_classifier_images(dataset.images, dataset.labels,
                                   len(dataset.spec.leaf_labels), epochs, seed, **kw)


def classify(net, image):
    """Logits for one image or a batch; graph-friendly for attack gradients."""
    arr = image.values if isinstance(image, nm.Tensor) else np.asarray(image)
    if arr.ndim == 3:
        image = nm.reshape(image, (1,) + tuple(arr.shape)) if isinstance(image, nm.Tensor) \
            else arr[None]
    return net.forward(image)


def classifier_accuracy(net, images, labels, batch=256):
    hits = 0
    for start in range(0, len(images), batch):
        pred = net.predict(images[start:start + batch])
        hits += int((pred == labels[start:start + batch]).sum())
    return hits / len(images)
