"""Independent reference implementations used by the gradient and mask tests.

Everything here is plain numpy/python loops over explicit weight matrices,
with finite differences in place of autograd, so it shares no code path with
the package under test.
"""

import math

import numpy as np
import torch
import torch.nn as nn

from selective_utility.data import DatasetHandle


class LinearEncoder(nn.Module):
    """mu = A x + a, log_var = B x + b over flattened pixels."""

    def __init__(self, in_features, latent_dim):
        super().__init__()
        self.mu = nn.Linear(in_features, latent_dim)
        self.lv = nn.Linear(in_features, latent_dim)

    def forward(self, x):
        flat = x.flatten(1)
        return self.mu(flat), self.lv(flat).clamp(-10, 10)


class LinearDecoder(nn.Module):
    def __init__(self, latent_dim, resolution, channels=3):
        super().__init__()
        self.shape = (channels, resolution, resolution)
        self.out_resolution = resolution
        self.fc = nn.Linear(latent_dim, channels * resolution * resolution)

    def forward(self, z):
        return self.fc(z).view(-1, *self.shape)


def toy_handle(n=20, resolution=2, num_classes=3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    images = torch.randint(0, 256, (n, 3, resolution, resolution), dtype=torch.uint8, generator=gen)
    labels = torch.randint(0, num_classes, (n,), generator=gen)
    return DatasetHandle("oracle", "train", num_classes, images, labels, resolution, (0.5,) * 3, (0.25,) * 3)


def np_params(module):
    return {k: v.detach().double().numpy().copy() for k, v in module.state_dict().items()}


def kl_dim(mu, log_var):
    return 0.5 * (mu * mu + math.exp(log_var) - log_var - 1.0)


def brute_force_scores(enc, dec, target_fc, target_stats, handle, h=1e-3):
    """Per-dimension mean KL and mean |d loss_b / d z_i| by loops and central differences."""
    pe, pd, pt = np_params(enc), np_params(dec), np_params(target_fc)
    mean, std = (np.asarray(s, dtype=np.float64) for s in target_stats)
    x_all, y_all = handle.batch(range(handle.size))
    x_all, y_all = x_all.double().numpy(), y_all.numpy()
    d = pe["mu.weight"].shape[0]
    chan, res = dec.shape[0], dec.shape[1]

    def sample_loss(z, label):
        pixels = pd["fc.weight"] @ z + pd["fc.bias"]
        u = (pixels.reshape(chan, res, res) + 1.0) / 2.0
        xn = ((u - mean[:, None, None]) / std[:, None, None]).reshape(-1)
        logits = pt["fc.weight"] @ xn + pt["fc.bias"]
        top = logits.max()
        return top + math.log(sum(math.exp(v - top) for v in logits)) - logits[label]

    kl = np.zeros(d)
    sal = np.zeros(d)
    for b in range(len(y_all)):
        flat = x_all[b].reshape(-1)
        mu = pe["mu.weight"] @ flat + pe["mu.bias"]
        lv = np.clip(pe["lv.weight"] @ flat + pe["lv.bias"], -10, 10)
        for i in range(d):
            kl[i] += kl_dim(mu[i], lv[i])
            zp, zm = mu.copy(), mu.copy()
            zp[i] += h
            zm[i] -= h
            sal[i] += abs((sample_loss(zp, y_all[b]) - sample_loss(zm, y_all[b])) / (2 * h))
    n = len(y_all)
    return kl / n, sal / n


def minmax(values):
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def brute_force_mask(kl, sal, gamma, threshold):
    nk, ns = minmax(list(kl)), minmax(list(sal))
    importance = [gamma * a + (1 - gamma) * b for a, b in zip(nk, ns)]
    top = max(importance)
    if top <= 0:
        return importance, [1] * len(importance)
    return importance, [1 if v >= threshold * top else 0 for v in importance]
