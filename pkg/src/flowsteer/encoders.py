"""Convolutional feature extractors: a plain CNN encoder and a VAE."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

LATENT_DIM = 32
INPUT_HW = (78, 200)
# (filters, kernel, stride) for G1..G5
STAGES = ((24, 5, 2), (36, 5, 2), (48, 3, 2), (64, 3, 1), (64, 3, 1))
SUPPORTED_CHANNELS = (3, 4, 5)


def uniform_param(rng, shape, fan_in, gain=6.0):
    bound = np.sqrt(gain / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def stage_extents(input_hw, stages=STAGES):
    """Spatial extent entering each stage, plus the final output extent."""
    sizes = [tuple(input_hw)]
    for _, k, s in stages:
        h, w = sizes[-1]
        if h < k or w < k:
            raise DimensionError(f"input {input_hw} too small for stage plan {stages}")
        sizes.append(((h - k) // s + 1, (w - k) // s + 1))
    return sizes


class ConvStages:
    """Stack of conv + ReLU stages; parameters named ``g{k}.kernel`` / ``g{k}.bias``."""

    def __init__(self, in_channels, rng, stages=STAGES, first=1):
        self.stages = tuple(stages)
        self.first = first
        self.params = {}
        c = in_channels
        for k, (f, ks, _) in enumerate(self.stages, start=first):
            self.params[f"g{k}.kernel"] = uniform_param(rng, (f, c, ks, ks), c * ks * ks)
            self.params[f"g{k}.bias"] = zeros_param((f,))
            c = f
        self.out_channels = c

    def stage(self, k, x):
        f, ks, s = self.stages[k - self.first]
        p = self.params
        return ad.relu(ad.conv2d(x, p[f"g{k}.kernel"], p[f"g{k}.bias"], stride=s))

    def __call__(self, x):
        for k in range(self.first, self.first + len(self.stages)):
            x = self.stage(k, x)
        return x


def _check_input(x, channels, input_hw):
    if x.ndim != 4 or x.shape[1] not in SUPPORTED_CHANNELS:
        raise DimensionError(f"encoder input must be [N, c, H, W] with c in {SUPPORTED_CHANNELS}, got {x.shape}")
    if x.shape[1] != channels or tuple(x.shape[2:]) != tuple(input_hw):
        raise DimensionError(f"encoder built for [N, {channels}, {input_hw[0]}, {input_hw[1]}], got {x.shape}")


def flatten(x):
    return ad.reshape(x, (x.shape[0], -1))


class CnnEncoder:
    def __init__(self, in_channels, rng, stages=STAGES, input_hw=INPUT_HW, latent=LATENT_DIM):
        if in_channels not in SUPPORTED_CHANNELS:
            raise DimensionError(f"unsupported channel count {in_channels}")
        self.in_channels = in_channels
        self.input_hw = tuple(input_hw)
        self.extents = stage_extents(input_hw, stages)
        self.trunk = ConvStages(in_channels, rng, stages)
        h, w = self.extents[-1]
        flat = self.trunk.out_channels * h * w
        self.params = dict(self.trunk.params)
        self.params["proj.weight"] = uniform_param(rng, (flat, latent), flat, gain=3.0)
        self.params["proj.bias"] = zeros_param((latent,))

    def __call__(self, x):
        return cnn_encode(x, self)


def cnn_encode(x, encoder):
    """Five conv stages, flatten, dense projection to the latent width."""
    _check_input(x, encoder.in_channels, encoder.input_hw)
    feats = flatten(encoder.trunk(x))
    return ad.dense(feats, encoder.params["proj.weight"], encoder.params["proj.bias"])


@dataclass
class LatentStats:
    mu: Tensor
    logvar: Tensor
    z: Tensor

    @property
    def sigma(self):
        return ad.exp(self.logvar * 0.5)


def reparameterize(mu, sigma, eps):
    """``z = mu + sigma * eps``; ``eps`` is treated as a constant."""
    if not isinstance(eps, Tensor):
        eps = Tensor(eps, dtype=mu.dtype)
    if mu.shape != sigma.shape or mu.shape != eps.shape:
        raise DimensionError(f"reparameterize: shapes {mu.shape}, {sigma.shape}, {eps.shape}")
    return mu + sigma * eps


class Vae:
    """Conv encoder with mean / log-variance heads and a mirrored decoder."""

    def __init__(self, in_channels, rng, stages=STAGES, input_hw=INPUT_HW, latent=LATENT_DIM):
        if in_channels not in SUPPORTED_CHANNELS:
            raise DimensionError(f"unsupported channel count {in_channels}")
        self.in_channels = in_channels
        self.input_hw = tuple(input_hw)
        self.latent = latent
        self.stages = tuple(stages)
        self.extents = stage_extents(input_hw, stages)
        self.trunk = ConvStages(in_channels, rng, stages)
        h, w = self.extents[-1]
        self.top_shape = (self.trunk.out_channels, h, w)
        flat = int(np.prod(self.top_shape))
        p = dict(self.trunk.params)
        p["mu.weight"] = uniform_param(rng, (flat, latent), flat, gain=3.0)
        p["mu.bias"] = zeros_param((latent,))
        p["logvar.weight"] = uniform_param(rng, (flat, latent), flat, gain=3.0)
        p["logvar.bias"] = zeros_param((latent,))
        p["dec.proj.weight"] = uniform_param(rng, (latent, flat), latent)
        p["dec.proj.bias"] = zeros_param((flat,))
        chans = [in_channels] + [f for f, _, _ in stages]
        for k in range(len(stages), 0, -1):
            _, ks, _ = stages[k - 1]
            cin, cout = chans[k], chans[k - 1]
            p[f"dec.d{k}.kernel"] = uniform_param(rng, (cin, cout, ks, ks), cin * ks * ks)
            p[f"dec.d{k}.bias"] = zeros_param((cout,))
        self.params = p

    def encode(self, x, eps=None):
        return vae_encode(x, self, eps)

    def decode(self, z):
        return vae_decode(z, self)


def vae_encode(x, vae, eps=None):
    """Return LatentStats; with ``eps`` omitted the sample is the mean."""
    _check_input(x, vae.in_channels, vae.input_hw)
    p = vae.params
    feats = flatten(vae.trunk(x))
    mu = ad.dense(feats, p["mu.weight"], p["mu.bias"])
    logvar = ad.dense(feats, p["logvar.weight"], p["logvar.bias"])
    if eps is None:
        return LatentStats(mu, logvar, mu)
    sigma = ad.exp(logvar * 0.5)
    return LatentStats(mu, logvar, reparameterize(mu, sigma, eps))


def vae_decode(z, vae):
    if z.ndim != 2 or z.shape[1] != vae.latent:
        raise DimensionError(f"decoder expects [N, {vae.latent}] latents, got {z.shape}")
    p = vae.params
    n = z.shape[0]
    x = ad.relu(ad.dense(z, p["dec.proj.weight"], p["dec.proj.bias"]))
    x = ad.reshape(x, (n,) + vae.top_shape)
    for k in range(len(vae.stages), 0, -1):
        _, _, s = vae.stages[k - 1]
        x = ad.conv_transpose2d(x, p[f"dec.d{k}.kernel"], p[f"dec.d{k}.bias"], stride=s, output_size=vae.extents[k - 1])
        x = ad.relu(x) if k > 1 else ad.sigmoid(x)
    return x
