"""Early (channel concatenation) and hybrid (two-stream, attention-gated) fusion."""

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .encoders import INPUT_HW, LATENT_DIM, STAGES, ConvStages, flatten, stage_extents, uniform_param, zeros_param


def early_fuse(rgb, modality):
    """Concatenate RGB [N,3,H,W] with a 1- or 2-channel modality, RGB first."""
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise DimensionError(f"early_fuse: rgb must be [N, 3, H, W], got {rgb.shape}")
    if modality.ndim != 4 or modality.shape[1] not in (1, 2):
        raise DimensionError(f"early_fuse: modality must have 1 or 2 channels, got {modality.shape}")
    if rgb.shape[0] != modality.shape[0] or rgb.shape[2:] != modality.shape[2:]:
        raise DimensionError(f"early_fuse: spatial mismatch {rgb.shape} vs {modality.shape}")
    return ad.concat([rgb, modality], axis=1)


@dataclass
class AcmParams:
    """Channel gate: global average pool -> [C, C] projection -> sigmoid."""

    weight: Tensor
    bias: Tensor

    @property
    def channels(self):
        return self.bias.shape[0]

    @classmethod
    def init(cls, channels, rng):
        return cls(uniform_param(rng, (channels, channels), channels, gain=3.0), zeros_param((channels,)))


def acm(features, params):
    """Scale each channel of ``features`` by a learned gate in (0, 1)."""
    if features.ndim != 4 or features.shape[1] != params.channels:
        raise DimensionError(f"acm: {params.channels}-channel gate applied to {features.shape}")
    n, c = features.shape[:2]
    pooled = ad.mean(features, axis=(2, 3))
    gate = ad.sigmoid(ad.dense(pooled, params.weight, params.bias))
    gate = ad.broadcast_to(ad.reshape(gate, (n, c, 1, 1)), features.shape)
    return features * gate


class Stream:
    """One modality's encoder G1..G5 with an attention gate after every stage."""

    def __init__(self, in_channels, rng, stages=STAGES):
        self.in_channels = in_channels
        self.convs = ConvStages(in_channels, rng, stages)
        self.gates = [AcmParams.init(f, rng) for f, _, _ in stages]

    @property
    def params(self):
        p = dict(self.convs.params)
        for k, g in enumerate(self.gates, start=1):
            p[f"acm{k}.weight"] = g.weight
            p[f"acm{k}.bias"] = g.bias
        return p


class HybridEncoder:
    """Two independent streams merged by a fused trunk.

    The trunk starts as the sum of both gated stage-1 outputs; at stages 2-4
    its own conv stage is applied and the gated stream outputs are added
    again. A fifth trunk stage carries the accumulation to the shape of G5,
    where it is summed with both gated G5 outputs before projection.
    """

    def __init__(self, channels1, channels2, rng, stages=STAGES, input_hw=INPUT_HW, latent=LATENT_DIM):
        self.input_hw = tuple(input_hw)
        self.extents = stage_extents(input_hw, stages)
        self.stream1 = Stream(channels1, rng, stages)
        self.stream2 = Stream(channels2, rng, stages)
        self.trunk = ConvStages(stages[0][0], rng, stages[1:], first=2)
        h, w = self.extents[-1]
        flat = stages[-1][0] * h * w
        self.proj_weight = uniform_param(rng, (flat, latent), flat, gain=3.0)
        self.proj_bias = zeros_param((latent,))

    @property
    def params(self):
        p = {}
        for name, s in (("s1", self.stream1), ("s2", self.stream2)):
            p.update({f"{name}.{k}": v for k, v in s.params.items()})
        p.update({f"trunk.{k}": v for k, v in self.trunk.params.items()})
        p["proj.weight"] = self.proj_weight
        p["proj.bias"] = self.proj_bias
        return p

    def __call__(self, m1, m2):
        return hybrid_fuse_forward(m1, m2, self.stream1, self.stream2, self)


def hybrid_fuse_forward(m1, m2, stream1, stream2, encoder):
    """Fused 32-d feature vector from two modalities.

    ``m2=None`` drops the second stream entirely (single-stream reference).
    """
    for m, s in ((m1, stream1), (m2, stream2)):
        if m is None:
            continue
        if m.ndim != 4 or m.shape[1] != s.in_channels or tuple(m.shape[2:]) != encoder.input_hw:
            raise DimensionError(f"stream expects {s.in_channels} channels at {encoder.input_hw}, got {m.shape}")
    if m2 is not None and m1.shape[0] != m2.shape[0]:
        raise DimensionError("streams disagree on batch size")

    a, b = m1, m2
    fused = None
    for k in range(1, 5):
        a = stream1.convs.stage(k, a)
        gated = acm(a, stream1.gates[k - 1])
        if b is not None:
            b = stream2.convs.stage(k, b)
            gated = gated + acm(b, stream2.gates[k - 1])
        fused = gated if fused is None else encoder.trunk.stage(k, fused) + gated
    gated = acm(stream1.convs.stage(5, a), stream1.gates[4])
    if b is not None:
        gated = gated + acm(stream2.convs.stage(5, b), stream2.gates[4])
    z = encoder.trunk.stage(5, fused) + gated
    return ad.dense(flatten(z), encoder.proj_weight, encoder.proj_bias)


def swap_streams(encoder):
    """Shallow copy of ``encoder`` with the two streams exchanged."""
    other = object.__new__(HybridEncoder)
    other.__dict__.update(encoder.__dict__)
    other.stream1, other.stream2 = encoder.stream2, encoder.stream1
    return other
