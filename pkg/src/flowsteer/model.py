"""Steering model: an encoder (optionally fusing a second modality) feeding a recurrent head."""

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ChannelStats, standardize
from .encoders import CnnEncoder, Vae, cnn_encode, vae_decode, vae_encode
from .fusion import HybridEncoder, early_fuse, hybrid_fuse_forward
from .rng import stream
from .temporal import LstmHead, NcpHead, rollout

ENCODERS = ("cnn", "vae")
HEADS = ("ncp", "lstm")
FUSIONS = ("early", "hybrid")
MODALITIES = ("none", "flow", "depth")
MODALITY_CHANNELS = {"none": 0, "flow": 2, "depth": 1}
FLOW_DIVISOR = 20.0


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder: str = "cnn"
    head: str = "ncp"
    fusion: str = "early"
    modality: str = "none"
    wiring_seed: int = 0
    unfolds: int = 6
    dt: float = 1.0

    def __post_init__(self):
        for key, allowed in (
            ("encoder", ENCODERS),
            ("head", HEADS),
            ("fusion", FUSIONS),
            ("modality", MODALITIES),
        ):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.fusion == "hybrid" and self.modality == "none":
            raise ConfigError("hybrid fusion needs a second modality")
        if self.fusion == "hybrid" and self.encoder == "vae":
            raise ConfigError("hybrid fusion is only defined for the cnn encoder")

    @property
    def beta(self):
        return 1.0 if self.encoder == "vae" else 0.0

    @property
    def extra_channels(self):
        return MODALITY_CHANNELS[self.modality]

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in known:
                continue
            if k in ("wiring_seed", "unfolds"):
                v = int(v)
            elif k == "dt":
                v = float(v)
            kwargs[k] = v
        return cls(**kwargs)


@dataclass
class Batch:
    """Model inputs for N windows of T frames.

    ``rgb`` is standardized [N, T, 3, H, W]; ``extra`` holds the second
    modality [N, T, k, H, W] scaled to [-1, 1] (flow) or [0, 1] (depth);
    ``labels`` is [N, T].
    """

    rgb: np.ndarray
    labels: np.ndarray
    extra: np.ndarray = None
    rgb01: np.ndarray = None

    @property
    def shape(self):
        return self.labels.shape


def modality_array(window, modality, divisor=FLOW_DIVISOR):
    if modality == "flow":
        if window.flow is None:
            raise ConfigError(f"{window.sequence}: flow requested but not available")
        f = np.clip(window.flow / np.float32(divisor), -1.0, 1.0)
        return np.moveaxis(f, -1, -3)
    if modality == "depth":
        if window.depth is None:
            raise ConfigError(f"{window.sequence}: depth requested but not available")
        return window.depth[:, None]
    return None


def make_batch(windows, stats, modality="none", keep_rgb01=False):
    """Stack windows into a Batch using the given (train-split) channel statistics."""
    if not windows:
        raise ValueError("make_batch needs at least one window")
    frames01 = np.stack([w.frames for w in windows]).astype(np.float32) / np.float32(255.0)
    rgb = standardize(frames01, stats).astype(np.float32)
    labels = np.stack([w.labels for w in windows]).astype(np.float32)
    extra = None
    if modality != "none":
        extra = np.stack([modality_array(w, modality) for w in windows]).astype(np.float32)
    rgb01 = np.moveaxis(frames01, -1, -3) if keep_rgb01 else None
    return Batch(rgb, labels, extra, rgb01)


class SteeringModel:
    def __init__(self, config=None, seed=0, stats=None):
        self.config = config or ModelConfig()
        self.seed = seed
        self.stats = stats or ChannelStats.identity()
        c = self.config
        # separate streams so the head starts identically whatever the encoder
        rng = stream(seed, "init-encoder", c.encoder, c.fusion, c.modality)
        if c.fusion == "hybrid":
            self.encoder = HybridEncoder(3, c.extra_channels, rng)
        elif c.encoder == "vae":
            self.encoder = Vae(3 + c.extra_channels, rng)
        else:
            self.encoder = CnnEncoder(3 + c.extra_channels, rng)
        rng = stream(seed, "init-head", c.head)
        if c.head == "ncp":
            self.head = NcpHead(rng, wiring_seed=c.wiring_seed, dt=c.dt, unfolds=c.unfolds)
        else:
            self.head = LstmHead(rng)

    @property
    def input_channels(self):
        return 3 + self.config.extra_channels

    def parameters(self):
        p = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        p.update({f"head.{k}": v for k, v in self.head.params.items()})
        return p

    def load_parameters(self, values):
        params = self.parameters()
        missing = sorted(set(params) - set(values))
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
        for name, t in params.items():
            arr = np.asarray(values[name])
            if arr.shape != t.shape:
                raise ConfigError(f"{name}: checkpoint shape {arr.shape}, model expects {t.shape}")
            t.data = arr.astype(t.dtype)

    def model_input(self, batch):
        """Encoder input(s) for all N*T frames, flattened over time."""
        n, t = batch.shape
        rgb = Tensor(batch.rgb.reshape((n * t,) + batch.rgb.shape[2:]))
        if self.config.modality == "none":
            return rgb, None  # any extra channels in the batch are ignored
        if batch.extra is None:
            raise ConfigError(f"model expects {self.config.modality} input")
        extra = Tensor(batch.extra.reshape((n * t,) + batch.extra.shape[2:]))
        if self.config.fusion == "hybrid":
            return rgb, extra
        return early_fuse(rgb, extra), None

    def recon_target(self, batch):
        """Reconstruction target in [0, 1] for every input channel."""
        if batch.rgb01 is None:
            raise ValueError("batch was built without the [0, 1] RGB copy")
        n, t = batch.shape
        parts = [batch.rgb01]
        if batch.extra is not None and self.config.modality != "none":
            parts.append((batch.extra + 1.0) * 0.5 if self.config.modality == "flow" else batch.extra)
        x = np.concatenate(parts, axis=2)
        return x.reshape((n * t,) + x.shape[2:])

    def encode(self, batch, eps_rng=None):
        """Per-frame features [N*T, 32] and, for the VAE, its LatentStats."""
        x, extra = self.model_input(batch)
        if self.config.fusion == "hybrid":
            return hybrid_fuse_forward(x, extra, self.encoder.stream1, self.encoder.stream2, self.encoder), None
        if self.config.encoder == "vae":
            eps = None
            if eps_rng is not None:
                eps = eps_rng.standard_normal((x.shape[0], self.encoder.latent))
            stats = vae_encode(x, self.encoder, eps)
            return stats.z, stats
        return cnn_encode(x, self.encoder), None

    def predict_from_features(self, feats, n, t):
        return rollout(self.head, ad.reshape(feats, (n, t, feats.shape[-1])))

    def forward(self, batch, eps_rng=None):
        """Returns ``(pred [N, T], latent_stats_or_None, reconstruction_or_None)``."""
        n, t = batch.shape
        feats, stats = self.encode(batch, eps_rng)
        pred = self.predict_from_features(feats, n, t)
        recon = vae_decode(stats.z, self.encoder) if stats is not None else None
        return pred, stats, recon

    def predict(self, batch):
        """Deterministic predictions (VAE uses the mean latent), as a numpy [N, T] array."""
        n, t = batch.shape
        feats, _ = self.encode(batch)
        return self.predict_from_features(feats, n, t).data

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.parameters(), directory / "model.ckpt")
        lines = self.config.to_text() + f"init_seed = {self.seed}\n"
        lines += "stats_mean = " + " ".join(repr(float(v)) for v in self.stats.mean) + "\n"
        lines += "stats_std = " + " ".join(repr(float(v)) for v in self.stats.std) + "\n"
        (directory / "config.txt").write_text(lines)
        return directory / "model.ckpt"

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        values = read_key_values(directory / "config.txt")
        stats = ChannelStats(
            np.array([float(v) for v in values["stats_mean"].split()]),
            np.array([float(v) for v in values["stats_std"].split()]),
        )
        model = cls(ModelConfig.from_mapping(values), int(values.get("init_seed", 0)), stats)
        model.load_parameters(load_checkpoint(directory / "model.ckpt"))
        return model


def read_key_values(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
