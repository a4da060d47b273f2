"""Losses, fold planning and the training loop."""

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, NumericError, Tensor
from .data import DatasetError, build_windows, compute_stats, ensure_flow
from .model import ConfigError, ModelConfig, SteeringModel, make_batch, read_key_values
from .optim import AdamState, adam_step, clip_by_global_norm
from .rng import stream

LAMBDA1 = 0.15
LAMBDA2 = LAMBDA1 * np.exp(-2.0)


class TrainingDiverged(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# losses


def turn_weights(y, alpha=1.0):
    return np.exp(np.abs(y) ** alpha)


def prediction_loss(pred, target, alpha=1.0):
    """Turn-weighted squared error ``sum w (p - y)^2 / sum w`` with ``w = exp(|y|^alpha)``.

    ``target`` is a constant; any shape works as long as both agree.
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != y.shape:
        raise DimensionError(f"prediction_loss: {pred.shape} vs {y.shape}")
    if pred.size == 0:
        raise ValueError("prediction_loss of an empty sequence")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    w = turn_weights(y.astype(np.float64), alpha)
    w = (w / w.sum()).astype(pred.dtype)
    d = pred - Tensor(y, dtype=pred.dtype)
    return ad.tsum(d * d * Tensor(w, dtype=pred.dtype))


def kl_term(mu, logvar):
    """``mean(mu^2 + exp(logvar) - logvar - 1) / 2`` over batch and latent dims."""
    return ad.mean(mu * mu + ad.exp(logvar) - logvar - 1.0) * 0.5


def vae_loss(x, recon, mu, logvar, lambda1=LAMBDA1, lambda2=LAMBDA2):
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=recon.dtype)
    if x.shape != recon.shape or mu.shape != logvar.shape:
        raise DimensionError(f"vae_loss: {x.shape}/{recon.shape}, {mu.shape}/{logvar.shape}")
    d = x - recon
    return ad.mean(d * d) * lambda1 + kl_term(mu, logvar) * lambda2


def total_loss(pred_loss, vae_part, beta):
    if beta not in (0, 1):
        raise ValueError(f"beta must be 0 or 1, got {beta}")
    if beta == 0 or vae_part is None:
        return pred_loss
    return vae_part + pred_loss


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    encoder: str = "cnn"
    head: str = "ncp"
    fusion: str = "early"
    modality: str = "none"
    wiring_seed: int = 0
    unfolds: int = 6
    dt: float = 1.0
    alpha: float = 1.0
    seed: int = 0
    folds: int = 10
    steps: int = 100
    epochs: int = 0
    batch: int = 20
    seq_len: int = 16
    lr: float = 1e-3
    clip: float = 10.0
    val_every: int = 1
    val_windows: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.lr <= 0 or self.clip <= 0:
            raise ConfigError("alpha, lr and clip must be positive")
        if min(self.folds, self.batch, self.seq_len, self.val_every) < 1 or self.steps < 1:
            raise ConfigError("folds, steps, batch, seq_len and val_every must be >= 1")
        if self.folds < 2:
            raise ConfigError("cross-validation needs at least 2 folds")
        self.model_config()

    def model_config(self):
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def with_overrides(self, **values):
        d = asdict(self)
        d.update({k: v for k, v in values.items() if v is not None})
        return TrainConfig(**d)

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            try:
                kind = types[k] if types[k] in (int, float) else str
                kwargs[k] = kind(v)
            except ValueError:
                raise ConfigError(f"{k}: cannot parse {v!r}") from None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        return cls.from_mapping(read_key_values(path))


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    folds: list
    val_fraction: float = 0.1

    @property
    def k(self):
        return len(self.folds)

    def split(self, i):
        """``(train, val, test)`` index arrays with fold ``i`` (0-based) held out."""
        if not 0 <= i < self.k:
            raise IndexError(f"fold {i} out of range for {self.k} folds")
        rest = np.concatenate([f for j, f in enumerate(self.folds) if j != i])
        n_val = max(1, int(round(self.val_fraction * len(rest))))
        if n_val >= len(rest):
            raise DatasetError("not enough sequences for a training split")
        return rest[:-n_val], rest[-n_val:], self.folds[i].copy()


def make_folds(size, k=10, seed=None):
    """Contiguous partition of ``range(size)`` into ``k`` folds.

    Sequences are temporally ordered, so no shuffling is done; ``seed`` is
    accepted for interface symmetry and ignored.
    """
    if k < 1 or size < k:
        raise ValueError(f"cannot split {size} sequences into {k} folds")
    edges = [i * size // k for i in range(k + 1)]
    return FoldPlan([np.arange(edges[i], edges[i + 1]) for i in range(k)])


def fold_views(sequences, plan, i):
    tr, va, te = plan.split(i)
    return [sequences[j] for j in tr], [sequences[j] for j in va], [sequences[j] for j in te]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SteeringModel
    curve: list  # (step, train_mse, val_mse or None)


def _windows(sequences, length, stride, modality):
    out = []
    for seq in sequences:
        if modality == "flow":
            ensure_flow(seq)
        out.extend(build_windows(seq, length, stride))
    return out


def _mse(pred, labels):
    return float(np.mean((np.asarray(pred, np.float64) - labels) ** 2))


def train(config, train_seqs, val_seqs, seed=None):
    """Fit a model on ``train_seqs``; ``val_seqs`` only feed the learning curve.

    Deterministic for a given seed. Raises ``TrainingDiverged`` on a
    non-finite loss or gradient.
    """
    seed = config.seed if seed is None else seed
    if not train_seqs:
        raise DatasetError("empty training split")
    mod = config.modality
    stats = compute_stats(train_seqs)
    model = SteeringModel(config.model_config(), seed, stats)
    params = model.parameters()
    windows = _windows(train_seqs, config.seq_len, 1, mod)
    if not windows:
        raise DatasetError("training split yields no windows")
    val = _windows(val_seqs, config.seq_len, config.seq_len, mod) if val_seqs else []
    if config.val_windows and len(val) > config.val_windows:
        pick = stream(seed, "val-subset").choice(len(val), config.val_windows, replace=False)
        val = [val[j] for j in sorted(pick)]
    val_batch = make_batch(val, stats, mod) if val else None

    steps = config.steps
    if config.epochs:
        steps = config.epochs * -(-len(windows) // config.batch)
    vae = config.encoder == "vae"
    beta = model.config.beta
    state = AdamState(lr=config.lr)
    curve = []
    for step in range(1, steps + 1):
        rng = stream(seed, "step", step)
        size = min(config.batch, len(windows))
        idx = np.sort(rng.choice(len(windows), size, replace=False))
        batch = make_batch([windows[j] for j in idx], stats, mod, keep_rgb01=vae)
        try:
            with ad.Tape() as tape:
                pred, latent, recon = model.forward(batch, eps_rng=rng if vae else None)
                lp = prediction_loss(pred, batch.labels, config.alpha)
                lv = None
                if latent is not None:
                    lv = vae_loss(model.recon_target(batch), recon, latent.mu, latent.logvar)
                loss = total_loss(lp, lv, beta)
            grads = ad.backward(tape, loss, list(params.values()))
        except NumericError as err:
            raise TrainingDiverged(f"step {step}: {err}") from None
        g = {name: grads[t].data for name, t in params.items()}
        g, norm = clip_by_global_norm(g, config.clip)
        if not np.isfinite(norm):
            raise TrainingDiverged(f"step {step}: non-finite gradient norm")
        adam_step(params, g, state)
        val_mse = None
        if val_batch is not None and (step % config.val_every == 0 or step == steps):
            try:
                val_mse = _mse(model.predict(val_batch), val_batch.labels)
            except NumericError as err:
                raise TrainingDiverged(f"step {step} (validation): {err}") from None
        curve.append((step, _mse(pred.data, batch.labels), val_mse))
    return TrainResult(model, curve)


def write_curve(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_mse", "val_mse"])
        for step, tr, va in curve:
            w.writerow([step, repr(tr), "" if va is None else repr(va)])


def read_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["train_mse"]), float(r["val_mse"]) if r["val_mse"] else None) for r in rows]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    predictions: np.ndarray  # [windows, T]
    labels: np.ndarray

    @property
    def mse(self):
        return _mse(self.predictions, self.labels)

    @property
    def mae(self):
        return float(np.mean(np.abs(self.predictions.astype(np.float64) - self.labels)))


def evaluate(model, sequences, seq_len=16, chunk=8):
    """Predict non-overlapping windows of every sequence (tail frames dropped)."""
    windows = _windows(sequences, seq_len, seq_len, model.config.modality)
    if not windows:
        raise DatasetError("evaluation split yields no windows")
    preds, labels = [], []
    for b0 in range(0, len(windows), chunk):
        batch = make_batch(windows[b0 : b0 + chunk], model.stats, model.config.modality)
        preds.append(model.predict(batch))
        labels.append(batch.labels)
    return EvalResult(np.concatenate(preds), np.concatenate(labels))


def cross_validate(config, sequences, folds=None):
    """Train and test one model per fold; returns ``[(fold, TrainResult, EvalResult)]``.

    ``folds`` lists 0-based fold indices (default: all ``config.folds``).
    """
    plan = make_folds(len(sequences), config.folds)
    out = []
    for i in range(plan.k) if folds is None else folds:
        tr, va, te = fold_views(sequences, plan, i)
        result = train(config, tr, va)
        out.append((i, result, evaluate(result.model, te, config.seq_len)))
    return out


def save_run(result, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = result.model.save(out_dir)
    curve = out_dir / "curve.csv"
    write_curve(result.curve, curve)
    return ckpt, curve
