"""Error metrics, structural similarity and latent-perturbation (ALP) analysis."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .data import DatasetError, build_windows, ensure_flow
from .encoders import LATENT_DIM, vae_encode
from .flow import to_gray
from .model import ConfigError, make_batch
from .plotting import box_plot
from .temporal import rollout

SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise DimensionError(f"length mismatch: {p.size} predictions, {t.size} targets")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def mse(pred, target):
    p, t = _pair(pred, target)
    return float(np.mean((p - t) ** 2))


def mae(pred, target):
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size=11, sigma=1.5):
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def _ssim_channel(a, b, g, c1, c2):
    r = len(g) // 2

    def blur(img):
        out = ndimage.correlate1d(img, g, axis=0, mode="constant")
        out = ndimage.correlate1d(out, g, axis=1, mode="constant")
        return out[r : img.shape[0] - r, r : img.shape[1] - r]

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a * mu_a
    sbb = blur(b * b) - mu_b * mu_b
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b, window=11, sigma=1.5, data_range=1.0):
    """Mean SSIM over all fully contained Gaussian windows.

    Accepts (H, W) or (H, W, C) arrays; channels are scored separately and
    averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise DimensionError(f"ssim: expected (H, W) or (H, W, C), got {a.shape}")
    if min(a.shape[:2]) < window:
        raise DimensionError(f"ssim: image {a.shape[:2]} smaller than window {window}")
    g = gaussian_window(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    if a.ndim == 2:
        return _ssim_channel(a, b, g, c1, c2)
    return float(np.mean([_ssim_channel(a[..., k], b[..., k], g, c1, c2) for k in range(a.shape[2])]))


def flow_to_rgb(flow, max_magnitude=None):
    """Colour-code flow (H, W, 2): hue from direction, value from magnitude. Returns [0, 1] RGB."""
    u, v = flow[..., 0].astype(np.float64), flow[..., 1].astype(np.float64)
    mag = np.hypot(u, v)
    top = max_magnitude if max_magnitude else max(float(mag.max()), 1e-12)
    val = np.clip(mag / top, 0.0, 1.0)
    hue = (np.arctan2(-v, -u) / np.pi + 1.0) / 2.0  # in [0, 1]
    h6 = hue * 6.0
    k = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p, q, t = np.zeros_like(val), val * (1 - f), val * f
    table = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)]
    rgb = np.zeros(flow.shape[:2] + (3,))
    for idx, (r, g_, b) in enumerate(table):
        m = k == idx
        rgb[m, 0], rgb[m, 1], rgb[m, 2] = r[m], g_[m], b[m]
    return rgb


def flow_intensity(flow, max_magnitude=None):
    return to_gray(flow_to_rgb(flow, max_magnitude))


def modality_ssim(sequences):
    """Average SSIM of RGB luma against depth and against rendered flow.

    Returns ``{"depth": value or None, "flow": value}``.
    """
    flow_scores, depth_scores = [], []
    for seq in sequences:
        flow = ensure_flow(seq)
        for t in range(len(seq)):
            luma = to_gray(seq.frames[t])
            if t > 0:
                flow_scores.append(ssim(luma, flow_intensity(flow[t])))
            if seq.depth is not None:
                depth_scores.append(ssim(luma, np.clip(seq.depth[t], 0, 1)))
    return {
        "flow": float(np.mean(flow_scores)) if flow_scores else None,
        "depth": float(np.mean(depth_scores)) if depth_scores else None,
    }


# ---------------------------------------------------------------------------
# latent perturbation


def alp_perturb(z, j, sigma=0.3):
    """``(z + sigma e_j, z - sigma e_j)`` along the last axis."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    if not 0 <= j < z.shape[-1]:
        raise IndexError(f"latent dimension {j} out of range [0, {z.shape[-1]})")
    step = np.zeros(z.shape[-1], dtype=z.dtype)
    step[j] = sigma
    return z + step, z - step


def impact_score(y_pos, y_neg, y0):
    """Mean of the three pairwise absolute differences; elementwise on arrays."""
    y_pos, y_neg, y0 = (np.asarray(v, dtype=np.float64) for v in (y_pos, y_neg, y0))
    return (np.abs(y_pos - y0) + np.abs(y_neg - y0) + np.abs(y_pos - y_neg)) / 3.0


@dataclass
class AlpReport:
    sigma: float
    labels: np.ndarray  # [S] flattened over windows and timesteps
    y0: np.ndarray  # [S]
    y_pos: np.ndarray  # [D, S]
    y_neg: np.ndarray  # [D, S]

    @property
    def dims(self):
        return self.y_pos.shape[0]

    @property
    def mse0(self):
        return mse(self.y0, self.labels)

    def mse_pos(self):
        return np.array([mse(y, self.labels) for y in self.y_pos])

    def mse_neg(self):
        return np.array([mse(y, self.labels) for y in self.y_neg])

    def impacts(self):
        """[D, S] impact score of every dimension on every sample."""
        return impact_score(self.y_pos, self.y_neg, self.y0[None, :])

    def top_error_indices(self, fraction=0.1):
        """Samples with the largest unperturbed squared error; ties go to the lower index."""
        err = (self.y0 - self.labels) ** 2
        count = max(1, int(np.ceil(fraction * len(err))))
        order = np.argsort(-err, kind="stable")
        return np.sort(order[:count])

    def mse_rows(self):
        pos, neg = self.mse_pos(), self.mse_neg()
        return [(j, pos[j], neg[j], self.mse0) for j in range(self.dims)]

    def impact_rows(self, fraction=0.1):
        sel = self.impacts()[:, self.top_error_indices(fraction)]
        rows = []
        for j in range(self.dims):
            q1, med, q3 = np.percentile(sel[j], [25, 50, 75])
            rows.append((j, float(sel[j].mean()), float(med), float(q1), float(q3), float(sel[j].max())))
        return rows

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        p = out_dir / "alp_mse.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dim", "mse_pos", "mse_neg", "mse_unperturbed"])
            for row in self.mse_rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        paths.append(p)
        p = out_dir / "alp_impact.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dim", "mean", "median", "q1", "q3", "max"])
            for row in self.impact_rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        paths.append(p)
        labels = [str(j) for j in range(self.dims)]
        sq = [np.concatenate([(self.y_pos[j] - self.labels) ** 2, (self.y_neg[j] - self.labels) ** 2]) for j in range(self.dims)]
        paths.append(
            box_plot(sq, out_dir / "alp_mse.svg", "Squared error under perturbation", "latent dimension", "squared error", labels)
        )
        top = self.impacts()[:, self.top_error_indices()]
        paths.append(
            box_plot(list(top), out_dir / "alp_impact.svg", "Impact on top-10% error samples", "latent dimension", "impact", labels)
        )
        return paths


def _latent_means(model, batch):
    x, _ = model.model_input(batch)
    return vae_encode(x, model.encoder).mu.data


def alp_report(model, sequences, sigma=0.3, seq_len=16, chunk=8):
    """Perturb every latent dimension by +-sigma at all timesteps and record predictions."""
    if model.config.encoder != "vae":
        raise ConfigError("latent perturbation needs a VAE encoder (the model has no latent statistics)")
    windows = []
    for seq in sequences:
        if model.config.modality == "flow":
            ensure_flow(seq)
        windows.extend(build_windows(seq, seq_len, seq_len))
    if not windows:
        raise DatasetError("alp_report: the evaluation split yields no windows")
    dims = model.encoder.latent
    labels, y0, y_pos, y_neg = [], [], [[] for _ in range(dims)], [[] for _ in range(dims)]
    for b0 in range(0, len(windows), chunk):
        batch = make_batch(windows[b0 : b0 + chunk], model.stats, model.config.modality)
        n, t = batch.shape
        mu = _latent_means(model, batch).reshape(n, t, dims)

        def run(z):
            return rollout(model.head, Tensor(z, dtype=mu.dtype)).data.ravel()

        labels.append(batch.labels.ravel())
        y0.append(run(mu))
        for j in range(dims):
            zp, zn = alp_perturb(mu, j, sigma)
            y_pos[j].append(run(zp))
            y_neg[j].append(run(zn))
    return AlpReport(
        sigma,
        np.concatenate(labels).astype(np.float64),
        np.concatenate(y0).astype(np.float64),
        np.array([np.concatenate(v) for v in y_pos], dtype=np.float64),
        np.array([np.concatenate(v) for v in y_neg], dtype=np.float64),
    )


__all__ = [
    "LATENT_DIM",
    "AlpReport",
    "alp_perturb",
    "alp_report",
    "flow_intensity",
    "flow_to_rgb",
    "impact_score",
    "mae",
    "modality_ssim",
    "mse",
    "ssim",
]
