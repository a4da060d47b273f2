"""Frames, labels and companions: preprocessing, loading, windowing, synthesis."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .flow import farneback_flow, read_flo, resize_image, to_gray
from .rng import stream

FRAME_HW = (78, 200)
CROP = (0.35, 0.10)  # fraction of rows removed at the top (sky) and bottom (hood)


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.ones(3))


def crop_rows(height, crop=CROP):
    top = int(round(height * crop[0]))
    bottom = height - int(round(height * crop[1]))
    return top, bottom


def crop_frame(raw, crop=CROP, size=FRAME_HW):
    """Drop the sky and hood bands and resize to ``size``; values in [0, 1]."""
    img = np.asarray(raw)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DatasetError(f"expected an RGB image (H, W, 3), got {img.shape}")
    img = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
    top, bottom = crop_rows(img.shape[0], crop)
    img = img[top:bottom]
    if img.shape[0] < size[0] or img.shape[1] < size[1]:
        raise DatasetError(f"image too small: {img.shape[:2]} after cropping, need at least {size}")
    if img.shape[:2] != tuple(size):
        img = resize_image(img, size)
    return img


def compute_stats(sequences):
    """Per-channel mean / std of [0, 1]-scaled frames over the given sequences."""
    total = np.zeros(3)
    sq = np.zeros(3)
    count = 0
    for seq in sequences:
        f = seq.frames.reshape(-1, 3).astype(np.float64) / 255.0
        total += f.sum(axis=0)
        sq += (f * f).sum(axis=0)
        count += len(f)
    if count == 0:
        raise DatasetError("cannot compute statistics of an empty split")
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean**2, 1e-12))
    return ChannelStats(mean, std)


def standardize(frames01, stats):
    """(..., H, W, 3) frames in [0, 1] -> standardized (..., 3, H, W)."""
    x = (frames01 - stats.mean) / stats.std
    return np.moveaxis(x, -1, -3)


def preprocess_frame(raw, stats=None, crop=CROP, size=FRAME_HW):
    """Crop, resize and standardize one frame into a [3, 78, 200] Tensor."""
    img = crop_frame(raw, crop, size)
    return Tensor(standardize(img, stats or ChannelStats.identity()))


# ---------------------------------------------------------------------------
# sequences and windows


@dataclass
class DriveSequence:
    """Cropped uint8 frames (T, H, W, 3) with per-frame labels and companions.

    ``flow[t]`` is the motion from frame t-1 to frame t; ``flow[0]`` is zero.
    """

    name: str
    frames: np.ndarray
    labels: np.ndarray
    flow: np.ndarray = None
    depth: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float32)
        if len(self.frames) != len(self.labels):
            raise DatasetError(f"{self.name}: {len(self.frames)} frames but {len(self.labels)} labels")
        if not np.isfinite(self.labels).all():
            raise DatasetError(f"{self.name}: non-finite steering labels")
        for comp in ("flow", "depth"):
            arr = getattr(self, comp)
            if arr is not None and len(arr) != len(self.frames):
                raise DatasetError(f"{self.name}: {comp} has {len(arr)} entries for {len(self.frames)} frames")

    def __len__(self):
        return len(self.labels)


def compute_sequence_flow(frames, params=None):
    """Flow for each frame from its predecessor, first entry zero. Returns (T, H, W, 2)."""
    gray = [to_gray(f) for f in frames]
    out = np.zeros(frames.shape[:3] + (2,), np.float32)
    for t in range(1, len(gray)):
        out[t] = farneback_flow(gray[t - 1], gray[t], params).data
    return out


def ensure_flow(seq, params=None):
    if seq.flow is None:
        seq.flow = compute_sequence_flow(seq.frames, params)
    return seq.flow


@dataclass
class Window:
    sequence: str
    start: int
    frames: np.ndarray
    labels: np.ndarray
    flow: np.ndarray = None
    depth: np.ndarray = None


def build_windows(seq, length=16, stride=1):
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be positive")
    if len(seq) < length:
        raise DatasetError(f"{seq.name}: {len(seq)} frames, shorter than window length {length}")
    out = []
    for s in range(0, len(seq) - length + 1, stride):
        sl = slice(s, s + length)
        out.append(
            Window(
                seq.name,
                s,
                seq.frames[sl],
                seq.labels[sl],
                None if seq.flow is None else seq.flow[sl],
                None if seq.depth is None else seq.depth[sl],
            )
        )
    return out


# ---------------------------------------------------------------------------
# on-disk layout


def frame_name(i):
    return f"frame_{i:05d}.png"


def flow_name(i):
    return f"flow_{i:05d}.flo"


def depth_name(i):
    return f"depth_{i:05d}.png"


def read_labels(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        pairs = sorted((int(r["frame_index"]), float(r["steering"])) for r in rows)
    except (KeyError, ValueError) as err:
        raise DatasetError(f"{path}: malformed steering table ({err})") from None
    return pairs


def write_labels(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "steering"])
        for i, y in enumerate(labels):
            w.writerow([i, repr(float(y))])


def load_sequence(path, flow_root=None, crop=CROP, size=FRAME_HW):
    path = Path(path)
    frame_files = sorted(path.glob("frame_*.png"))
    label_file = path / "steering.csv"
    if not label_file.exists():
        raise DatasetError(f"{path.name}: missing steering.csv")
    pairs = read_labels(label_file)
    if len(pairs) != len(frame_files):
        raise DatasetError(f"{path.name}: {len(frame_files)} frames but {len(pairs)} labels")
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise DatasetError(f"{path.name}: frame indices in steering.csv are not 0..{len(pairs) - 1}")
    frames = np.zeros((len(frame_files),) + tuple(size) + (3,), np.uint8)
    for i, f in enumerate(frame_files):
        rgb = np.asarray(Image.open(f).convert("RGB"))
        frames[i] = np.round(crop_frame(rgb, crop, size) * 255).astype(np.uint8)
    labels = np.array([y for _, y in pairs], dtype=np.float32)

    flow = None
    flow_dir = Path(flow_root) / path.name if flow_root else path
    flo = [flow_dir / flow_name(i) for i in range(len(frames))]
    if flo and all(f.exists() for f in flo):
        flow = np.stack([read_flo(f).data for f in flo])

    depth = None
    dep = [path / depth_name(i) for i in range(len(frames))]
    if dep and all(f.exists() for f in dep):
        depth = np.stack([_load_depth(f, crop, size) for f in dep])
    return DriveSequence(path.name, frames, labels, flow, depth)


def _load_depth(path, crop, size):
    d = np.asarray(Image.open(path)).astype(np.float64) / 65535.0
    top, bottom = crop_rows(d.shape[0], crop)
    d = d[top:bottom]
    if d.shape != tuple(size):
        d = resize_image(d, size)
    return d.astype(np.float32)


def load_dataset(directory, flow_root=None, crop=CROP, size=FRAME_HW):
    """All sequence subfolders of ``directory``, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    subdirs = sorted(p for p in directory.iterdir() if p.is_dir())
    return [load_sequence(p, flow_root, crop, size) for p in subdirs]


# ---------------------------------------------------------------------------
# synthetic road scenes


@dataclass
class SynthConfig:
    """Procedural driving scenes.

    Curvatures are expressed in label units (fraction of ``curvature_max``).
    The road curvature is a clipped Ornstein-Uhlenbeck walk along the road;
    the vehicle additionally weaves inside its lane (a second OU process plus
    a lane-keeping term), so its yaw rate is not fully determined by the road
    shape visible in a single frame. The steering label is the vehicle's
    path curvature divided by ``curvature_max``.
    """

    seed: int = 0
    sequences: int = 40
    frames: int = 64
    height: int = 142
    width: int = 200
    speed: float = 1.5  # metres per frame (15 m/s at 10 fps)
    curvature_max: float = 0.03  # 1/m at |label| = 1
    curvature_mean: float = 0.0
    curvature_sigma: float = 0.45
    curvature_tau: float = 24.0  # frames
    weave_sigma: float = 0.35
    weave_tau: float = 3.0
    texture_density: float = 1.0
    lighting_jitter: float = 0.25
    focal: float = 160.0
    camera_height: float = 1.4
    lane_half_width: float = 3.6
    write_depth: bool = False

    def __post_init__(self):
        if self.sequences < 1 or self.frames < 2:
            raise ValueError("need at least one sequence of two frames")
        if self.speed <= 0 or self.curvature_max <= 0:
            raise ValueError("speed and curvature_max must be positive")
        if not -1 <= self.curvature_mean <= 1:
            raise ValueError("curvature_mean must lie in [-1, 1]")
        if self.curvature_sigma < 0 or self.weave_sigma < 0 or self.texture_density < 0:
            raise ValueError("noise levels and texture density must be non-negative")


def _ou(rng, n, sigma, tau, mean=0.0):
    out = np.empty(n)
    if sigma == 0:
        out.fill(mean)
        return out
    a = np.exp(-1.0 / tau)
    noise = rng.standard_normal(n) * sigma * np.sqrt(1 - a * a)
    x = mean + sigma * rng.standard_normal()
    for i in range(n):
        out[i] = x
        x = mean + a * (x - mean) + noise[i]
    return out


class _Texture:
    def __init__(self, rng, density, count=14):
        n = max(1, int(round(count * density))) if density > 0 else 0
        self.freq = rng.uniform(0.15, 2.5, size=n) * np.exp(1j * rng.uniform(0, np.pi, size=n))
        self.phase = rng.uniform(0, 2 * np.pi, size=n)
        self.amp = rng.uniform(0.5, 1.0, size=n) / max(n, 1) ** 0.5

    def __call__(self, s, l, footprint):
        out = np.zeros_like(s)
        for f, ph, a in zip(self.freq, self.phase, self.amp):
            mag = abs(f)
            atten = np.exp(-2.0 * (np.pi * mag * footprint) ** 2)
            out += a * atten * np.cos(2 * np.pi * (f.real * s + f.imag * l) + ph)
        return out


def _smooth_step(x, edge, width):
    return np.clip(0.5 - (x - edge) / np.maximum(width, 1e-6), 0.0, 1.0)


def simulate_drive(config, index):
    """Vehicle path for one sequence: labels and per-frame road-relative pose."""
    rng = stream(config.seed, "synth-drive", index)
    ds = config.speed
    lookahead = int(np.ceil(80.0 / ds))
    n = config.frames + lookahead + 2
    road = np.clip(_ou(rng, n, config.curvature_sigma, config.curvature_tau, config.curvature_mean), -0.8, 0.8)
    if config.curvature_sigma == 0:
        road[:] = config.curvature_mean
    weave = _ou(rng, config.frames, config.weave_sigma, config.weave_tau)
    kmax = config.curvature_max
    kp, kd = 0.02, 0.3
    e = phi = 0.0
    labels = np.empty(config.frames)
    pose = np.empty((config.frames, 2))
    # the label at frame t is the path curvature driven over the step that
    # ends at frame t, so flow from t-1 to t reflects label t
    for t in range(config.frames):
        k_road = road[t] * kmax
        k_car = k_road + weave[t] * kmax - kp * e - kd * phi
        label = float(np.clip(k_car / kmax, -1.0, 1.0))
        labels[t] = label
        k_car = label * kmax
        phi += ds * (k_car - k_road)
        e += ds * phi
        pose[t] = e, phi
    return labels, pose, road * kmax


def render_sequence(config, index):
    """Render one synthetic sequence: (uint8 frames (T, H, W, 3), labels, depth)."""
    labels, pose, kappa = simulate_drive(config, index)
    world = stream(config.seed, "synth-world")
    grass_tex = _Texture(world, config.texture_density)
    road_tex = _Texture(world, config.texture_density)
    look = stream(config.seed, "synth-look", index)
    gain = 1.0 + look.uniform(-config.lighting_jitter, 0.4 * config.lighting_jitter)
    tint = 1.0 + look.uniform(-0.05, 0.05, size=3)
    s_offset = look.uniform(0, 1000.0)

    H, W, f, h = config.height, config.width, config.focal, config.camera_height
    ds = config.speed
    horizon = crop_rows(H)[0] - 4.5
    rows = np.arange(H)[:, None] + 0.5
    cols = np.arange(W)[None, :] + 0.5 - W / 2.0
    below = rows > horizon + 0.5
    dy = np.where(below, rows - horizon, 1.0)
    Z = np.where(below, f * h / dy, 1e4) * np.ones((1, W))
    xc = cols * Z / f
    footprint = Z * Z / (f * h)

    # centreline lateral offset y(d) and heading theta(d) ahead of each frame
    d_grid = np.arange(0, 80.0 + ds, ds)
    sky = np.array([0.55, 0.70, 0.92])
    frames = np.empty((config.frames, H, W, 3), np.uint8)
    depth = np.empty((config.frames, H, W), np.float32)
    for t in range(config.frames):
        e, phi = pose[t]
        k_ahead = kappa[t + 1 : t + 1 + len(d_grid)]
        theta = np.concatenate([[0.0], np.cumsum(k_ahead[:-1]) * ds])
        yline = np.concatenate([[0.0], np.cumsum(np.sin(theta[:-1])) * ds])
        d = Z * np.cos(phi) - xc * np.sin(phi)
        lat = e + xc * np.cos(phi) + Z * np.sin(phi)
        l = lat - np.interp(d, d_grid, yline)
        s = s_offset + (t + 1) * ds + d

        grass = grass_tex(s * 0.5, l * 0.5, footprint * 0.5)
        asphalt = road_tex(s * 2.0, l * 2.0, footprint * 2.0)
        blur = np.clip(footprint, 0.02, None)
        on_road = _smooth_step(np.abs(l), config.lane_half_width, blur)
        dash = ((np.mod(s, 6.0) < 3.0) * _smooth_step(np.abs(l), 0.12, blur)) * np.exp(-footprint / 3.0)
        edge = _smooth_step(np.abs(np.abs(l) - config.lane_half_width + 0.25), 0.1, blur)
        fade = np.exp(-footprint / 3.0)
        mark = np.clip(dash + edge * fade, 0, 1)

        g_rgb = np.stack([0.25 + 0.10 * grass, 0.45 + 0.18 * grass, 0.18 + 0.07 * grass], axis=-1)
        r_rgb = (0.36 + 0.10 * asphalt)[..., None] * np.ones(3)
        ground = g_rgb * (1 - on_road[..., None]) + r_rgb * on_road[..., None]
        ground = ground * (1 - mark[..., None]) + 0.92 * mark[..., None]
        img = np.where(below[..., None], ground, sky)
        img = np.clip(img * gain * tint, 0, 1)
        frames[t] = np.round(img * 255).astype(np.uint8)
        depth[t] = np.where(below, np.clip(1.5 / Z, 0, 1), 0.0)
    return frames, labels.astype(np.float32), depth


def synth_generate(config, out_dir):
    """Render ``config.sequences`` sequences under ``out_dir``; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(config.sequences):
        frames, labels, depth = render_sequence(config, i)
        seq_dir = out_dir / f"seq_{i:04d}"
        seq_dir.mkdir(exist_ok=True)
        for t, fr in enumerate(frames):
            Image.fromarray(fr).save(seq_dir / frame_name(t), optimize=False, compress_level=6)
            if config.write_depth:
                Image.fromarray(np.round(depth[t] * 65535).astype(np.uint16)).save(seq_dir / depth_name(t))
        write_labels(seq_dir / "steering.csv", labels)
        paths.append(seq_dir)
    return paths


def cropped_sequence(config, index, crop=CROP, size=FRAME_HW):
    """Render and preprocess one synthetic sequence in memory (no disk round trip)."""
    frames, labels, depth = render_sequence(config, index)
    cropped = np.stack([np.round(crop_frame(f, crop, size) * 255).astype(np.uint8) for f in frames])
    top, bottom = crop_rows(config.height, crop)
    dep = depth[:, top:bottom]
    if dep.shape[1:] != tuple(size):
        dep = np.stack([resize_image(d, size) for d in dep])
    return DriveSequence(f"seq_{index:04d}", cropped, labels, None, dep.astype(np.float32))

