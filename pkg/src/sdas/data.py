"""Dataset ingestion, synthetic generators and augmentation.

CIFAR-10 binary batches hold fixed 3073-byte records: one label byte, then
three 1024-byte row-major planes (R, G, B) of a 32x32 image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class Dataset:
    kind: str
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    raw: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split]
        return self.x[idx], self.y[idx]

    @property
    def sample_shape(self) -> tuple:
        return self.x.shape[1:]

    @property
    def video(self) -> bool:
        return self.x.ndim == 5


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------


def read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch into (labels, uint8 images of shape (N, 3, 32, 32))."""
    blob = Path(path).read_bytes()
    if len(blob) % RECORD_BYTES:
        offset = len(blob) - len(blob) % RECORD_BYTES
        raise ValueError(f"{path}: {len(blob)} bytes is not a multiple of {RECORD_BYTES}; "
                         f"truncated record at byte offset {offset}")
    recs = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = recs[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{path}: label byte {int(labels[i])} > 9 in record {i} at byte offset {i * RECORD_BYTES}")
    return labels.astype(np.int64), recs[:, 1:].reshape((-1,) + CIFAR_SHAPE).copy()


def write_cifar_file(path, labels, images) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    if images.shape[1] != RECORD_BYTES - 1:
        raise ValueError(f"images must have {RECORD_BYTES - 1} bytes each")
    Path(path).write_bytes(np.concatenate([labels[:, None], images], axis=1).tobytes())


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = (0,) + tuple(range(2, images.ndim))
    return images.mean(axis=axes), images.std(axis=axes)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    shape = (1, -1) + (1,) * (images.ndim - 2)
    return ((images - np.reshape(mean, shape)) / np.reshape(std, shape)).astype(np.float32)


def load_cifar10(directory) -> Dataset:
    directory = Path(directory)
    train_files = sorted(directory.glob("data_batch_*.bin"))
    test_file = directory / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise FileNotFoundError(f"{directory} lacks data_batch_*.bin / test_batch.bin")
    parts = [read_cifar_file(p) for p in train_files]
    y_tr = np.concatenate([p[0] for p in parts])
    raw_tr = np.concatenate([p[1] for p in parts])
    y_te, raw_te = read_cifar_file(test_file)
    raw = np.concatenate([raw_tr, raw_te])
    scaled = raw.astype(np.float64) / 255.0
    mean, std = channel_stats(scaled[: len(y_tr)])
    n_tr = len(y_tr)
    return Dataset(
        kind="cifar10",
        x=normalize(scaled, mean, std),
        y=np.concatenate([y_tr, y_te]),
        num_classes=10,
        splits={"train": np.arange(n_tr), "test": np.arange(n_tr, len(raw))},
        meta={"dir": str(directory), "mean": mean.tolist(), "std": std.tolist()},
        raw=raw,
    )


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _blob(h, w, cy, cx, sigma, wrap=False):
    yy = np.arange(h)[:, None] - cy
    xx = np.arange(w)[None, :] - cx
    if wrap:
        yy = (yy + h / 2) % h - h / 2
        xx = (xx + w / 2) % w - w / 2
    return np.exp(-(yy**2 + xx**2) / (2 * sigma**2))


def class_velocities(num_classes: int) -> list[tuple[int, int]]:
    dirs = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1)]
    out = []
    speed = 1
    while len(out) < num_classes:
        out += [(dy * speed, dx * speed) for dy, dx in dirs]
        speed += 1
    return out[:num_classes]


def _synth_images(labels, shape, num_classes, noise, rng):
    c, h, w = shape
    grid = math.ceil(math.sqrt(num_classes))
    ch, cw = h / grid, w / grid
    x = np.empty((len(labels),) + tuple(shape))
    for n, lab in enumerate(labels):
        gy, gx = divmod(int(lab), grid)
        cy = (gy + 0.5) * ch - 0.5 + rng.uniform(-0.5, 0.5)
        cx = (gx + 0.5) * cw - 0.5 + rng.uniform(-0.5, 0.5)
        amp = rng.uniform(0.8, 1.2)
        img = amp * _blob(h, w, cy, cx, sigma=max(ch, cw) / 4)
        colour = np.full(c, 0.5)
        colour[lab % c] = 1.0
        x[n] = colour[:, None, None] * img
    return x + noise * rng.standard_normal(x.shape)


def _synth_clips(labels, shape, num_classes, noise, rng):
    c, t, h, w = shape
    vel = class_velocities(num_classes)
    x = np.empty((len(labels),) + tuple(shape))
    for n, lab in enumerate(labels):
        vy, vx = vel[int(lab)]
        y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
        colour = rng.uniform(0.5, 1.0, c)
        for f in range(t):
            x[n, :, f] = colour[:, None, None] * _blob(h, w, (y0 + vy * f) % h, (x0 + vx * f) % w,
                                                         sigma=1.2, wrap=True)
    return x + noise * rng.standard_normal(x.shape)


def synth_dataset(kind: str, num_classes: int, n: int, shape, seed: int, noise: float = 0.1,
                  test_fraction: float = 0.2) -> Dataset:
    """Seeded synthetic data.

    ``image``: one Gaussian blob per sample at a class-specific grid cell
    (with small jitter), tinted by class; separable after 4x pooling.
    ``clip``: a blob at a uniformly random start position translating with a
    class-specific velocity on a torus.  Each frame alone is class-agnostic,
    so only temporal structure identifies the class.
    """
    if n < num_classes:
        raise ValueError(f"need n >= num_classes, got n={n}, classes={num_classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    shape = tuple(int(s) for s in shape)
    if kind in ("image", "synthetic-image"):
        if len(shape) != 3:
            raise ValueError(f"image shape must be (C, H, W), got {shape}")
        x = _synth_images(labels, shape, num_classes, noise, rng)
        kind = "synthetic-image"
    elif kind in ("clip", "synthetic-clip"):
        if len(shape) != 4:
            raise ValueError(f"clip shape must be (C, T, H, W), got {shape}")
        x = _synth_clips(labels, shape, num_classes, noise, rng)
        kind = "synthetic-clip"
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    n_test = int(round(n * test_fraction))
    order = rng.permutation(n)
    return Dataset(
        kind=kind,
        x=x.astype(np.float32),
        y=labels.astype(np.int64),
        num_classes=num_classes,
        splits={"train": np.sort(order[n_test:]), "test": np.sort(order[:n_test])},
        meta={"kind": kind, "num_classes": num_classes, "n": n, "shape": list(shape), "seed": seed,
              "noise": noise},
    )


def split_half(indices, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 50/50 split into (search-train, search-val)."""
    perm = np.random.default_rng(seed).permutation(np.asarray(indices))
    half = (len(perm) + 1) // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def shuffle_frames(clips: np.ndarray, seed: int) -> np.ndarray:
    """Independently permute the temporal axis of every clip in (N, C, T, H, W)."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(clips)
    for n in range(len(clips)):
        out[n] = clips[n][:, rng.permutation(clips.shape[2])]
    return out


def aggregate_clip_logits(logits) -> np.ndarray:
    """Video-level prediction: arithmetic mean of per-clip logits (axis 0)."""
    return np.mean(np.asarray(logits), axis=0)


def uniform_clip_starts(num_frames: int, window: int, count: int = 20) -> np.ndarray:
    """Start frames of ``count`` uniformly spaced windows over a video."""
    if num_frames < window:
        raise ValueError(f"video of {num_frames} frames is shorter than the {window}-frame window")
    return np.linspace(0, num_frames - window, count).round().astype(int)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def resize_short_edge(sample: np.ndarray, short: int) -> np.ndarray:
    h, w = sample.shape[-2:]
    scale = short / min(h, w)
    if scale == 1:
        return sample
    factors = (1,) * (sample.ndim - 2) + (scale, scale)
    return ndimage.zoom(sample, factors, order=1)


def crop_offsets(rng: np.random.Generator, src, target) -> tuple:
    """Uniform random crop offsets for each cropped axis."""
    return tuple(int(rng.integers(0, s - t + 1)) for s, t in zip(src, target))


def _center_offsets(src, target) -> tuple:
    return tuple((s - t) // 2 for s, t in zip(src, target))


def augment(sample: np.ndarray, target, phase: str = "train", rng: np.random.Generator | None = None,
            pad: int = 4, short_edge: int | None = None, flip: bool | None = None) -> np.ndarray:
    """Crop/flip one (C, H, W) image or (C, T, H, W) clip to ``target``.

    ``target`` gives the cropped trailing axes: (H, W) or (T, H, W).  Train
    phase zero-pads by ``pad`` (or resizes the short edge to ``short_edge``),
    takes a uniform random crop and mirrors horizontally with probability
    0.5 (``flip`` forces the choice).  Eval phase resizes if requested and
    takes the center crop.
    """
    if phase not in ("train", "eval"):
        raise ValueError(f"phase must be 'train' or 'eval', got {phase!r}")
    target = tuple(int(t) for t in target)
    x = np.asarray(sample)
    if short_edge is not None:
        x = resize_short_edge(x, short_edge)
    elif phase == "train" and pad:
        widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        x = np.pad(x, widths)
    src = x.shape[x.ndim - len(target):]
    if any(t > s for s, t in zip(src, target)):
        raise ValueError(f"target {target} is larger than the padded source {src}")
    if phase == "train":
        rng = rng if rng is not None else np.random.default_rng()
        off = crop_offsets(rng, src, target)
    else:
        off = _center_offsets(src, target)
    lead = (slice(None),) * (x.ndim - len(target))
    x = x[lead + tuple(slice(o, o + t) for o, t in zip(off, target))]
    if phase == "train":
        do_flip = flip if flip is not None else bool(rng.random() < 0.5)
        if do_flip:
            x = x[..., ::-1]
    elif flip:
        x = x[..., ::-1]
    return np.ascontiguousarray(x)
