"""Synthetic class-conditional images, packed-record ingestion and light augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import make_rng


class DatasetError(ValueError):
    pass


@dataclass
class DatasetHandle:
    images: np.ndarray  # (N, 3, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    train_idx: np.ndarray
    val_idx: np.ndarray
    num_classes: int
    provenance: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.images.shape[0] != n:
            raise DatasetError(f"{self.images.shape[0]} images but {n} labels")
        if n and ((self.labels < 0).any() or (self.labels >= self.num_classes).any()):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        both = np.concatenate([self.train_idx, self.val_idx])
        if len(np.unique(both)) != len(both) or len(both) != n:
            raise DatasetError("train/val split must be disjoint and cover every sample")
        if n and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("image values must lie in [0, 1]")

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.train_idx if name == "train" else self.val_idx
        return self.images[idx], self.labels[idx]


# ---------------------------------------------------------------------------
# synthetic generator

_SHAPES = ("disk", "square", "cross", "ring", "bar")


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return (dy**2 + dx**2 <= r**2).astype(float)
    if kind == "square":
        return ((np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)).astype(float)
    if kind == "cross":
        arm = max(1.0, r * 0.3)
        return (((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))).astype(float)
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return ((d <= r) & (d >= r * 0.6)).astype(float)
    return ((np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r * 1.2)).astype(float)


def _class_recipe(k: int, num_classes: int) -> dict:
    # texture: spatial frequency (cycles per image) and orientation; shape: primitive + colour
    freqs = (2.0, 3.5, 5.0, 7.0, 9.0)
    angles = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)
    palette = np.array(
        [[0.9, 0.3, 0.2], [0.2, 0.8, 0.3], [0.2, 0.4, 0.9], [0.9, 0.8, 0.2], [0.7, 0.3, 0.8]]
    )
    return {
        "freq": freqs[k % len(freqs)],
        "angle": angles[(k * 3 + k // len(freqs)) % len(angles)],
        "shape": _SHAPES[(k * 2 + 1) % len(_SHAPES)],
        "color": palette[(k + k // len(_SHAPES)) % len(palette)],
    }


def _render(rng: np.random.Generator, recipe: dict, size: int, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    ang = recipe["angle"] + rng.normal(0, 0.15)
    # frequencies are defined at 32 px; rescale so small images stay below Nyquist
    freq = recipe["freq"] * min(1.0, size / 32) * rng.uniform(0.85, 1.15)
    phase = rng.uniform(0, 2 * np.pi)
    grating = np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)) + phase)
    amp = rng.uniform(0.10, 0.25)
    base = rng.uniform(0.35, 0.6, size=3)
    img = base[:, None, None] + amp * grating[None] * rng.uniform(0.6, 1.0, size=3)[:, None, None]

    r = size * rng.uniform(0.15, 0.28)
    cy, cx = rng.uniform(r, size - r, size=2)
    mask = _shape_mask(recipe["shape"], size, cy, cx, r)
    color = np.clip(recipe["color"] + rng.normal(0, 0.12, 3), 0, 1)
    alpha = rng.uniform(0.35, 0.7)
    img = img * (1 - alpha * mask) + alpha * mask * color[:, None, None]

    # distractor: a random shape in a random colour
    r2 = size * rng.uniform(0.1, 0.2)
    cy2, cx2 = rng.uniform(r2, size - r2, size=2)
    m2 = _shape_mask(_SHAPES[rng.integers(len(_SHAPES))], size, cy2, cx2, r2)
    c2 = rng.uniform(0, 1, 3)
    a2 = rng.uniform(0.2, 0.5)
    img = img * (1 - a2 * m2) + a2 * m2 * c2[:, None, None]

    img = img + rng.normal(0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def nearest_neighbor_accuracy(train_x, train_y, val_x, val_y) -> float:
    a = train_x.reshape(len(train_x), -1)
    b = val_x.reshape(len(val_x), -1)
    d = (b**2).sum(1)[:, None] - 2 * b @ a.T + (a**2).sum(1)[None, :]
    pred = train_y[np.argmin(d, axis=1)]
    return float((pred == val_y).mean())


def synth_dataset(
    num_classes: int = 10,
    n_per_class: int = 60,
    size: int = 32,
    seed: int = 0,
    val_fraction: float = 0.25,
    noise: float = 0.08,
) -> DatasetHandle:
    """Deterministic class-conditional texture + shape images."""
    if num_classes < 2:
        raise DatasetError("need at least two classes")
    images = np.empty((num_classes * n_per_class, 3, size, size))
    labels = np.repeat(np.arange(num_classes), n_per_class)
    for k in range(num_classes):
        recipe = _class_recipe(k, num_classes)
        for j in range(n_per_class):
            rng = make_rng(seed, 0x5EED, k, j)
            images[k * n_per_class + j] = _render(rng, recipe, size, noise)

    # stratified split: the same count of val samples from every class
    n_val = int(round(n_per_class * val_fraction))
    perm_rng = make_rng(seed, 0x5A11)
    train_idx, val_idx = [], []
    for k in range(num_classes):
        idx = k * n_per_class + perm_rng.permutation(n_per_class)
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    ds = DatasetHandle(images, labels, train_idx, val_idx, num_classes, "synthetic")
    if len(val_idx) and len(train_idx):
        ds.meta["nn_accuracy"] = nearest_neighbor_accuracy(
            images[train_idx], labels[train_idx], images[val_idx], labels[val_idx]
        )
    return ds


# ---------------------------------------------------------------------------
# packed records
#
# Each record is 1 label byte followed by C*H*W u8 pixel bytes in channel-major,
# row-major order (all of R, then G, then B). The manifest is JSON:
#   {"height": H, "width": W, "channels": 3, "num_classes": K,
#    "files": [{"path": "train.bin", "split": "train"}, ...]}


def quantize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def write_packed(ds: DatasetHandle, directory, manifest_name: str = "manifest.json") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    q = quantize(ds.images)
    files = []
    for split, idx in (("train", ds.train_idx), ("val", ds.val_idx)):
        recs = np.concatenate([ds.labels[idx].astype(np.uint8)[:, None], q[idx].reshape(len(idx), -1)], axis=1)
        name = f"{split}.bin"
        (directory / name).write_bytes(recs.tobytes())
        files.append({"path": name, "split": split})
    _, c, h, w = ds.images.shape
    manifest = {"height": h, "width": w, "channels": c, "num_classes": ds.num_classes, "files": files}
    path = directory / manifest_name
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_external(directory, manifest="manifest.json") -> DatasetHandle:
    directory = Path(directory)
    if isinstance(manifest, (str, Path)):
        manifest = json.loads((directory / manifest).read_text())
    files = manifest.get("files") or []
    if not files:
        raise DatasetError("manifest lists no files: empty dataset")
    h, w, c = int(manifest["height"]), int(manifest["width"]), int(manifest.get("channels", 3))
    k = int(manifest["num_classes"])
    rec = 1 + c * h * w
    imgs, labels, splits = [], [], []
    for entry in files:
        raw = (directory / entry["path"]).read_bytes()
        if len(raw) % rec:
            full = len(raw) // rec
            raise DatasetError(
                f"{entry['path']}: truncated record {full} at byte offset {full * rec} "
                f"({len(raw) - full * rec} of {rec} bytes present)"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
        lab = arr[:, 0].astype(np.int64)
        bad = np.nonzero(lab >= k)[0]
        if len(bad):
            raise DatasetError(
                f"{entry['path']}: label {lab[bad[0]]} out of range at byte offset {bad[0] * rec}"
            )
        imgs.append(arr[:, 1:].reshape(-1, c, h, w).astype(np.float64) / 255.0)
        labels.append(lab)
        splits.append(np.full(len(lab), entry.get("split", "train")))
    images = np.concatenate(imgs)
    labels = np.concatenate(labels)
    split = np.concatenate(splits)
    if len(labels) == 0:
        raise DatasetError("manifest files contain no records: empty dataset")
    return DatasetHandle(
        images,
        labels,
        np.nonzero(split != "val")[0],
        np.nonzero(split == "val")[0],
        k,
        "external",
    )


# ---------------------------------------------------------------------------
# augmentation


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1].copy()


def augment(
    batch: np.ndarray,
    flip: bool = False,
    crop: bool = False,
    jitter: bool = False,
    *,
    seed: int = 0,
    epoch: int = 0,
    indices=None,
    flip_prob: float = 0.5,
    pad: int = 2,
    jitter_strength: float = 0.1,
) -> np.ndarray:
    """Per-sample flip / pad-and-crop / colour jitter, keyed by (seed, epoch, index)."""
    batch = np.asarray(batch, dtype=np.float64)
    if not (flip or crop or jitter):
        return batch.copy()
    if indices is None:
        indices = range(len(batch))
    out = np.empty_like(batch)
    _, c, h, w = batch.shape
    for i, (img, idx) in enumerate(zip(batch, indices)):
        rng = make_rng(seed, 0xA06, epoch, int(idx))
        x = img
        if flip and rng.uniform() < flip_prob:
            x = x[:, :, ::-1]
        if crop:
            padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
            oy, ox = rng.integers(0, 2 * pad + 1, size=2)
            x = padded[:, oy : oy + h, ox : ox + w]
        if jitter:
            bright = rng.uniform(-jitter_strength, jitter_strength)
            contrast = rng.uniform(1 - jitter_strength, 1 + jitter_strength)
            gain = rng.uniform(1 - jitter_strength, 1 + jitter_strength, size=(c, 1, 1))
            mean = x.mean()
            x = (x - mean) * contrast + mean + bright
            x = x * gain
        out[i] = np.clip(x, 0.0, 1.0)
    return out
