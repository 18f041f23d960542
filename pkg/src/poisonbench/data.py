"""Dataset ingestion, augmentation, and poisoned-trainset assembly.

Two sources: CIFAR-format binary files (1 label byte + 3072 pixel bytes per
record) and a seeded synthetic generator producing colored geometric shapes
on textured noise backgrounds.  All pipeline outputs live in [0,1] until a
batch is normalized for the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, PoisonBenchError

GENERATOR_VERSION = 1

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32


@dataclass
class DatasetSplit:
    images: np.ndarray  # [N,C,H,W] float32 in [0,1]
    labels: np.ndarray  # [N] int64
    class_count: int
    ids: np.ndarray  # [N] int64, unique and stable for (source, seed)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise DataError(f"inconsistent split sizes: {self.images.shape}, {self.labels.shape}, {self.ids.shape}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError("label outside [0, class_count)")
        if len(np.unique(self.ids)) != n:
            raise DataError("duplicate image ids")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def index_of(self, image_id):
        idx = np.nonzero(self.ids == image_id)[0]
        if idx.size == 0:
            raise DataError(f"image id {image_id} not in split")
        return int(idx[0])

    def indices_of_class(self, label):
        return np.nonzero(self.labels == label)[0]


@dataclass
class AugmentationPolicy:
    """Random crop (zero-pad then re-crop) and horizontal flip at train time;
    evaluation applies normalization only."""

    random_crop: bool = False
    crop_pad: int = 4
    horizontal_flip: bool = False
    flip_p: float = 0.5
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    @classmethod
    def none(cls, mean=None, std=None):
        kw = {}
        if mean is not None:
            kw = {"mean": np.asarray(mean, np.float32), "std": np.asarray(std, np.float32)}
        return cls(**kw)

    @classmethod
    def standard(cls, mean, std):
        return cls(
            random_crop=True,
            horizontal_flip=True,
            mean=np.asarray(mean, np.float32),
            std=np.asarray(std, np.float32),
        )

    @property
    def randomized(self):
        return self.random_crop or self.horizontal_flip

    def with_stats(self, mean, std):
        return replace(self, mean=np.asarray(mean, np.float32), std=np.asarray(std, np.float32))


def compute_normalization(split):
    """Per-channel (mean, std) over a clean training split; frozen thereafter."""
    mean = split.images.mean(axis=(0, 2, 3))
    std = split.images.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def normalize_batch(batch, policy):
    mean = policy.mean.reshape(1, -1, 1, 1)
    std = policy.std.reshape(1, -1, 1, 1)
    return ((batch - mean) / std).astype(np.float32)


def augment_batch(batch, policy, rng):
    """Crop/flip from the given rng, then normalize."""
    batch = np.asarray(batch, dtype=np.float32)
    n, c, h, w = batch.shape
    if policy.random_crop:
        p = policy.crop_pad
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)))
        offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        out = np.empty_like(batch)
        for i in range(n):
            oy, ox = offsets[i]
            out[i] = padded[i, :, oy:oy + h, ox:ox + w]
        batch = out
    if policy.horizontal_flip:
        flips = rng.random(n) < policy.flip_p
        batch = batch.copy()
        batch[flips] = batch[flips, :, :, ::-1]
    return normalize_batch(batch, policy)


# --- CIFAR binary ingestion ---

def load_cifar_binary(path):
    """Load a CIFAR-10 binary batch: 3073-byte records, R/G/B planes."""
    raw = np.fromfile(str(path), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise DataError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}")
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= 10:
        raise DataError(f"{path}: label byte {labels.max()} out of range for CIFAR-10")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return DatasetSplit(images=images, labels=labels, class_count=10, ids=np.arange(len(labels)))


def save_split(split, path, sidecar=None):
    """Persist a split in the CIFAR record layout (uint8) plus a JSON sidecar."""
    n, c, h, w = split.images.shape
    quantized = np.round(split.images * 255.0).astype(np.uint8)
    rec = np.empty((n, 1 + c * h * w), dtype=np.uint8)
    rec[:, 0] = split.labels.astype(np.uint8)
    rec[:, 1:] = quantized.reshape(n, -1)
    rec.tofile(str(path))
    meta = {"generator_version": GENERATOR_VERSION, "channels": c, "height": h, "width": w,
            "class_count": split.class_count, "ids": split.ids.tolist()}
    if sidecar:
        meta.update(sidecar)
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh)


def load_split(path):
    """Load a split persisted by save_split (geometry from the sidecar)."""
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    c, h, w = meta["channels"], meta["height"], meta["width"]
    rec_len = 1 + c * h * w
    raw = np.fromfile(str(path), dtype=np.uint8)
    if raw.size % rec_len != 0:
        raise DataError(f"{path}: length {raw.size} is not a multiple of {rec_len}")
    records = raw.reshape(-1, rec_len)
    images = records[:, 1:].reshape(-1, c, h, w).astype(np.float32) / 255.0
    return DatasetSplit(
        images=images,
        labels=records[:, 0].astype(np.int64),
        class_count=meta["class_count"],
        ids=np.asarray(meta["ids"], dtype=np.int64),
    )


# --- synthetic generator ---

_FINETUNE_COLORS = np.array([
    [0.95, 0.10, 0.10],  # red
    [0.10, 0.85, 0.15],  # green
    [0.15, 0.35, 0.95],  # blue
    [0.95, 0.90, 0.10],  # yellow
    [0.90, 0.10, 0.90],  # magenta
    [0.10, 0.90, 0.90],  # cyan
    [0.95, 0.55, 0.10],  # orange
    [0.55, 0.15, 0.90],  # purple
    [0.95, 0.95, 0.95],  # white
    [0.10, 0.55, 0.35],  # pine
])

_PRETRAIN_COLORS = np.array([
    [0.70, 0.25, 0.25],
    [0.35, 0.65, 0.20],
    [0.20, 0.55, 0.75],
    [0.80, 0.75, 0.40],
    [0.70, 0.30, 0.65],
    [0.30, 0.75, 0.65],
    [0.85, 0.45, 0.30],
    [0.45, 0.30, 0.75],
    [0.80, 0.80, 0.70],
    [0.25, 0.45, 0.30],
])

_N_SHAPES = 10

# class textures: row-direction gratings (invariant under horizontal flips)
# coded by frequency and one of two channel mixes per palette
_TEXTURE_MIXES = {
    "finetune": (np.array([1.0, 0.3, 0.0]), np.array([0.0, 0.6, 1.0])),
    "pretrain": (np.array([0.8, 0.0, 0.9]), np.array([0.2, 1.0, 0.2])),
}

TEXTURE_AMPLITUDE = 0.08


def _texture_params(palette, cls):
    mixes = _TEXTURE_MIXES[palette]
    base_freq = 3.0 if palette == "finetune" else 3.5
    freq = base_freq + (cls % 5)
    mix = mixes[cls // 5]
    return freq, mix


def _class_texture(palette, cls, size, phase):
    freq, mix = _texture_params(palette, cls)
    rows = np.arange(size, dtype=np.float64)
    wave = np.sin(2.0 * np.pi * freq * rows / size + phase).astype(np.float32)
    return (mix[:, None, None] * wave[None, :, None]).astype(np.float32)


def _shape_mask(shape_id, size, cy, cx, r, rng):
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    di, dj = ii - cy, jj - cx
    if shape_id == 0:  # disk
        return di * di + dj * dj <= r * r
    if shape_id == 1:  # filled square
        return (np.abs(di) <= r * 0.85) & (np.abs(dj) <= r * 0.85)
    if shape_id == 2:  # upward triangle
        return (di >= -r) & (di <= r * 0.7) & (np.abs(dj) <= (di + r) * 0.75)
    if shape_id == 3:  # ring
        d2 = di * di + dj * dj
        return (d2 <= r * r) & (d2 >= (0.45 * r) ** 2)
    if shape_id == 4:  # plus
        return ((np.abs(di) <= r * 0.35) & (np.abs(dj) <= r)) | ((np.abs(dj) <= r * 0.35) & (np.abs(di) <= r))
    if shape_id == 5:  # diamond
        return np.abs(di) + np.abs(dj) <= r * 1.15
    if shape_id == 6:  # horizontal bar
        return (np.abs(di) <= r * 0.4) & (np.abs(dj) <= r * 1.2)
    if shape_id == 7:  # vertical bar
        return (np.abs(dj) <= r * 0.4) & (np.abs(di) <= r * 1.2)
    if shape_id == 8:  # coarse checker tile
        inside = (np.abs(di) <= r) & (np.abs(dj) <= r)
        return inside & (((ii // 2) + (jj // 2)) % 2 == 0)
    if shape_id == 9:  # square outline
        inside = (np.abs(di) <= r) & (np.abs(dj) <= r)
        inner = (np.abs(di) <= r - 2) & (np.abs(dj) <= r - 2)
        return inside & ~inner
    raise ValueError(f"unknown shape id {shape_id}")


def _class_definitions(palette):
    if palette == "finetune":
        return list(range(_N_SHAPES))
    if palette == "pretrain":
        # shifted shape pairing models a disjoint class set
        return [(i + 3) % _N_SHAPES for i in range(_N_SHAPES)]
    raise PoisonBenchError(f"unknown palette {palette!r}")


def _render(rng, palette, cls, shape_id, size):
    """One image: smooth noise + class grating texture + a colored shape.

    The shape geometry is class-conditional; its color is a nuisance drawn
    from the palette at random.  The low-amplitude grating carries most of
    the class evidence.
    """
    lowres = rng.random((3, max(2, size // 4), max(2, size // 4))).astype(np.float32)
    reps = -(-size // lowres.shape[1])
    bg = np.kron(lowres, np.ones((reps, reps), dtype=np.float32))[:, :size, :size]
    img = 0.38 + 0.10 * bg + 0.03 * rng.random((3, size, size)).astype(np.float32)

    phase = rng.uniform(0.0, 2.0 * np.pi)
    img += TEXTURE_AMPLITUDE * _class_texture(palette, cls, size, phase)

    colors = _FINETUNE_COLORS if palette == "finetune" else _PRETRAIN_COLORS
    color = colors[rng.integers(len(colors))]
    cy = size / 2 + rng.uniform(-size * 0.12, size * 0.12)
    cx = size / 2 + rng.uniform(-size * 0.12, size * 0.12)
    r = size * rng.uniform(0.20, 0.27)
    mask = _shape_mask(shape_id, size, cy, cx, r, rng)
    intensity = rng.uniform(0.82, 1.0)
    tint = np.clip(color * intensity + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
    for ch in range(3):
        img[ch][mask] = tint[ch] * 0.45 + img[ch][mask] * 0.55
    img = np.clip(img, 0.0, 1.0)
    # quantize onto the uint8 grid so record persistence is lossless
    return np.round(img * 255.0).astype(np.float32) / 255.0


def synth_generate(seed, class_count=10, per_class=250, size=16, test_per_class=100, palette="finetune"):
    """Seeded class-conditional shape/color images; returns (train, test).

    Identical seeds produce bitwise-identical datasets.  The "pretrain" and
    "finetune" palettes use distinct colors and shape pairings so the two
    generated datasets model transfer learning across disjoint class sets.
    """
    if class_count < 2 or class_count > _N_SHAPES:
        raise PoisonBenchError(f"class_count must be in [2, {_N_SHAPES}]")
    defs = _class_definitions(palette)[:class_count]
    rng = np.random.default_rng(seed)

    def make(n_per_class, id_base):
        images = np.empty((class_count * n_per_class, 3, size, size), dtype=np.float32)
        labels = np.empty(class_count * n_per_class, dtype=np.int64)
        k = 0
        for cls in range(class_count):
            shape_id = defs[cls]
            for _ in range(n_per_class):
                images[k] = _render(rng, palette, cls, shape_id, size)
                labels[k] = cls
                k += 1
        ids = np.arange(id_base, id_base + k, dtype=np.int64)
        return DatasetSplit(images=images, labels=labels, class_count=class_count, ids=ids)

    train = make(per_class, 0)
    test = make(test_per_class, 0)
    return train, test


# --- poison sets and trainset assembly ---

@dataclass
class PoisonSet:
    """J poison images carrying their base-class labels (clean-label)."""

    poisons: np.ndarray  # [J,C,H,W] float32
    base_ids: np.ndarray  # [J]
    label: int  # the shared base class
    epsilon: float
    attack: str
    final_objective: float | None = None
    objective_trace: list | None = None
    coefficients: np.ndarray | None = None  # CP convex weights, [members, J]

    def __post_init__(self):
        self.poisons = np.asarray(self.poisons, dtype=np.float32)
        self.base_ids = np.asarray(self.base_ids, dtype=np.int64)

    def __len__(self):
        return self.poisons.shape[0]


def validate_poison_set(ps, clean):
    """Check the epsilon bound against base images, pixel range, and labels."""
    for j, bid in enumerate(ps.base_ids):
        idx = clean.index_of(bid)
        if clean.labels[idx] != ps.label:
            raise DataError(f"poison {j}: base id {bid} has label {clean.labels[idx]}, poison label {ps.label}")
        if np.isfinite(ps.epsilon):
            gap = np.abs(ps.poisons[j] - clean.images[idx]).max()
            if gap > ps.epsilon + 1e-6:
                raise DataError(f"poison {j}: linf distance {gap} exceeds epsilon {ps.epsilon}")
    if ps.poisons.size and (ps.poisons.min() < 0.0 or ps.poisons.max() > 1.0):
        raise DataError("poison pixels outside [0,1]")


def assemble_poisoned_trainset(clean, ps):
    """Replace the J base images in place with their poisons (labels kept)."""
    images = clean.images.copy()
    for j, bid in enumerate(ps.base_ids):
        idx = clean.index_of(bid)
        if clean.labels[idx] != ps.label:
            raise DataError(
                f"clean-label contract violated: base id {bid} has label "
                f"{clean.labels[idx]} but poison label is {ps.label}"
            )
        images[idx] = ps.poisons[j]
    return DatasetSplit(images=images, labels=clean.labels.copy(), class_count=clean.class_count, ids=clean.ids.copy())


def save_poison_set(ps, path):
    """Manifest JSON + per-poison records (label byte + float32 LE planes)."""
    path = str(path)
    j, c, h, w = ps.poisons.shape
    with open(path, "wb") as fh:
        for k in range(j):
            fh.write(bytes([ps.label]))
            fh.write(ps.poisons[k].astype("<f4").tobytes())
    manifest = {
        "attack": ps.attack,
        "base_ids": ps.base_ids.tolist(),
        "label": int(ps.label),
        "epsilon": None if not np.isfinite(ps.epsilon) else float(ps.epsilon),
        "final_objective": ps.final_objective,
        "shape": [j, c, h, w],
        "dtype": "float32-le",
    }
    if ps.coefficients is not None:
        manifest["coefficients"] = np.asarray(ps.coefficients).tolist()
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh)


def load_poison_set(path):
    path = str(path)
    with open(path + ".json") as fh:
        manifest = json.load(fh)
    j, c, h, w = manifest["shape"]
    rec = 1 + c * h * w * 4
    raw = open(path, "rb").read()
    if len(raw) != j * rec:
        raise DataError(f"{path}: expected {j * rec} bytes, found {len(raw)}")
    poisons = np.empty((j, c, h, w), dtype=np.float32)
    for k in range(j):
        chunk = raw[k * rec + 1:(k + 1) * rec]
        poisons[k] = np.frombuffer(chunk, dtype="<f4").reshape(c, h, w)
    eps = manifest["epsilon"]
    return PoisonSet(
        poisons=poisons,
        base_ids=np.asarray(manifest["base_ids"]),
        label=manifest["label"],
        epsilon=float("inf") if eps is None else eps,
        attack=manifest["attack"],
        final_objective=manifest.get("final_objective"),
        coefficients=None if "coefficients" not in manifest else np.asarray(manifest["coefficients"]),
    )
