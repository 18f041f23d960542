"""Desk-scale victim architectures, seeded initialization, and checkpoints.

Three named convolutional families stand in for the full-scale victim
models; all expose a feature extractor (flattened last conv block) under a
linear classification head.  Checkpoints round-trip bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError
from .seeding import mix64

CHECKPOINT_MAGIC = b"PBCK"
CHECKPOINT_VERSION = 1


@dataclass
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: int = 2  # max-pool window; 1 disables pooling


@dataclass
class ArchitectureSpec:
    name: str
    in_channels: int
    in_size: int
    conv_blocks: list
    num_classes: int
    use_batchnorm: bool = False
    feature_dim: int = 0
    # fixed multiplier on the flattened features; keeps feature magnitudes
    # (and hence feature-matching gradients) at a moderate scale
    feature_scale: float = 1.0

    def __post_init__(self):
        self.conv_blocks = [b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.conv_blocks]
        expected = self._flat_dim()
        if self.feature_dim == 0:
            self.feature_dim = expected
        elif self.feature_dim != expected:
            raise ShapeError("feature_dim", (self.feature_dim,), (expected,))

    def _flat_dim(self):
        size = self.in_size
        channels = self.in_channels
        for blk in self.conv_blocks:
            size = (size - 1) // blk.stride + 1  # odd kernels, same padding
            if blk.pool > 1:
                size //= blk.pool
            channels = blk.out_channels
            if size < 1:
                raise ShapeError("conv stack output", (size,))
        return channels * size * size

    def to_dict(self):
        return {
            "name": self.name,
            "in_channels": self.in_channels,
            "in_size": self.in_size,
            "conv_blocks": [[b.out_channels, b.kernel, b.stride, b.pool] for b in self.conv_blocks],
            "num_classes": self.num_classes,
            "use_batchnorm": self.use_batchnorm,
            "feature_dim": self.feature_dim,
            "feature_scale": self.feature_scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def conv_small(in_size=16, num_classes=10, in_channels=3):
    return ArchitectureSpec(
        name="conv_small",
        in_channels=in_channels,
        in_size=in_size,
        conv_blocks=[(16, 5, 1, 2), (32, 3, 1, 2), (64, 3, 1, 2)],
        num_classes=num_classes,
        feature_scale=0.1,
    )


def conv_wide(in_size=16, num_classes=10, in_channels=3):
    return ArchitectureSpec(
        name="conv_wide",
        in_channels=in_channels,
        in_size=in_size,
        conv_blocks=[(16, 3, 1, 2), (32, 3, 1, 2), (64, 3, 1, 2), (96, 3, 1, 1)],
        num_classes=num_classes,
        use_batchnorm=True,
    )


def conv_tiny(in_size=16, num_classes=10, in_channels=3):
    return ArchitectureSpec(
        name="conv_tiny",
        in_channels=in_channels,
        in_size=in_size,
        conv_blocks=[(12, 5, 1, 2), (24, 3, 1, 2)],
        num_classes=num_classes,
        feature_scale=0.1,
    )


ARCHITECTURES = {"conv_small": conv_small, "conv_wide": conv_wide, "conv_tiny": conv_tiny}


def architecture(name, in_size=16, num_classes=10, in_channels=3):
    try:
        factory = ARCHITECTURES[name]
    except KeyError:
        raise CheckpointError(f"unknown architecture {name!r} (have {sorted(ARCHITECTURES)})")
    return factory(in_size=in_size, num_classes=num_classes, in_channels=in_channels)


class Model:
    """A feature extractor with a linear head; parameters in a flat dict.

    `normalization` carries the per-channel stats the model was trained
    with; the *_from_pixels entry points apply them so attacks and
    evaluation can work in raw [0,1] pixel space.
    """

    def __init__(self, spec, params, buffers, normalization=None):
        self.spec = spec
        self.params = params  # name -> Tensor (requires_grad)
        self.buffers = buffers  # name -> np.ndarray (BN running stats)
        self.normalization = normalization or (
            np.zeros(spec.in_channels, np.float32),
            np.ones(spec.in_channels, np.float32),
        )

    # --- parameter access ---

    def head_names(self):
        return ["head.w", "head.b"]

    def extractor_names(self):
        return [n for n in self.params if not n.startswith("head.")]

    def head_parameters(self):
        return [self.params[n] for n in self.head_names()]

    def extractor_parameters(self):
        return [self.params[n] for n in self.extractor_names()]

    def trainable_parameters(self):
        return list(self.params.values())

    def set_trainable(self, names):
        wanted = set(names)
        for n, p in self.params.items():
            p.requires_grad = n in wanted
            p.grad = None

    def clone(self):
        params = {n: T.Tensor(p.data.copy(), requires_grad=p.requires_grad) for n, p in self.params.items()}
        buffers = {n: b.copy() for n, b in self.buffers.items()}
        spec = ArchitectureSpec.from_dict(self.spec.to_dict())
        mean, std = self.normalization
        return Model(spec, params, buffers, normalization=(mean.copy(), std.copy()))

    def extractor_fingerprint(self):
        h = hashlib.sha256()
        for n in self.extractor_names():
            h.update(n.encode())
            h.update(self.params[n].data.tobytes())
        for n in sorted(self.buffers):
            h.update(n.encode())
            h.update(self.buffers[n].tobytes())
        return h.hexdigest()

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.extractor_fingerprint().encode())
        for n in self.head_names():
            h.update(self.params[n].data.tobytes())
        return h.hexdigest()

    # --- forward passes (inputs already normalized) ---

    def features(self, x, train=False):
        out = x
        for i, blk in enumerate(self.spec.conv_blocks):
            out = T.conv2d(out, self.params[f"block{i}.w"], stride=blk.stride, padding=blk.kernel // 2)
            if self.spec.use_batchnorm:
                out = T.batch_norm2d(
                    out,
                    self.params[f"block{i}.gamma"],
                    self.params[f"block{i}.beta"],
                    self.buffers[f"block{i}.running_mean"],
                    self.buffers[f"block{i}.running_var"],
                    training=train,
                )
            else:
                out = T.bias_add_nchw(out, self.params[f"block{i}.b"])
            out = T.relu(out)
            if blk.pool > 1:
                out = T.max_pool2d(out, blk.pool)
        flat = T.flatten(out)
        if self.spec.feature_scale != 1.0:
            flat = T.scale(flat, self.spec.feature_scale)
        return flat

    def head_logits(self, feats):
        return T.add(T.matmul(feats, T.transpose2d(self.params["head.w"])), self.params["head.b"])

    def logits(self, x, train=False):
        return self.head_logits(self.features(x, train=train))

    def _normalize(self, x):
        mean, std = self.normalization
        return T.normalize_nchw(x, mean, std)

    def features_from_pixels(self, x, train=False):
        return self.features(self._normalize(x), train=train)

    def logits_from_pixels(self, x, train=False):
        return self.logits(self._normalize(x), train=train)


def build_model(spec, seed):
    """He fan-in initialization from a seeded PRNG; same seed, same bytes."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    params = {}
    buffers = {}
    in_c = spec.in_channels
    for i, blk in enumerate(spec.conv_blocks):
        fan_in = in_c * blk.kernel * blk.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(blk.out_channels, in_c, blk.kernel, blk.kernel))
        params[f"block{i}.w"] = T.Tensor(w.astype(np.float32), requires_grad=True)
        if spec.use_batchnorm:
            params[f"block{i}.gamma"] = T.Tensor(np.ones(blk.out_channels, np.float32), requires_grad=True)
            params[f"block{i}.beta"] = T.Tensor(np.zeros(blk.out_channels, np.float32), requires_grad=True)
            buffers[f"block{i}.running_mean"] = np.zeros(blk.out_channels, np.float32)
            buffers[f"block{i}.running_var"] = np.ones(blk.out_channels, np.float32)
        else:
            params[f"block{i}.b"] = T.Tensor(np.zeros(blk.out_channels, np.float32), requires_grad=True)
        in_c = blk.out_channels
    # small head init keeps the first logits near uniform regardless of the
    # feature magnitudes the extractor produces
    hw = rng.normal(0.0, 0.01, size=(spec.num_classes, spec.feature_dim))
    params["head.w"] = T.Tensor(hw.astype(np.float32), requires_grad=True)
    params["head.b"] = T.Tensor(np.zeros(spec.num_classes, np.float32), requires_grad=True)
    return Model(spec, params, buffers)


def reinitialize_head(model, num_classes, seed):
    """Freshly seeded head for transfer onto a different class count."""
    rng = np.random.default_rng(np.random.PCG64(mix64(seed, 0x48454144)))  # "HEAD"
    hw = rng.normal(0.0, 0.01, size=(num_classes, model.spec.feature_dim))
    model.spec.num_classes = num_classes
    model.params["head.w"] = T.Tensor(hw.astype(np.float32), requires_grad=True)
    model.params["head.b"] = T.Tensor(np.zeros(num_classes, np.float32), requires_grad=True)


# --- checkpoint persistence ---

def save_checkpoint(model, path, hp_id="", seed=0, epoch=0, accuracies=None):
    names = list(model.params) + sorted(model.buffers)
    manifest = []
    offset = 0
    blobs = []
    for n in names:
        arr = model.params[n].data if n in model.params else model.buffers[n]
        blob = arr.astype("<f4").tobytes()
        manifest.append({"name": n, "shape": list(arr.shape), "offset": offset, "buffer": n in model.buffers})
        blobs.append(blob)
        offset += len(blob)
    mean, std = model.normalization
    header = {
        "arch": model.spec.to_dict(),
        "hp_set": hp_id,
        "seed": int(seed),
        "epoch": int(epoch),
        "accuracies": accuracies or {},
        "normalization": {"mean": [float(v) for v in mean], "std": [float(v) for v in std]},
        "manifest": manifest,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(str(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (model, header dict)."""
    with open(str(path), "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        body = fh.read()
    spec = ArchitectureSpec.from_dict(header["arch"])
    params = {}
    buffers = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body[start:start + 4 * count], dtype="<f4").reshape(shape).copy()
        if entry.get("buffer"):
            buffers[entry["name"]] = arr
        else:
            params[entry["name"]] = T.Tensor(arr, requires_grad=True)
    norm = header["normalization"]
    model = Model(
        spec,
        params,
        buffers,
        normalization=(np.asarray(norm["mean"], np.float32), np.asarray(norm["std"], np.float32)),
    )
    return model, header
