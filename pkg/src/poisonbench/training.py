"""Training loops: the seven named hyperparameter sets, step schedules,
checkpoint pretraining, transfer fine-tuning, and from-scratch victims.

All SGD runs use momentum 0.9, weight decay 2e-4, and batches of 128.  Desk
presets shrink a schedule by an integer factor while preserving the relative
decay positions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import AugmentationPolicy, augment_batch, compute_normalization, normalize_batch
from .errors import DataError
from .models import Model, build_model, load_checkpoint, reinitialize_head, save_checkpoint
from .optim import make_optimizer
from .perturb import LinfBall, pgd_maximize_loss
from .seeding import mix64, rng_from


@dataclass(frozen=True)
class HyperparamSet:
    id: str
    initial_lr: float
    decay_factor: float
    decay_schedule: tuple
    epochs: int
    optimizer: str  # "sgd" | "adam"
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 128


_TABLE = {
    "A": HyperparamSet("A", 0.001, 0.5, (32, 64, 96, 128, 160, 192), 200, "adam"),
    "B": HyperparamSet("B", 0.010, 0.1, (100, 150), 200, "sgd"),
    "C": HyperparamSet("C", 0.100, 0.1, (100, 150), 200, "sgd"),
    "D": HyperparamSet("D", 0.100, 0.1, (200, 300, 350), 400, "sgd"),
    "E": HyperparamSet("E", 0.100, 0.1, (40, 60), 100, "sgd"),
    "F": HyperparamSet("F", 0.100, 0.1, (75, 90), 100, "sgd"),
    "G": HyperparamSet("G", 0.010, 0.1, (30,), 40, "sgd"),
}

# FC baseline end-to-end fine-tune: 20 epochs of ADAM at a constant
# 0.00015625 (the smallest rate used in pretraining set A, as printed)
FC_BASELINE_E2E = HyperparamSet("fc_e2e", 0.00015625, 1.0, (), 20, "adam")


def hyperparams(set_id):
    try:
        return _TABLE[set_id]
    except KeyError:
        raise DataError(f"unknown hyperparameter set {set_id!r} (A..G)")


def scaled(hp, factor=10):
    """Desk-scale preset: epochs and decay positions divided by `factor`."""
    if factor <= 1:
        return hp
    epochs = max(1, round(hp.epochs / factor))
    schedule = sorted({max(1, round(e / factor)) for e in hp.decay_schedule})
    schedule = tuple(e for e in schedule if e < epochs)
    return replace(hp, id=f"{hp.id}/{factor}", epochs=epochs, decay_schedule=schedule)


def lr_at(hp, epoch):
    """Step schedule: the rate drops after each listed epoch (0-indexed)."""
    drops = sum(1 for e in hp.decay_schedule if e <= epoch)
    return hp.initial_lr * hp.decay_factor ** drops


@dataclass
class AdversarialTraining:
    """Optional PGD-augmented training for the CLBD crafting model."""

    steps: int = 5
    step_size: float = 4.0 / 255.0
    epsilon: float = 16.0 / 255.0


def _batches(n, batch_size, order):
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _geometry(batch, policy, rng):
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
    return batch


def run_training(model, split, hp, policy, rng, head_only=False, adversarial=None):
    """In-place mini-batch training of `model` on `split`.

    head_only freezes the extractor bytes (batch-norm buffers included) and
    runs every extractor forward in inference mode.
    """
    if len(split) == 0:
        raise DataError("empty dataset")
    if head_only:
        model.set_trainable(model.head_names())
        params = model.head_parameters()
    else:
        model.set_trainable(model.params.keys())
        params = model.trainable_parameters()
    opt = make_optimizer(hp.optimizer, params, hp.initial_lr,
                         momentum=hp.momentum, weight_decay=hp.weight_decay)
    images, labels = split.images, split.labels
    n = len(split)
    train_bn = not head_only
    for epoch in range(hp.epochs):
        opt.lr = lr_at(hp, epoch)
        order = rng.permutation(n)
        for idx in _batches(n, hp.batch_size, order):
            raw = _geometry(images[idx], policy, rng)
            if adversarial is not None:
                with_ball = LinfBall(raw, adversarial.epsilon)
                raw = pgd_maximize_loss(raw, labels[idx], model,
                                        steps=adversarial.steps,
                                        step_size=adversarial.step_size,
                                        ball=with_ball)
            x = T.Tensor(normalize_batch(raw, policy))
            logits = model.logits(x, train=train_bn)
            loss = T.softmax_cross_entropy(logits, labels[idx])
            T.backward(loss)
            opt.step()
            opt.zero_grad()
    return model


def _train_head_on_features(model, feats, labels, hp, rng):
    """Fast path for a frozen extractor: cross-entropy on cached features."""
    model.set_trainable(model.head_names())
    opt = make_optimizer(hp.optimizer, model.head_parameters(), hp.initial_lr,
                         momentum=hp.momentum, weight_decay=hp.weight_decay)
    n = feats.shape[0]
    for epoch in range(hp.epochs):
        opt.lr = lr_at(hp, epoch)
        order = rng.permutation(n)
        for idx in _batches(n, hp.batch_size, order):
            logits = model.head_logits(T.Tensor(feats[idx]))
            loss = T.softmax_cross_entropy(logits, labels[idx])
            T.backward(loss)
            opt.step()
            opt.zero_grad()
    return model


def extract_features(model, images, policy=None, batch_size=256):
    """Inference-mode features for raw [0,1] images, honoring normalization."""
    out = []
    with T.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            batch = images[lo:lo + batch_size]
            if policy is not None:
                x = T.Tensor(normalize_batch(batch, policy))
                feats = model.features(x, train=False)
            else:
                feats = model.features_from_pixels(T.Tensor(batch), train=False)
            out.append(feats.data)
    return np.concatenate(out, axis=0)


def accuracy(model, split, batch_size=256):
    """Argmax-match fraction; ties resolve to the lowest class index."""
    correct = 0
    with T.no_grad():
        for lo in range(0, len(split), batch_size):
            x = T.Tensor(split.images[lo:lo + batch_size])
            logits = model.logits_from_pixels(x, train=False)
            pred = logits.data.argmax(axis=1)
            correct += int((pred == split.labels[lo:lo + batch_size]).sum())
    return correct / len(split) if len(split) else 0.0


def predict(model, images):
    with T.no_grad():
        if images.ndim == 3:
            images = images[None]
        logits = model.logits_from_pixels(T.Tensor(np.asarray(images, np.float32)), train=False)
        return logits.data.argmax(axis=1)


def pretrain(spec, train_split, test_split, hp, policy, seed, n_checkpoints=10,
             out_dir=None, adversarial=None):
    """Train `n_checkpoints` independently seeded models on clean data.

    Normalization statistics come from the clean training split and are
    frozen into each checkpoint.  Returns the checkpoint paths (or in-memory
    (model, header) pairs when out_dir is None).
    """
    if len(train_split) == 0:
        raise DataError("empty dataset")
    mean, std = compute_normalization(train_split)
    policy = policy.with_stats(mean, std)
    results = []
    for k in range(n_checkpoints):
        ckpt_seed = mix64(seed, k)
        model = build_model(spec, ckpt_seed)
        model.normalization = (mean, std)
        rng = rng_from(ckpt_seed, 1)
        run_training(model, train_split, hp, policy, rng, adversarial=adversarial)
        accs = {
            "train": accuracy(model, train_split),
            "test": accuracy(model, test_split) if test_split is not None else None,
        }
        if out_dir is not None:
            path = f"{out_dir}/{spec.name}_ckpt{k:02d}.pbck"
            save_checkpoint(model, path, hp_id=hp.id, seed=ckpt_seed, epoch=hp.epochs, accuracies=accs)
            results.append(path)
        else:
            results.append((model, {"seed": ckpt_seed, "accuracies": accs}))
    return results


def _load(ckpt):
    if isinstance(ckpt, Model):
        return ckpt.clone()
    model, _ = load_checkpoint(ckpt)
    return model


def finetune_linear(ckpt, poisoned, hp=None, policy=None, seed=0):
    """Training mode I: frozen extractor, linear head on the poisoned set."""
    model = _load(ckpt)
    hp = hp or hyperparams("G")
    policy = (policy or AugmentationPolicy()).with_stats(*model.normalization)
    if poisoned.class_count != model.spec.num_classes:
        reinitialize_head(model, poisoned.class_count, seed)
    rng = rng_from(seed, 2)
    if not policy.randomized:
        feats = extract_features(model, poisoned.images, policy)
        _train_head_on_features(model, feats, poisoned.labels, hp, rng)
    else:
        run_training(model, poisoned, hp, policy, rng, head_only=True)
    return model


def finetune_e2e(ckpt, poisoned, hp=None, policy=None, seed=0):
    """End-to-end fine-tuning; defaults to the FC-baseline ADAM schedule."""
    model = _load(ckpt)
    hp = hp or FC_BASELINE_E2E
    policy = (policy or AugmentationPolicy()).with_stats(*model.normalization)
    if poisoned.class_count != model.spec.num_classes:
        reinitialize_head(model, poisoned.class_count, seed)
    rng = rng_from(seed, 3)
    run_training(model, poisoned, hp, policy, rng)
    return model


def train_from_scratch(spec, poisoned, hp, policy, seed, normalization=None):
    """Training mode II: fresh seeded init on the (possibly poisoned) set.

    `normalization` should be the clean training split's statistics; the
    poisons cannot be allowed to shift them.
    """
    model = build_model(spec, mix64(seed, 4))
    if normalization is None:
        normalization = compute_normalization(poisoned)
    model.normalization = normalization
    policy = policy.with_stats(*normalization)
    rng = rng_from(seed, 5)
    run_training(model, poisoned, hp, policy, rng)
    return model
