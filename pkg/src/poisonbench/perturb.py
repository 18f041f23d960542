"""Constraint and trigger machinery shared by all attacks.

l-infinity ball projection (composed with a [0,1] pixel box), Euclidean
projection onto the probability simplex, trigger patches, watermark
blending, and projected gradient ascent on a model loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import PoisonBenchError, ShapeError

INF_EPSILON = float("inf")


def checkerboard_patch(size, channels=3):
    """Default trigger: checkerboard of saturated opposing colors."""
    patch = np.zeros((channels, size, size), dtype=np.float32)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    mask = ((ii + jj) % 2).astype(bool)
    # saturated yellow on saturated blue
    patch[0][mask] = 1.0
    patch[1][mask] = 1.0
    patch[2][~mask] = 1.0
    return patch


@dataclass
class PatchSpec:
    """A trigger patch anchored at the lower-right corner by default.

    offset counts pixels up/left from the corner; (0, 0) flushes the patch
    against the corner.
    """

    pixels: np.ndarray
    offset: tuple = (0, 0)

    @classmethod
    def checkerboard(cls, size=5, channels=3, offset=(0, 0)):
        return cls(pixels=checkerboard_patch(size, channels), offset=offset)

    @property
    def size(self):
        return self.pixels.shape[-1]

    def placement(self, height, width):
        h, w = self.pixels.shape[1], self.pixels.shape[2]
        top = height - h - self.offset[0]
        left = width - w - self.offset[1]
        if top < 0 or left < 0 or top + h > height or left + w > width:
            raise ShapeError("apply_patch", (height, width), self.pixels.shape)
        return top, left, h, w

    def save(self, path):
        path = str(path)
        self.pixels.astype("<f4").tofile(path)
        with open(path + ".json", "w") as fh:
            json.dump(
                {"shape": list(self.pixels.shape), "offset": list(self.offset), "dtype": "float32-le"},
                fh,
            )

    @classmethod
    def load(cls, path):
        path = str(path)
        with open(path + ".json") as fh:
            meta = json.load(fh)
        pixels = np.fromfile(path, dtype="<f4").reshape(meta["shape"])
        return cls(pixels=pixels, offset=tuple(meta["offset"]))


@dataclass
class LinfBall:
    """An l-infinity ball of radius epsilon around a base image, intersected
    with the [0,1] pixel box."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise PoisonBenchError(f"negative epsilon: {self.radius}")


def project_linf(x, ball):
    """Clamp x into the ball and into [0,1].  Idempotent."""
    x = np.asarray(x)
    if x.shape != ball.center.shape:
        raise ShapeError("project_linf", x.shape, ball.center.shape)
    if np.isfinite(ball.radius):
        lo = ball.center - ball.radius
        hi = ball.center + ball.radius
        out = np.clip(x, lo, hi)
    else:
        out = x.copy()
    np.clip(out, 0.0, 1.0, out=out)
    return out.astype(x.dtype, copy=False)


def project_simplex(c):
    """Euclidean projection onto {c : sum c = 1, c >= 0}.

    Sort-based threshold: with u the descending sort of c,
    rho = max{j : u_j + (1 - sum_{i<=j} u_i)/j > 0}, the projection is
    max(c + tau, 0) with tau = (1 - sum_{i<=rho} u_i)/rho.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ShapeError("project_simplex", c.shape)
    u = np.sort(c)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, c.size + 1)
    cond = u + (1.0 - css) / j > 0
    rho = int(np.nonzero(cond)[0][-1])
    tau = (1.0 - css[rho]) / (rho + 1)
    return np.maximum(c + tau, 0.0)


def apply_patch(image, patch):
    """Overwrite the patch block; every other pixel is bitwise unchanged."""
    image = np.asarray(image)
    if image.ndim == 3:
        c, h, w = image.shape
        top, left, ph, pw = patch.placement(h, w)
        if patch.pixels.shape[0] != c:
            raise ShapeError("apply_patch", image.shape, patch.pixels.shape)
        out = image.copy()
        out[:, top:top + ph, left:left + pw] = patch.pixels.astype(image.dtype)
        return out
    if image.ndim == 4:
        out = image.copy()
        c, h, w = image.shape[1:]
        top, left, ph, pw = patch.placement(h, w)
        out[:, :, top:top + ph, left:left + pw] = patch.pixels.astype(image.dtype)
        return out
    raise ShapeError("apply_patch", image.shape)


def blend_watermark(base, target, opacity=0.3):
    """(1 - opacity)*base + opacity*target, clamped to [0,1]."""
    base, target = np.asarray(base), np.asarray(target)
    if base.shape != target.shape:
        raise ShapeError("blend_watermark", base.shape, target.shape)
    if not 0.0 <= opacity <= 1.0:
        raise PoisonBenchError(f"opacity outside [0,1]: {opacity}")
    out = (1.0 - opacity) * base.astype(np.float64) + opacity * target.astype(np.float64)
    return np.clip(out, 0.0, 1.0).astype(base.dtype)


def pgd_maximize_loss(x0, labels, model, steps=20, step_size=4.0 / 255.0, ball=None):
    """Sign-gradient ascent on the model's cross-entropy, projected each step.

    x0 is [N,C,H,W] (or [C,H,W], treated as a batch of one); ball must carry
    the matching centers and a finite radius.  Ascent is tracked per sample:
    the returned image for each sample is its highest-loss evaluated iterate,
    which guarantees loss(out) >= loss(x0) elementwise.
    """
    x0 = np.asarray(x0)
    squeeze = x0.ndim == 3
    if squeeze:
        x0 = x0[None]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if ball is None or not np.isfinite(ball.radius):
        raise PoisonBenchError("pgd_maximize_loss requires a finite-radius ball")
    if ball.center.shape != x0.shape:
        if ball.center.shape == x0.shape[1:]:
            ball = LinfBall(ball.center[None], ball.radius)
        else:
            raise ShapeError("pgd_maximize_loss", x0.shape, ball.center.shape)

    def per_sample_loss_and_grad(x):
        xt = T.Tensor(x.copy(), requires_grad=True)
        logits = model.logits_from_pixels(xt)
        losses = T.softmax_cross_entropy(logits, labels, reduction="none")
        T.backward(T.tensor_sum(losses))
        return losses.data.copy(), xt.grad

    def per_sample_loss(x):
        with T.no_grad():
            logits = model.logits_from_pixels(T.Tensor(x))
            return T.softmax_cross_entropy(logits, labels, reduction="none").data.copy()

    x = project_linf(x0, ball)
    best = x.copy()
    if steps == 0:
        return (best[0] if squeeze else best)
    best_loss = None
    for _ in range(int(steps)):
        losses, grad = per_sample_loss_and_grad(x)
        if best_loss is None:
            best_loss = losses
        else:
            improved = losses > best_loss
            best[improved] = x[improved]
            best_loss = np.maximum(best_loss, losses)
        x = project_linf(x + np.asarray(step_size, dtype=x.dtype) * np.sign(grad), ball)
    final_losses = per_sample_loss(x)
    improved = final_losses > best_loss
    best[improved] = x[improved]
    return best[0] if squeeze else best
