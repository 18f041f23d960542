"""The four poison-crafting optimizers behind a pluggable attack registry.

Feature collision (penalty and constrained forms), convex polytope
(alternating simplex/image minimization), clean-label backdoor (PGD plus
trigger), and hidden-trigger backdoor (feature collision with patched
targets).  Every crafted poison keeps its base-class label and, under a
finite epsilon, stays inside the l-infinity ball of its base image and in
[0,1].

Crafting models are anything exposing `features_from_pixels` (and, for the
clean-label backdoor, `logits_from_pixels`); an ensemble is a list of them
and the objective is the mean over members.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import PoisonSet
from .errors import CraftError, PoisonBenchError
from .optim import Adam
from .perturb import LinfBall, PatchSpec, apply_patch, blend_watermark, pgd_maximize_loss, project_linf, project_simplex


@dataclass
class FCConfig:
    """Feature collision.  With epsilon unset, the pixel-space penalty
    (beta) form is used; with epsilon set, the penalty is dropped and
    iterates are projected onto the l-infinity ball instead."""

    beta: float | None = None  # None: 0.25 * (feature_dim / input_dim)^2
    step_size: float = 1e-4
    max_iters: int = 1200
    watermark_opacity: float = 0.3
    epsilon: float | None = None


@dataclass
class CPConfig:
    lr: float = 0.04
    max_iters: int = 4000
    loss_tol: float = 1e-6
    epsilon: float = 25.5 / 255.0
    inner_tol: float = 1e-9
    inner_max_steps: int = 200


@dataclass
class CLBDConfig:
    pgd_steps: int = 20
    pgd_step: float = 4.0 / 255.0
    epsilon: float = 16.0 / 255.0
    patch: PatchSpec = field(default_factory=lambda: PatchSpec.checkerboard(3))


@dataclass
class HTBDConfig:
    lr0: float = 1e-3
    lr_decay: float = 0.95
    decay_every: int = 2000
    max_iters: int = 5000
    epsilon: float = 16.0 / 255.0
    patch: PatchSpec = field(default_factory=lambda: PatchSpec.checkerboard(8))
    pairing_refresh: int = 100
    sample_with_replacement: bool = False


@dataclass
class NoOpConfig:
    """Control arm: poisons are exactly the base images."""


@dataclass
class CraftingContext:
    """Everything an attack needs for one trial.

    models: the attacker's crafting model(s); one entry for a single-model
    attack, several for an ensemble.  target_pool holds target-class
    training images for the hidden-trigger attack.
    """

    models: list
    target_image: np.ndarray  # [C,H,W]
    base_images: np.ndarray  # [J,C,H,W]
    base_ids: np.ndarray
    base_class: int
    target_class: int
    seed: int = 0
    target_pool: np.ndarray | None = None  # [P,C,H,W]

    def __post_init__(self):
        if not isinstance(self.models, (list, tuple)):
            self.models = [self.models]
        if len(self.models) < 1:
            raise PoisonBenchError("crafting needs at least one model")
        self.target_image = np.asarray(self.target_image, dtype=np.float32)
        self.base_images = np.asarray(self.base_images, dtype=np.float32)
        self.base_ids = np.asarray(self.base_ids, dtype=np.int64)

    @property
    def budget(self):
        return self.base_images.shape[0]

    def rng(self):
        return np.random.default_rng(np.random.PCG64(self.seed))


def _ensemble_features(models, x_np):
    """Features of each member for a fixed (non-differentiated) batch."""
    out = []
    with T.no_grad():
        for m in models:
            out.append(m.features_from_pixels(T.Tensor(x_np)).data.copy())
    return out


def _feature_match_loss_and_grad(models, x_np, targets):
    """mean_k sum_j ||f_k(x_j) - targets_k[j]||^2 and its gradient in x."""
    x = T.Tensor(x_np.copy(), requires_grad=True)
    total = None
    for m, tgt in zip(models, targets):
        diff = T.sub(m.features_from_pixels(x), T.Tensor(tgt))
        term = T.tensor_sum(T.mul(diff, diff))
        total = term if total is None else T.add(total, term)
    if len(models) > 1:
        total = T.scale(total, 1.0 / len(models))
    T.backward(total)
    return float(total.data), x.grad


def _check_finite(value, attack):
    if not np.isfinite(value):
        raise CraftError(f"{attack}: non-finite crafting objective")


def craft_fc(ctx, cfg):
    """Feature collision: drive each poison's features onto the target's.

    Penalty form alternates a feature-gradient step with the closed-form
    proximal step of beta*||x - x_b||^2; the constrained form replaces the
    prox with projection onto the epsilon-ball.  Poisons start at a 30%
    watermark of the target over each base.
    """
    base = ctx.base_images
    j, c, h, w = base.shape
    x = np.stack([blend_watermark(base[i], ctx.target_image, cfg.watermark_opacity) for i in range(j)])

    feat_targets = _ensemble_features(ctx.models, ctx.target_image[None])
    targets = [np.repeat(fk, j, axis=0) for fk in feat_targets]

    if cfg.epsilon is None:
        feature_dim = targets[0].shape[1]
        input_dim = c * h * w
        beta = cfg.beta if cfg.beta is not None else 0.25 * (feature_dim / input_dim) ** 2
        ball = None
    else:
        beta = None
        ball = LinfBall(base, float(cfg.epsilon))
        x = project_linf(x, ball)  # start feasible; the watermark leaves the ball

    lam = float(cfg.step_size)
    trace = []
    loss = None
    for _ in range(int(cfg.max_iters)):
        loss, grad = _feature_match_loss_and_grad(ctx.models, x, targets)
        _check_finite(loss, "fc")
        trace.append(loss)
        x_forward = x - lam * grad
        if ball is None:
            x = (x_forward + lam * beta * base) / (1.0 + lam * beta)
            x = np.clip(x, 0.0, 1.0)
        else:
            x = project_linf(x_forward, ball)
        x = x.astype(np.float32)

    final, _grad = _feature_match_loss_and_grad(ctx.models, x, targets)
    _check_finite(final, "fc")
    trace.append(final)
    return PoisonSet(
        poisons=x,
        base_ids=ctx.base_ids,
        label=ctx.base_class,
        epsilon=float("inf") if cfg.epsilon is None else float(cfg.epsilon),
        attack="fc",
        final_objective=final,
        objective_trace=trace,
    )


def _cp_residual_parts(feats, target_feat, coeffs):
    """Normalized CP residual for one member given fixed numpy features."""
    t_norm2 = float(target_feat @ target_feat)
    r = target_feat - coeffs @ feats
    return 0.5 * float(r @ r) / t_norm2


def _cp_solve_coeffs(feats, target_feat, coeffs, inner_tol, inner_max_steps):
    """Projected gradient on the simplex for fixed poison features.

    Fixed step 2/(J*L) with L the power-iteration estimate of the largest
    eigenvalue of F F^T / ||f_t||^2.
    """
    j = feats.shape[0]
    t_norm2 = float(target_feat @ target_feat)
    gram = (feats @ feats.T) / t_norm2
    v = np.ones(j) / np.sqrt(j)
    for _ in range(30):
        nv = gram @ v
        norm = np.linalg.norm(nv)
        if norm < 1e-18:
            break
        v = nv / norm
    lip = max(float(v @ (gram @ v)), 1e-12)
    step = 2.0 / (j * lip)
    b = (feats @ target_feat) / t_norm2
    prev = _cp_residual_parts(feats, target_feat, coeffs)
    for _ in range(int(inner_max_steps)):
        grad = gram @ coeffs - b
        coeffs = project_simplex(coeffs - step * grad)
        cur = _cp_residual_parts(feats, target_feat, coeffs)
        if abs(prev - cur) <= inner_tol:
            prev = cur
            break
        prev = cur
    return coeffs, prev


def craft_cp(ctx, cfg):
    """Convex polytope: pull the target's features into the convex hull of
    the poisons' features.

    Alternates (a) an exact-ish simplex-projected gradient solve for the
    convex coefficients with (b) one ADAM step on all poison images,
    projecting each onto its epsilon-ball.  Stops when the normalized
    residual reaches loss_tol.  Coefficients are per ensemble member.
    """
    base = ctx.base_images
    j = base.shape[0]
    x = base.copy()
    ball = LinfBall(base, float(cfg.epsilon))

    target_feats = [fk[0] for fk in _ensemble_features(ctx.models, ctx.target_image[None])]
    for tf in target_feats:
        if float(tf @ tf) < 1e-8:
            raise CraftError("cp: target feature norm below 1e-8; normalized residual undefined")

    coeffs = [np.ones(j) / j for _ in ctx.models]
    x_tensor = T.Tensor(x, requires_grad=True)
    opt = Adam([x_tensor], lr=cfg.lr, weight_decay=0.0)
    trace = []
    residual = None
    for _ in range(int(cfg.max_iters)):
        # (a) coefficients at fixed images
        residual = 0.0
        member_feats = _ensemble_features(ctx.models, x_tensor.data)
        for k in range(len(ctx.models)):
            coeffs[k], res_k = _cp_solve_coeffs(
                member_feats[k], target_feats[k], coeffs[k], cfg.inner_tol, cfg.inner_max_steps
            )
            residual += res_k
        residual /= len(ctx.models)
        _check_finite(residual, "cp")
        trace.append(residual)
        if residual <= cfg.loss_tol:
            break

        # (b) one ADAM step on the images at fixed coefficients
        total = None
        for k, m in enumerate(ctx.models):
            feats = m.features_from_pixels(x_tensor)
            combo = T.matmul(T.Tensor(coeffs[k][None].astype(np.float32)), feats)
            diff = T.sub(T.Tensor(target_feats[k][None]), combo)
            t_norm2 = float(target_feats[k] @ target_feats[k])
            term = T.scale(T.tensor_sum(T.mul(diff, diff)), 0.5 / t_norm2)
            total = term if total is None else T.add(total, term)
        if len(ctx.models) > 1:
            total = T.scale(total, 1.0 / len(ctx.models))
        _check_finite(float(total.data), "cp")
        T.backward(total)
        opt.step()
        opt.zero_grad()
        x_tensor.data = project_linf(x_tensor.data, ball)

    return PoisonSet(
        poisons=x_tensor.data.astype(np.float32),
        base_ids=ctx.base_ids,
        label=ctx.base_class,
        epsilon=float(cfg.epsilon),
        attack="cp",
        final_objective=residual,
        objective_trace=trace,
        coefficients=np.stack(coeffs),
    )


class _EnsembleLogits:
    """Mean-logit wrapper so batched PGD sees one model."""

    def __init__(self, models):
        self.models = models

    def logits_from_pixels(self, x, train=False):
        total = None
        for m in self.models:
            term = m.logits_from_pixels(x, train=train)
            total = term if total is None else T.add(total, term)
        if len(self.models) > 1:
            total = T.scale(total, 1.0 / len(self.models))
        return total


def craft_clbd(ctx, cfg):
    """Clean-label backdoor: adversarially perturb each base, then stamp the
    trigger patch.

    The patched image is subject to the l-infinity constraint, so the final
    poison is the patched adversarial example projected back onto the
    epsilon-ball of its base; the full-strength patch appears only on the
    target at evaluation time.
    """
    base = ctx.base_images
    labels = np.full(base.shape[0], ctx.base_class, dtype=np.int64)
    ball = LinfBall(base, float(cfg.epsilon))
    model = _EnsembleLogits(ctx.models)
    adversarial = pgd_maximize_loss(
        base, labels, model, steps=cfg.pgd_steps, step_size=cfg.pgd_step, ball=ball
    )
    patched = apply_patch(adversarial, cfg.patch)
    poisons = project_linf(patched, ball)

    with T.no_grad():
        logits = model.logits_from_pixels(T.Tensor(poisons))
        final = float(T.softmax_cross_entropy(logits, labels).data)
    return PoisonSet(
        poisons=poisons.astype(np.float32),
        base_ids=ctx.base_ids,
        label=ctx.base_class,
        epsilon=float(cfg.epsilon),
        attack="clbd",
        final_objective=final,
    )


def craft_htbd(ctx, cfg):
    """Hidden-trigger backdoor: poisons collide in feature space with
    patched target-class images but carry no patch themselves.

    Partners are drawn from the target-class pool (without replacement by
    default) and re-assigned every `pairing_refresh` iterations; plain SGD
    with the 0.95-per-2000-iterations decay schedule, projected onto the
    epsilon-balls each step.
    """
    if ctx.target_pool is None or len(ctx.target_pool) == 0:
        raise CraftError("htbd: empty target-class pool")
    base = ctx.base_images
    j = base.shape[0]
    ball = LinfBall(base, float(cfg.epsilon))
    rng = ctx.rng()
    pool = np.asarray(ctx.target_pool, dtype=np.float32)

    def sample_partners():
        if cfg.sample_with_replacement or len(pool) < j:
            idx = rng.integers(0, len(pool), size=j)
        else:
            idx = rng.permutation(len(pool))[:j]
        patched = apply_patch(pool[idx], cfg.patch)
        return [fk for fk in _ensemble_features(ctx.models, patched)], patched

    x = base.copy()
    targets, patched = sample_partners()
    trace = []
    loss = None
    for it in range(int(cfg.max_iters)):
        if it > 0 and cfg.pairing_refresh > 0 and it % cfg.pairing_refresh == 0:
            targets, patched = sample_partners()
        lr = cfg.lr0 * cfg.lr_decay ** (it // cfg.decay_every)
        loss, grad = _feature_match_loss_and_grad(ctx.models, x, targets)
        _check_finite(loss, "htbd")
        trace.append(loss)
        x = project_linf(x - lr * grad, ball).astype(np.float32)

    final, _ = _feature_match_loss_and_grad(ctx.models, x, targets)
    trace.append(final)
    return PoisonSet(
        poisons=x,
        base_ids=ctx.base_ids,
        label=ctx.base_class,
        epsilon=float(cfg.epsilon),
        attack="htbd",
        final_objective=final,
        objective_trace=trace,
    )


def craft_noop(ctx, cfg):
    """Control: the "poisons" are the untouched base images."""
    return PoisonSet(
        poisons=ctx.base_images.copy(),
        base_ids=ctx.base_ids,
        label=ctx.base_class,
        epsilon=0.0,
        attack="noop",
        final_objective=0.0,
    )


_REGISTRY = {}

_CONFIG_TYPES = {
    "fc": FCConfig,
    "cp": CPConfig,
    "clbd": CLBDConfig,
    "htbd": HTBDConfig,
    "noop": NoOpConfig,
}


def register_attack(name, crafter, config_type=None):
    """Add a crafter to the registry; duplicate names are an error."""
    if name in _REGISTRY:
        raise PoisonBenchError(f"attack {name!r} already registered")
    _REGISTRY[name] = crafter
    if config_type is not None:
        _CONFIG_TYPES[name] = config_type


def get_attack(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise PoisonBenchError(f"unknown attack {name!r} (have {sorted(_REGISTRY)})")


def attack_names():
    return sorted(_REGISTRY)


def config_type(name):
    try:
        return _CONFIG_TYPES[name]
    except KeyError:
        raise PoisonBenchError(f"no config type for attack {name!r}")


def default_config(name):
    return config_type(name)()


register_attack("fc", craft_fc)
register_attack("cp", craft_cp)
register_attack("clbd", craft_clbd)
register_attack("htbd", craft_htbd)
register_attack("noop", craft_noop)

BACKDOOR_ATTACKS = {"clbd", "htbd"}


def is_backdoor(name):
    return name in BACKDOOR_ATTACKS
