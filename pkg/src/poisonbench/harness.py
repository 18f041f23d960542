"""Seeded trial sampling, trial execution, and success adjudication.

A trial: derive a per-trial seed from (master_seed, trial_index), sample the
attacker checkpoint, class pair, target and bases, craft poisons, train the
victim(s) for the configured mode, and adjudicate.  Trials are independent
and embarrassingly parallel; black-box trials adjudicate per held-out victim
and count each adjudication as one observation.
"""

from __future__ import annotations

import json
import multiprocessing
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks as attacklib
from .data import AugmentationPolicy, assemble_poisoned_trainset, compute_normalization, validate_poison_set
from .errors import CraftError, PoisonBenchError
from .models import architecture, load_checkpoint
from .perturb import apply_patch
from .seeding import mix64
from .stats import BenchmarkReport, render_trial_csv
from .training import (
    accuracy,
    finetune_e2e,
    finetune_linear,
    hyperparams,
    predict,
    scaled,
    train_from_scratch,
)

TRAINING_MODES = ("transfer_ffe", "transfer_e2e", "from_scratch")
THREAT_MODELS = ("white_box", "black_box")


@dataclass
class BenchmarkProtocol:
    attack: str = "fc"
    attack_config: object = None
    training_mode: str = "transfer_ffe"
    threat: str = "white_box"
    poison_budget: int = 25
    n_trials: int = 100
    attacker_arch: str = "conv_small"
    victim_archs: tuple = ("conv_wide", "conv_tiny")
    n_checkpoints: int = 10
    ensemble_size: int = 1  # crafting models drawn per trial
    finetune_hp: object = None  # default: set G
    e2e_hp: object = None  # default: FC baseline ADAM schedule
    scratch_hp: object = None  # default: B scaled /10
    scratch_augment: bool = False
    fixed_target_class: int | None = None
    fixed_base_class: int | None = None
    eval_flip: bool = False
    whole_class_metric: bool = True
    deterministic: bool = True

    def __post_init__(self):
        if self.training_mode not in TRAINING_MODES:
            raise PoisonBenchError(f"unknown training mode {self.training_mode!r}")
        if self.threat not in THREAT_MODELS:
            raise PoisonBenchError(f"unknown threat model {self.threat!r}")
        if self.attack_config is None:
            self.attack_config = attacklib.default_config(self.attack)
        if self.finetune_hp is None:
            self.finetune_hp = hyperparams("G")
        if self.e2e_hp is None:
            from .training import FC_BASELINE_E2E
            self.e2e_hp = FC_BASELINE_E2E
        if self.scratch_hp is None:
            self.scratch_hp = scaled(hyperparams("B"), 10)
        if (self.fixed_target_class is None) != (self.fixed_base_class is None):
            raise PoisonBenchError("fixed-pair mode needs both fixed classes")
        if self.fixed_target_class is not None and self.fixed_target_class == self.fixed_base_class:
            raise PoisonBenchError("fixed target and base classes must differ")


@dataclass
class BenchmarkEnv:
    """Loaded artifacts shared (read-only) by every trial."""

    train: object  # DatasetSplit
    test: object
    checkpoints: dict  # arch name -> ordered list of checkpoint paths

    def load_model(self, arch, index):
        paths = self.checkpoints.get(arch)
        if not paths:
            raise PoisonBenchError(f"no checkpoints for architecture {arch!r}")
        model, _ = load_checkpoint(paths[index % len(paths)])
        return model


@dataclass
class TrialSpec:
    trial_index: int
    master_seed: int
    seed: int
    checkpoint_id: int
    ensemble_checkpoint_ids: tuple
    target_image_id: int
    target_class: int
    base_class: int
    base_image_ids: tuple
    poison_budget: int
    training_mode: str
    threat: str
    attack: str
    victim_checkpoint_ids: tuple


@dataclass
class TrialResult:
    spec: TrialSpec
    victim_outcomes: list = field(default_factory=list)  # one bool per victim
    victim_predictions: list = field(default_factory=list)
    clean_test_acc: float | None = None
    poisoned_test_acc: float | None = None
    craft_final_loss: float | None = None
    whole_class_rate: float | None = None
    stealth_ok: bool | None = None  # backdoor: unpatched target still correct
    hygiene_ok: bool | None = None  # black box: no parameter collision
    error: str | None = None
    wall_s: float = 0.0

    @property
    def n_observations(self):
        return len(self.victim_outcomes)

    @property
    def successes(self):
        return sum(1 for o in self.victim_outcomes if o)

    @property
    def success_score(self):
        return self.successes / self.n_observations if self.victim_outcomes else 0.0


def sample_trial(master_seed, trial_index, protocol, env):
    """Reproducible draws, in a fixed documented order.

    Per-trial seed = mix64(master_seed, trial_index); then: attacker
    checkpoint, (target, base) class pair (uniform, distinct), target image
    from the test split, J bases without replacement from the training
    split, victim checkpoints, extra ensemble checkpoints.
    """
    seed = mix64(master_seed, trial_index)
    rng = np.random.default_rng(np.random.PCG64(seed))
    checkpoint_id = int(rng.integers(protocol.n_checkpoints))

    class_count = env.train.class_count
    if protocol.fixed_target_class is not None:
        target_class, base_class = protocol.fixed_target_class, protocol.fixed_base_class
    else:
        pair = rng.choice(class_count, size=2, replace=False)
        target_class, base_class = int(pair[0]), int(pair[1])

    test_pool = env.test.indices_of_class(target_class)
    if len(test_pool) == 0:
        raise PoisonBenchError(f"no test images of class {target_class}")
    target_idx = int(test_pool[rng.integers(len(test_pool))])

    train_pool = env.train.indices_of_class(base_class)
    if protocol.poison_budget > len(train_pool):
        raise PoisonBenchError(
            f"budget {protocol.poison_budget} exceeds base-class population {len(train_pool)}"
        )
    base_sel = rng.permutation(len(train_pool))[:protocol.poison_budget]
    base_ids = tuple(int(env.train.ids[i]) for i in train_pool[base_sel])

    victim_ids = tuple(int(rng.integers(protocol.n_checkpoints)) for _ in protocol.victim_archs)
    extra = tuple(int(rng.integers(protocol.n_checkpoints)) for _ in range(protocol.ensemble_size - 1))

    return TrialSpec(
        trial_index=trial_index,
        master_seed=master_seed,
        seed=seed,
        checkpoint_id=checkpoint_id,
        ensemble_checkpoint_ids=(checkpoint_id,) + extra,
        target_image_id=int(env.test.ids[target_idx]),
        target_class=target_class,
        base_class=base_class,
        base_image_ids=base_ids,
        poison_budget=protocol.poison_budget,
        training_mode=protocol.training_mode,
        threat=protocol.threat,
        attack=protocol.attack,
        victim_checkpoint_ids=victim_ids,
    )


def _eval_patch(protocol):
    return getattr(protocol.attack_config, "patch", None)


def evaluate_success(victim, spec, env, protocol):
    """Triggerless: target misclassified as the base class.  Backdoor: the
    patched target misclassified as the base class (the stealth flag records
    whether the unpatched target stays correct)."""
    target = env.test.images[env.test.index_of(spec.target_image_id)]
    if protocol.eval_flip:
        target = target[:, :, ::-1].copy()
    backdoor = attacklib.is_backdoor(spec.attack)
    aux = {}
    if backdoor:
        patch = _eval_patch(protocol)
        if patch is None:
            raise PoisonBenchError(f"attack {spec.attack} has no patch for evaluation")
        patched = apply_patch(target, patch)
        pred = int(predict(victim, patched)[0])
        aux["unpatched_pred"] = int(predict(victim, target)[0])
        aux["stealth_ok"] = aux["unpatched_pred"] == spec.target_class
        if protocol.whole_class_metric:
            cls_idx = env.test.indices_of_class(spec.target_class)
            patched_cls = apply_patch(env.test.images[cls_idx], patch)
            preds = predict(victim, patched_cls)
            aux["whole_class_rate"] = float((preds == spec.base_class).mean())
    else:
        pred = int(predict(victim, target)[0])
    return pred == spec.base_class, pred, aux


def _train_victim(model_or_spec, poisoned, protocol, seed, clean_norm):
    if protocol.training_mode == "transfer_ffe":
        return finetune_linear(model_or_spec, poisoned, hp=protocol.finetune_hp, seed=seed)
    if protocol.training_mode == "transfer_e2e":
        return finetune_e2e(model_or_spec, poisoned, hp=protocol.e2e_hp, seed=seed)
    policy = AugmentationPolicy(random_crop=protocol.scratch_augment,
                                horizontal_flip=protocol.scratch_augment)
    return train_from_scratch(model_or_spec, poisoned, protocol.scratch_hp, policy,
                              seed=seed, normalization=clean_norm)


def run_trial(spec, protocol, env):
    """Craft, poison, train, adjudicate.  Crafting failures are recorded on
    the result and excluded from the success-rate denominator."""
    t0 = time.monotonic()
    attacker = env.load_model(protocol.attacker_arch, spec.checkpoint_id)
    crafting_models = [attacker]
    for extra_id in spec.ensemble_checkpoint_ids[1:]:
        crafting_models.append(env.load_model(protocol.attacker_arch, extra_id))

    train = env.train
    base_indices = [train.index_of(i) for i in spec.base_image_ids]
    target = env.test.images[env.test.index_of(spec.target_image_id)]
    pool_idx = train.indices_of_class(spec.target_class)
    ctx = attacklib.CraftingContext(
        models=crafting_models,
        target_image=target,
        base_images=train.images[base_indices],
        base_ids=np.asarray(spec.base_image_ids),
        base_class=spec.base_class,
        target_class=spec.target_class,
        seed=spec.seed,
        target_pool=train.images[pool_idx],
    )
    result = TrialResult(spec=spec)
    try:
        poisons = attacklib.get_attack(spec.attack)(ctx, protocol.attack_config)
        validate_poison_set(poisons, train)
    except CraftError as exc:
        result.error = str(exc)
        result.wall_s = time.monotonic() - t0
        return result
    result.craft_final_loss = poisons.final_objective

    poisoned = assemble_poisoned_trainset(train, poisons)
    clean_norm = compute_normalization(train)

    if protocol.training_mode == "from_scratch":
        victim_sources = [architecture(name, in_size=train.images.shape[-1],
                                       num_classes=train.class_count)
                          for name in protocol.victim_archs]
    elif protocol.threat == "white_box":
        victim_sources = [attacker]
    else:
        victim_sources = [env.load_model(arch, vid)
                          for arch, vid in zip(protocol.victim_archs, spec.victim_checkpoint_ids)]

    poisoned_accs = []
    clean_accs = []
    for v, source in enumerate(victim_sources):
        train_seed = mix64(spec.seed, 100 + v)
        if protocol.threat == "black_box" and protocol.training_mode != "from_scratch":
            clash = source.fingerprint() == attacker.fingerprint()
            if clash:
                raise PoisonBenchError("black-box victim shares the crafting model's parameters")
            result.hygiene_ok = True if result.hygiene_ok is None else result.hygiene_ok
        victim = _train_victim(source, poisoned, protocol, train_seed, clean_norm)
        ok, pred, aux = evaluate_success(victim, spec, env, protocol)
        result.victim_outcomes.append(bool(ok))
        result.victim_predictions.append(pred)
        if "stealth_ok" in aux:
            result.stealth_ok = aux["stealth_ok"] if result.stealth_ok is None else (result.stealth_ok and aux["stealth_ok"])
        if "whole_class_rate" in aux:
            prev = result.whole_class_rate or 0.0
            result.whole_class_rate = prev + aux["whole_class_rate"] / len(victim_sources)
        poisoned_accs.append(accuracy(victim, env.test))

        clean_victim = _train_victim(source, train, protocol, train_seed, clean_norm)
        clean_accs.append(accuracy(clean_victim, env.test))

    result.poisoned_test_acc = float(np.mean(poisoned_accs))
    result.clean_test_acc = float(np.mean(clean_accs))
    result.wall_s = time.monotonic() - t0
    return result


def trial_csv_row(result, env, protocol):
    spec = result.spec
    if result.error is not None:
        success = "error"
    else:
        success = f"{result.success_score:.1f}" if result.n_observations > 1 else f"{float(result.successes):.1f}"
    return {
        "trial_index": str(spec.trial_index),
        "seed": str(spec.seed),
        "attack": spec.attack,
        "mode": spec.training_mode,
        "threat": spec.threat,
        "target_class": str(spec.target_class),
        "base_class": str(spec.base_class),
        "target_id": str(spec.target_image_id),
        "J": str(spec.poison_budget),
        "N": str(len(env.train)),
        "success": success,
        "clean_test_acc": "" if result.clean_test_acc is None else f"{result.clean_test_acc:.4f}",
        "poisoned_test_acc": "" if result.poisoned_test_acc is None else f"{result.poisoned_test_acc:.4f}",
        "craft_final_loss": "" if result.craft_final_loss is None else f"{result.craft_final_loss:.6g}",
        "wall_s": "0.000" if protocol.deterministic else f"{result.wall_s:.3f}",
    }


_WORKER = {}


def _pool_init(protocol, env, master_seed):
    _WORKER["args"] = (protocol, env, master_seed)


def _pool_run(trial_index):
    protocol, env, master_seed = _WORKER["args"]
    spec = sample_trial(master_seed, trial_index, protocol, env)
    return run_trial(spec, protocol, env)


def run_benchmark(protocol, env, master_seed, out_dir=None, jobs=1):
    """Execute the protocol's trials and aggregate a report.

    Writes per-trial CSV and summary JSON into out_dir when given.  With the
    deterministic flag the outputs are byte-identical across reruns and
    across worker counts.
    """
    indices = list(range(protocol.n_trials))
    if jobs > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=jobs, initializer=_pool_init,
                      initargs=(protocol, env, master_seed)) as pool:
            results = pool.map(_pool_run, indices)
    else:
        results = []
        for i in indices:
            spec = sample_trial(master_seed, i, protocol, env)
            results.append(run_trial(spec, protocol, env))

    results.sort(key=lambda r: r.spec.trial_index)
    ok_results = [r for r in results if r.error is None]
    successes = sum(r.successes for r in ok_results)
    n = sum(r.n_observations for r in ok_results)
    report = BenchmarkReport(
        attack=protocol.attack,
        mode=protocol.training_mode,
        threat=protocol.threat,
        successes=successes,
        n=n,
        rows=[trial_csv_row(r, env, protocol) for r in results],
        errored_trials=len(results) - len(ok_results),
        timestamp="" if protocol.deterministic else time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "trials.csv"), "w") as fh:
            fh.write(render_trial_csv(report.rows))
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            fh.write(report.summary_json())
    return report, results


def budget_size_cells(budgets=(5, 10, 25, 50), poison_fraction=0.01, class_count=10):
    """The (J, N, per_class) grid that holds J/N at poison_fraction."""
    cells = []
    for j in budgets:
        n = round(j / poison_fraction)
        per_class, rem = divmod(n, class_count)
        if rem:
            raise PoisonBenchError(f"N={n} not divisible by {class_count} classes")
        cells.append({"J": int(j), "N": int(n), "per_class": int(per_class)})
    return cells
