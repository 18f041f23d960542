"""Operator surface: pretrain, craft, run-trial, benchmark, report, gradcheck.

Exit codes: 0 success, 1 configuration error, 2 runtime error.  Errors also
print a machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from fractions import Fraction

import numpy as np

from . import attacks as attacklib
from .config import default_config, load_config
from .data import load_cifar_binary, save_poison_set, synth_generate
from .errors import ConfigError, PoisonBenchError
from .harness import (
    BenchmarkEnv,
    BenchmarkProtocol,
    budget_size_cells,
    run_benchmark,
    run_trial,
    sample_trial,
    trial_csv_row,
)
from .models import ARCHITECTURES, architecture
from .stats import BenchmarkReport, parse_trial_csv, render_table_csv, render_table_json, render_table_markdown
from .training import AdversarialTraining, hyperparams, pretrain, scaled
from .data import AugmentationPolicy

DEFAULT_OUT = os.environ.get("POISONBENCH_OUT", "poisonbench_out")


def _hp_for_arch(cfg, arch_name):
    set_id = cfg.pretrain.hp_set
    if set_id == "auto":
        set_id = "C" if architecture(arch_name, in_size=cfg.data.image_size).use_batchnorm else "B"
    return scaled(hyperparams(set_id), cfg.pretrain.epoch_scale)


def build_datasets(cfg):
    """(pretrain_train, pretrain_test, finetune_train, finetune_test)."""
    d = cfg.data
    if d.source == "synthetic":
        ft_train, ft_test = synth_generate(d.seed, class_count=d.class_count, per_class=d.per_class,
                                           size=d.image_size, test_per_class=d.test_per_class,
                                           palette="finetune")
        pre_train, pre_test = synth_generate(d.pretrain_seed, class_count=d.class_count,
                                             per_class=d.pretrain_per_class, size=d.image_size,
                                             test_per_class=d.pretrain_test_per_class,
                                             palette="pretrain")
        return pre_train, pre_test, ft_train, ft_test
    ft_train = load_cifar_binary(d.paths["train"])
    ft_test = load_cifar_binary(d.paths["test"])
    pre_train = load_cifar_binary(d.paths["pretrain_train"]) if "pretrain_train" in d.paths else ft_train
    pre_test = load_cifar_binary(d.paths["pretrain_test"]) if "pretrain_test" in d.paths else ft_test
    return pre_train, pre_test, ft_train, ft_test


def archs_needed(cfg):
    names = [cfg.pretrain.arch]
    if cfg.benchmark.threat == "black_box" and cfg.benchmark.mode != "from_scratch":
        names.extend(a for a in cfg.benchmark.victim_archs if a not in names)
    return names


def ensure_checkpoints(cfg, pre_train, pre_test, out_dir, log=lambda *_: None):
    """Pretrain any missing checkpoints; existing files are reused."""
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    result = {}
    for arch_name in archs_needed(cfg):
        paths = [os.path.join(ckpt_dir, f"{arch_name}_ckpt{k:02d}.pbck")
                 for k in range(cfg.pretrain.n_checkpoints)]
        if not all(os.path.exists(p) for p in paths):
            log(f"pretraining {cfg.pretrain.n_checkpoints} {arch_name} checkpoints")
            spec = architecture(arch_name, in_size=pre_train.images.shape[-1],
                                num_classes=pre_train.class_count)
            hp = _hp_for_arch(cfg, arch_name)
            policy = AugmentationPolicy(random_crop=cfg.pretrain.augment,
                                        horizontal_flip=cfg.pretrain.augment)
            adv = None
            if cfg.pretrain.adversarial:
                adv = AdversarialTraining(steps=cfg.pretrain.adversarial_steps,
                                          epsilon=cfg.pretrain.adversarial_epsilon)
            made = pretrain(spec, pre_train, pre_test, hp, policy, seed=cfg.pretrain.seed,
                            n_checkpoints=cfg.pretrain.n_checkpoints, out_dir=ckpt_dir,
                            adversarial=adv)
            assert sorted(made) == sorted(paths)
        result[arch_name] = paths
    return result


def build_protocol(cfg, n_trials=None, attack=None):
    b = cfg.benchmark
    name = attack or cfg.attack.name
    section = cfg.attack if name == cfg.attack.name else replace(cfg.attack, name=name, params={})
    finetune_hp = scaled(hyperparams(b.finetune_hp_set), b.finetune_epoch_scale)
    return BenchmarkProtocol(
        attack=name,
        attack_config=section.build_config(),
        training_mode=b.mode,
        threat=b.threat,
        poison_budget=b.budget,
        n_trials=n_trials if n_trials is not None else b.n_trials,
        attacker_arch=cfg.pretrain.arch,
        victim_archs=b.victim_archs,
        n_checkpoints=cfg.pretrain.n_checkpoints,
        ensemble_size=b.ensemble_size,
        finetune_hp=finetune_hp,
        scratch_hp=scaled(hyperparams("B"), cfg.pretrain.epoch_scale),
        scratch_augment=b.scratch_augment,
        fixed_target_class=b.fixed_target_class,
        fixed_base_class=b.fixed_base_class,
        eval_flip=b.eval_flip,
        whole_class_metric=b.whole_class_metric,
        deterministic=cfg.runtime.deterministic,
    )


def _write_resolved(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        fh.write(cfg.canonical_json())
    with open(os.path.join(out_dir, "config_hash.txt"), "w") as fh:
        fh.write(cfg.config_hash() + "\n")


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "deterministic", False):
        cfg.runtime.deterministic = True
    if getattr(args, "jobs", None):
        cfg.runtime.parallelism = args.jobs
    if getattr(args, "out", None):
        cfg.runtime.out_dir = args.out
    if not cfg.runtime.out_dir:
        cfg.runtime.out_dir = DEFAULT_OUT
    if getattr(args, "attack", None):
        cfg.attack.name = args.attack
        cfg.attack.params = {}
    if getattr(args, "trials", None):
        cfg.benchmark.n_trials = args.trials
    return cfg


def cmd_pretrain(args):
    cfg = _load_cfg(args)
    pre_train, pre_test, _, _ = build_datasets(cfg)
    out_dir = cfg.runtime.out_dir
    _write_resolved(cfg, out_dir)
    ckpts = ensure_checkpoints(cfg, pre_train, pre_test, out_dir, log=lambda m: print(m))
    for arch_name, paths in ckpts.items():
        print(f"{arch_name}: {len(paths)} checkpoints in {os.path.dirname(paths[0])}")
    return 0


def cmd_craft(args):
    cfg = _load_cfg(args)
    pre_train, pre_test, ft_train, ft_test = build_datasets(cfg)
    out_dir = cfg.runtime.out_dir
    _write_resolved(cfg, out_dir)
    ckpts = ensure_checkpoints(cfg, pre_train, pre_test, out_dir)
    env = BenchmarkEnv(train=ft_train, test=ft_test, checkpoints=ckpts)
    protocol = build_protocol(cfg)
    spec = sample_trial(args.master_seed, args.trial, protocol, env)
    attacker = env.load_model(protocol.attacker_arch, spec.checkpoint_id)
    models = [attacker] + [env.load_model(protocol.attacker_arch, i)
                           for i in spec.ensemble_checkpoint_ids[1:]]
    base_indices = [ft_train.index_of(i) for i in spec.base_image_ids]
    ctx = attacklib.CraftingContext(
        models=models,
        target_image=ft_test.images[ft_test.index_of(spec.target_image_id)],
        base_images=ft_train.images[base_indices],
        base_ids=np.asarray(spec.base_image_ids),
        base_class=spec.base_class,
        target_class=spec.target_class,
        seed=spec.seed,
        target_pool=ft_train.images[ft_train.indices_of_class(spec.target_class)],
    )
    poisons = attacklib.get_attack(protocol.attack)(ctx, protocol.attack_config)
    path = os.path.join(out_dir, f"poisons_{protocol.attack}_trial{args.trial}.bin")
    save_poison_set(poisons, path)
    print(json.dumps({
        "attack": protocol.attack, "trial": args.trial, "J": len(poisons),
        "final_objective": poisons.final_objective, "path": path,
    }, sort_keys=True))
    return 0


def cmd_run_trial(args):
    cfg = _load_cfg(args)
    pre_train, pre_test, ft_train, ft_test = build_datasets(cfg)
    out_dir = cfg.runtime.out_dir
    _write_resolved(cfg, out_dir)
    ckpts = ensure_checkpoints(cfg, pre_train, pre_test, out_dir)
    env = BenchmarkEnv(train=ft_train, test=ft_test, checkpoints=ckpts)
    protocol = build_protocol(cfg)
    spec = sample_trial(args.master_seed, args.trial, protocol, env)
    result = run_trial(spec, protocol, env)
    print(json.dumps(trial_csv_row(result, env, protocol), sort_keys=True, indent=2))
    return 0 if result.error is None else 2


def cmd_benchmark(args):
    cfg = _load_cfg(args)
    pre_train, pre_test, ft_train, ft_test = build_datasets(cfg)
    out_dir = cfg.runtime.out_dir
    _write_resolved(cfg, out_dir)
    ckpts = ensure_checkpoints(cfg, pre_train, pre_test, out_dir, log=lambda m: print(m))
    protocol = build_protocol(cfg)

    if cfg.benchmark.sweep_budgets:
        d = cfg.data
        cells = budget_size_cells(cfg.benchmark.sweep_budgets, cfg.benchmark.sweep_fraction,
                                  d.class_count)
        for cell in cells:
            train, test = synth_generate(d.seed, class_count=d.class_count,
                                         per_class=cell["per_class"], size=d.image_size,
                                         test_per_class=d.test_per_class, palette="finetune")
            env = BenchmarkEnv(train=train, test=test, checkpoints=ckpts)
            cell_protocol = replace(protocol, poison_budget=cell["J"])
            cell_dir = os.path.join(out_dir, f"J{cell['J']}_N{cell['N']}")
            report, _ = run_benchmark(cell_protocol, env, args.master_seed, out_dir=cell_dir,
                                      jobs=cfg.runtime.parallelism)
            report.config_hash = cfg.config_hash()
            print(f"J={cell['J']} N={cell['N']}: {report.rendered_rate()}")
        return 0

    env = BenchmarkEnv(train=ft_train, test=ft_test, checkpoints=ckpts)
    report, _ = run_benchmark(protocol, env, args.master_seed, out_dir=out_dir,
                              jobs=cfg.runtime.parallelism)
    report.config_hash = cfg.config_hash()
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        fh.write(report.summary_json())
    print(report.summary_json(), end="")
    return 0


def _infer_observations(rows):
    denom = 1
    for row in rows:
        if row["success"] == "error":
            continue
        frac = Fraction(row["success"]).limit_denominator(8)
        denom = max(denom, frac.denominator)
    return denom


def cmd_report(args):
    with open(args.csv) as fh:
        rows = parse_trial_csv(fh.read())
    if not rows:
        raise PoisonBenchError(f"{args.csv}: no trial rows")
    summary_path = os.path.join(os.path.dirname(os.path.abspath(args.csv)), "summary.json")
    if os.path.exists(summary_path):
        with open(summary_path) as fh:
            summary = json.load(fh)
        successes, n = summary["successes"], summary["n"]
    else:
        obs = _infer_observations(rows)
        ok_rows = [r for r in rows if r["success"] != "error"]
        successes = round(sum(float(r["success"]) for r in ok_rows) * obs)
        n = len(ok_rows) * obs
    report = BenchmarkReport(
        attack=rows[0]["attack"], mode=rows[0]["mode"], threat=rows[0]["threat"],
        successes=successes, n=n, rows=rows,
        errored_trials=sum(1 for r in rows if r["success"] == "error"),
    )
    renderer = {"markdown": render_table_markdown, "csv": render_table_csv, "json": render_table_json}[args.format]
    out = renderer([report])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out)
    else:
        print(out, end="")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_model_sweep, run_suite
    from .models import build_model, conv_small

    results = run_suite(seed=args.seed)
    worst_op = max(results, key=results.get)
    for name in sorted(results):
        print(f"{name:28s} {results[name]:.3e}")
    model = build_model(conv_small(in_size=8, num_classes=4), args.seed)
    rng = np.random.default_rng(args.seed)
    batch = rng.random((2, 3, 8, 8))
    labels = rng.integers(0, 4, size=2)
    e2e = run_model_sweep(model, batch, labels)
    print(f"{'conv_small end-to-end':28s} {e2e:.3e}")
    worst = max(max(results.values()), e2e)
    print(f"max relative error: {worst:.3e} ({'OK' if worst < 1e-4 else 'FAIL'}, worst op: {worst_op})")
    return 0 if worst < 1e-4 else 2


def make_parser():
    parser = argparse.ArgumentParser(prog="poisonbench",
                                     description="Benchmark engine for data-poisoning and backdoor attacks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, trial=False):
        p.add_argument("--config", help="JSON config path (defaults apply when omitted)")
        p.add_argument("--master-seed", type=int, default=0)
        p.add_argument("--out", help=f"output directory (default ${{POISONBENCH_OUT}} or {DEFAULT_OUT})")
        p.add_argument("--deterministic", action="store_true",
                       help="force deterministic outputs (wall times zeroed)")
        p.add_argument("--jobs", "-j", type=int, help="worker processes for benchmark trials")
        p.add_argument("--attack", choices=attacklib.attack_names(),
                       help="override the configured attack")
        if trial:
            p.add_argument("--trial", type=int, default=0, help="trial index to run")

    common(sub.add_parser("pretrain", help="produce the pretrained checkpoints"))
    common(sub.add_parser("craft", help="craft one poison set"), trial=True)
    common(sub.add_parser("run-trial", help="run a single seeded trial"), trial=True)
    bench = sub.add_parser("benchmark", help="run the full protocol")
    common(bench)
    bench.add_argument("--trials", type=int, help="override benchmark.n_trials")

    rep = sub.add_parser("report", help="re-render reports from a per-trial CSV")
    rep.add_argument("--csv", required=True)
    rep.add_argument("--format", choices=["markdown", "csv", "json"], default="markdown")
    rep.add_argument("--out")

    grad = sub.add_parser("gradcheck", help="finite-difference verification of all ops")
    grad.add_argument("--seed", type=int, default=0)
    return parser


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "craft": cmd_craft,
    "run-trial": cmd_run_trial,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        sys.stderr.write(json.dumps({"error": {"type": "config", "message": str(exc)}}) + "\n")
        return 1
    except (PoisonBenchError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
