"""Command-line entry points.

Commands: meta-train, meta-test, grad-check, knn-baseline, export, import,
single-neuron, print-config.  Configuration precedence is defaults < config
file < SPIKEMETA_* environment < flags.  Exit codes: 0 success, 2 malformed
config, 3 missing or invalid checkpoint, 4 missing dataset manifest,
1 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import demo as demo_mod
from . import diffsim
from .config import ConfigError, ExperimentConfig, emit_config, load_config
from .data import ManifestError, build_episode, knn_episode_accuracy
from .meta import TrainResult, evaluate_trials, init_model, meta_train
from .quantize import RandomSource

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_MANIFEST = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", metavar="DIR", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--dataset", metavar="SRC", default=None,
                   help="synthetic | manifest:PATH")
    p.add_argument("--checkpoint", metavar="PATH", default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--way", type=int, default=None)
    p.add_argument("--shot", type=int, default=None)
    p.add_argument("--queries", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikemeta")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (
        "meta-train",
        "meta-test",
        "grad-check",
        "knn-baseline",
        "export",
        "import",
        "single-neuron",
        "print-config",
    ):
        _add_common(sub.add_parser(name))
    return parser


_FLAG_FIELDS = {
    "seed": "seed",
    "out": "out_dir",
    "workers": "workers",
    "dataset": "dataset",
    "trials": "trials",
    "way": "way",
    "shot": "shot",
    "queries": "queries",
}


def _effective_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = load_config(args.config) if base is None else base
    for flag, field_name in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, field_name, value)
    return cfg


def _build_model(cfg: ExperimentConfig):
    source = cfg.episode_source()
    model = init_model(
        input_dim=source.input_dim,
        hidden=cfg.hidden_sizes(),
        way=cfg.way,
        neuron_hidden=cfg.neuron_config(cfg.net_threshold_hidden),
        neuron_out=cfg.neuron_config(cfg.net_threshold_out),
        soel=cfg.soel_config(),
        surrogate=cfg.surrogate_config(),
        inner=cfg.inner_config(),
        seed=cfg.seed,
        weight_std=cfg.net_weight_init_std,
        quantized=cfg.net_quantized,
        input_grid=(cfg.data_height, cfg.data_width),
        rf_sigma=cfg.net_rf_sigma,
    )
    return source, model


def _write_metrics(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "val_accuracy", "wall_time_s", "inner_updates"])
        for r in rows:
            writer.writerow(
                [r.iteration, f"{r.loss:.6f}",
                 "" if r.val_accuracy is None else f"{r.val_accuracy:.4f}",
                 f"{r.wall_time_s:.2f}", r.inner_updates]
            )


def cmd_meta_train(args) -> int:
    cfg = _effective_config(args)
    source, model = _build_model(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    result: TrainResult = meta_train(
        source,
        model,
        cfg.outer_config(),
        way=cfg.way,
        shot=cfg.shot,
        train_queries=cfg.train_queries,
        val_every=cfg.val_every,
        val_episodes=cfg.val_episodes,
        val_queries=cfg.queries,
    )
    _write_metrics(os.path.join(cfg.out_dir, "metrics.csv"), result.metrics)
    ckpt.save_model(
        os.path.join(cfg.out_dir, "final.ckpt"),
        result.final_model,
        adam=result.adam,
        best_model=result.model,
        best_val_accuracy=result.best_val_accuracy,
        best_iteration=result.best_iteration,
        experiment=cfg.to_dict(),
    )
    ckpt.save_model(
        os.path.join(cfg.out_dir, "best.ckpt"),
        result.model,
        experiment=cfg.to_dict(),
    )
    print(
        f"meta-train done: {result.final_model.iteration} iterations, "
        f"best val accuracy {result.best_val_accuracy:.4f} at iteration {result.best_iteration}"
    )
    print(f"wrote {cfg.out_dir}/metrics.csv, final.ckpt, best.ckpt")
    return EXIT_OK


def _load_for_eval(args):
    if args.checkpoint is None:
        raise ckpt.CheckpointError("missing --checkpoint")
    loaded = ckpt.load_model(args.checkpoint)
    base = None
    if loaded.experiment:
        base = ExperimentConfig(**loaded.experiment)
    cfg = _effective_config(args, base=base)
    return cfg, loaded.model


def cmd_meta_test(args) -> int:
    cfg, model = _load_for_eval(args)
    source = cfg.episode_source()
    mean, std, results = evaluate_trials(
        model, source, "test", cfg.trials, cfg.way, cfg.shot, cfg.queries,
        RandomSource(cfg.seed), stream_prefix="metatest", workers=cfg.workers,
    )
    updates = int(np.mean([r.inner_updates for r in results]))
    print(
        f"meta-test accuracy: {mean:.4f} +- {std:.4f} "
        f"({cfg.trials} trials, {cfg.way}-way {cfg.shot}-shot, "
        f"{updates} inner updates/trial)"
    )
    return EXIT_OK


def cmd_knn_baseline(args) -> int:
    cfg = _effective_config(args)
    source = cfg.episode_source()
    rng = RandomSource(cfg.seed)
    accs = []
    for k in range(cfg.trials):
        episode = build_episode(
            source, "test", cfg.way, cfg.shot, cfg.queries,
            rng.stream(f"metatest/episode/{k}"),
        )
        accs.append(knn_episode_accuracy(episode, k=cfg.knn_k))
    accs = np.array(accs)
    print(
        f"knn-baseline accuracy: {accs.mean():.4f} +- {accs.std():.4f} "
        f"({cfg.trials} trials, k={cfg.knn_k})"
    )
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = _effective_config(args)
    gen = RandomSource(cfg.seed).stream("grad-check-data")
    weights, cfgs = diffsim.make_toy_net((16, 16, 5), seed=cfg.seed, scale=2.0)
    frames = (gen.random((6, 20, 16)) < 0.3).astype(np.float64)
    labels = gen.integers(0, 5, size=6)
    sur = cfg.surrogate_config()
    res = diffsim.grad_check(weights, cfgs, sur, frames, labels, seed=cfg.seed)
    print(f"forward grad check: {res}")

    hw, hcfgs = diffsim.make_toy_net((12, 10, 5), seed=cfg.seed + 1, scale=2.0)
    train = (gen.random((2, 5, 20, 12)) < 0.3).astype(np.float64)
    test = (gen.random((2, 5, 20, 12)) < 0.3).astype(np.float64)
    meta = diffsim.meta_grad_check(
        hw[:-1], hw[-1], hcfgs, sur, cfg.soel_config(), cfg.inner_alpha,
        train, np.arange(5), test, np.tile(np.arange(5), (2, 1)), seed=cfg.seed,
    )
    print(f"meta grad check: {meta}")

    hard = diffsim.grad_check(
        weights, cfgs, sur, frames, labels, seed=cfg.seed, spike_mode="hard", n_samples=20
    )
    print(f"hard-threshold forward (surrogate backward): {hard}")
    return EXIT_OK


def cmd_export(args) -> int:
    if args.checkpoint is None:
        raise ckpt.CheckpointError("missing --checkpoint")
    out = args.out or "exported.ckpt"
    loaded = ckpt.load_model(args.checkpoint)
    if os.path.isdir(out):
        out = os.path.join(out, "exported.ckpt")
    ckpt.save_model(
        out,
        loaded.model,
        adam=loaded.adam,
        best_model=loaded.best_model,
        best_val_accuracy=loaded.best_val_accuracy,
        best_iteration=loaded.best_iteration,
        experiment=loaded.experiment,
    )
    print(f"exported {args.checkpoint} -> {out}")
    return EXIT_OK


def cmd_import(args) -> int:
    if args.checkpoint is None:
        raise ckpt.CheckpointError("missing --checkpoint")
    loaded = ckpt.load_model(args.checkpoint)
    model = loaded.model
    digest = hashlib.sha256()
    for w in model.topology.weights:
        digest.update(w.shadow.tobytes())
        digest.update(w.quantized.tobytes())
    print(
        f"checkpoint ok: layers {model.topology.layer_sizes}, "
        f"iteration {model.iteration}, seed {model.seed}, "
        f"weights sha256 {digest.hexdigest()[:16]}"
    )
    return EXIT_OK


def cmd_single_neuron(args) -> int:
    cfg = _effective_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    result = demo_mod.run_single_neuron_demo(cfg)
    path = os.path.join(cfg.out_dir, "single_neuron.csv")
    demo_mod.write_trajectory(path, result)
    if result.converged_window is None:
        print(f"did not converge within {cfg.demo_max_windows} windows; wrote {path}")
    else:
        print(
            f"converged at window {result.converged_window} "
            f"({result.updates} updates); wrote {path}"
        )
    return EXIT_OK


def cmd_print_config(args) -> int:
    cfg = _effective_config(args)
    sys.stdout.write(emit_config(cfg))
    return EXIT_OK


COMMANDS = {
    "meta-train": cmd_meta_train,
    "meta-test": cmd_meta_test,
    "grad-check": cmd_grad_check,
    "knn-baseline": cmd_knn_baseline,
    "export": cmd_export,
    "import": cmd_import,
    "single-neuron": cmd_single_neuron,
    "print-config": cmd_print_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ManifestError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_MANIFEST


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
