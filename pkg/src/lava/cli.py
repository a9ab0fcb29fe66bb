"""``lava`` command line: train, eval, experiment.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import config, harness, models, tasks, training
from .errors import CheckpointError, ConfigError, ContractError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
EXPERIMENTS = ("variance", "landscape", "condition", "noise", "timing")

log = logging.getLogger("lava")


def _add_hyper_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("hyper-parameters (override the config file)")
    g.add_argument("--config", help="INI config file")
    g.add_argument("--mode", choices=training.TRAIN_MODES)
    g.add_argument("--task", choices=sorted(tasks.FAMILIES))
    g.add_argument("--support", dest="n_support", type=int)
    g.add_argument("--query", dest="n_query", type=int)
    g.add_argument("--meta-batch", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batches-per-epoch", type=int)
    g.add_argument("--inner-steps", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--outer-lr", type=float)
    g.add_argument("--eps", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--context-dim", type=int)
    g.add_argument("--hidden", type=config._int_tuple, help="e.g. 64,64,64")
    g.add_argument("--clip-norm", type=float)
    p.add_argument("--output-dir", help=f"run directory (default: ${config.OUTPUT_DIR_ENV} or runs/<cmd>-<time>)")
    p.add_argument("--workers", type=int, default=1, help="parallel processes for independent runs")


HYPER_KEYS = ("mode", "task", "n_support", "n_query", "meta_batch", "epochs", "batches_per_epoch",
              "inner_steps", "alpha", "outer_lr", "eps", "seed", "context_dim", "hidden", "clip_norm")


def _resolve(args) -> training.HyperConfig:
    overrides = {k: getattr(args, k, None) for k in HYPER_KEYS}
    return config.resolve(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lava", description="Laplace-fused gradient-based meta-learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train and write checkpoints plus a training log")
    _add_hyper_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", dest="n_tasks", type=int, default=100)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    _add_hyper_args(p)

    p = sub.add_parser("experiment", help=f"diagnostic experiments: {', '.join(EXPERIMENTS)}")
    p.add_argument("name")
    p.add_argument("--checkpoint")
    p.add_argument("--resamples", type=int, default=100)
    p.add_argument("--modes", nargs="+", choices=training.TRAIN_MODES)
    p.add_argument("--sigmas", type=float, nargs="+", default=[3.0])
    p.add_argument("--supports", type=int, nargs="+")
    p.add_argument("--tasks", dest="n_tasks", type=int, default=50)
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--extent", type=float, default=3.0)
    p.add_argument("--steps", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--budget", type=int, default=200, help="training iterations per timing config")
    _add_hyper_args(p)
    return parser


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = config.output_dir(args.output_dir, "train")
    config.write_manifest(out, "train", cfg)
    params = models.init_params(cfg.seed, cfg.architecture(), cfg.model_mode)
    models.save_checkpoint(params, out / "checkpoint_init.bin")
    if cfg.epochs == 0:
        config.finish_manifest(out, status="ok", checkpoint="checkpoint_init.bin")
        return EXIT_OK
    try:
        params, train_log = training.meta_train(cfg, params)
    except training.TrainingAborted as exc:
        models.save_checkpoint(exc.params, out / "checkpoint_last_good.bin")
        exc.log.to_csv(out / "train_log.csv")
        config.finish_manifest(out, status="numeric-abort", checkpoint="checkpoint_last_good.bin", error=str(exc))
        print(f"numeric failure: {exc}; last good state in {out / 'checkpoint_last_good.bin'}", file=sys.stderr)
        return EXIT_NUMERIC
    models.save_checkpoint(params, out / "checkpoint_final.bin")
    train_log.to_csv(out / "train_log.csv")
    config.finish_manifest(out, status="ok", checkpoint="checkpoint_final.bin")
    last = train_log.rows[-1]["mean_query_mse"]
    print(f"trained {cfg.mode} on {cfg.task}: final epoch query MSE {last:.6g} -> {out}")
    return EXIT_OK


def _config_for_checkpoint(args, params: models.MetaParams) -> training.HyperConfig:
    cfg = _resolve(args)
    if args.mode is None and (args.config is None or cfg.model_mode != params.mode):
        default = training.LAVA_CONTEXT if params.mode == models.CONTEXT else training.LAVA_LAST_LAYER
        cfg = replace(cfg, mode=default)
    if cfg.model_mode != params.mode:
        raise ConfigError(f"mode {cfg.mode} does not match the checkpoint's {params.mode} model")
    if params.mode == models.CONTEXT:
        cfg = replace(cfg, context_dim=params.arch.context_dim)
    cfg = replace(cfg, hidden=params.arch.hidden)
    fam = tasks.family(cfg.task)
    if (fam.d_in, fam.k) != (params.arch.d_in, params.arch.k):
        raise CheckpointError(
            f"checkpoint head expects d_in={params.arch.d_in}, k={params.arch.k}; "
            f"task {cfg.task} has d_in={fam.d_in}, k={fam.k} (tensor layer0.weight / head)"
        )
    return cfg


def _load(args) -> models.MetaParams:
    if not args.checkpoint:
        raise ConfigError("this command needs --checkpoint")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return models.load_checkpoint(path)


def cmd_eval(args) -> int:
    params = _load(args)
    cfg = _config_for_checkpoint(args, params)
    out = config.output_dir(args.output_dir, "eval")
    config.write_manifest(out, "eval", cfg, {"checkpoint": str(Path(args.checkpoint).resolve())})
    res = training.evaluate_over_seeds(params, cfg, args.n_tasks, args.seeds)
    (out / "eval.json").write_text(json.dumps(res, indent=2) + "\n", encoding="utf-8")
    config.finish_manifest(out, status="ok")
    print(f"query MSE {res['mean']:.6g} ± {res['std']:.3g} over seeds {list(args.seeds)} "
          f"(std across tasks {', '.join(f'{s:.3g}' for s in res['std_across_tasks'])})")
    return EXIT_OK


def _variance_run(cfg, resamples, n_support):
    _, rows = harness.variance_trajectory(cfg, resamples=resamples, n_support=n_support)
    return rows


def cmd_experiment(args) -> int:
    if args.name not in EXPERIMENTS:
        print(f"unknown experiment {args.name!r}; valid names: {', '.join(EXPERIMENTS)}", file=sys.stderr)
        return EXIT_USAGE
    out = config.output_dir(args.output_dir, f"experiment-{args.name}")
    name = args.name

    if name == "variance":
        cfg = _resolve(args)
        modes = args.modes or [training.LAVA_CONTEXT, training.CAVIA]
        cfgs = [replace(cfg, mode=m) for m in modes]
        config.write_manifest(out, "experiment variance", cfg, {"modes": modes, "resamples": args.resamples})
        if args.workers > 1:
            with ProcessPoolExecutor(args.workers) as ex:
                results = list(ex.map(_variance_run, cfgs, [args.resamples] * len(cfgs),
                                      [cfg.n_support] * len(cfgs)))
        else:
            results = [_variance_run(c, args.resamples, cfg.n_support) for c in cfgs]
        rows = [r for rs in results for r in rs]
        harness.write_csv(out / "variance.csv", harness.VARIANCE_COLUMNS, rows)

    elif name == "landscape":
        params = _load(args)
        if params.mode != models.CONTEXT or params.arch.context_dim != 2:
            raise ContractError("landscape needs a checkpoint with a 2-D context")
        cfg = _config_for_checkpoint(args, params)
        config.write_manifest(out, "experiment landscape", cfg, {"checkpoint": args.checkpoint})
        tb = tasks.make_batch(cfg.task, cfg.n_support, cfg.n_query, cfg.seed, 0, training.EVAL_STREAM)
        e = args.extent
        grid = harness.GridSpec((-e, e), (-e, e), args.grid, args.grid)
        land = harness.loss_landscape_grid(params, cfg, tb.support_x, tb.support_y, grid)
        harness.write_csv(out / "landscape.csv", harness.LANDSCAPE_COLUMNS, land.rows)
        harness.write_csv(out / "ellipses.csv", harness.ELLIPSE_COLUMNS, land.ellipses)
        markers = [{"kind": "prior", "point_idx": -1, "x": land.prior[0], "y": land.prior[1]},
                   {"kind": "fused", "point_idx": -1, "x": land.fused[0], "y": land.fused[1]}]
        markers += [{"kind": "point", "point_idx": i, "x": p[0], "y": p[1]} for i, p in enumerate(land.per_point)]
        harness.write_csv(out / "markers.csv", ("kind", "point_idx", "x", "y"), markers)

    elif name == "condition":
        if args.checkpoint:
            params = _load(args)
            cfg = _config_for_checkpoint(args, params)
        else:
            cfg = _resolve(args)
            params = models.init_params(cfg.seed, cfg.architecture(), cfg.model_mode)
        config.write_manifest(out, "experiment condition", cfg, {"checkpoint": args.checkpoint})
        rows = harness.condition_table(params, cfg, n_tasks=args.n_tasks, seed=cfg.seed)
        harness.write_csv(out / "condition.csv", harness.CONDITION_COLUMNS, rows)
        for r in rows:
            print(f"support {r['support']}: kappa raw {r['kappa_raw']:.3g}, regularized {r['kappa_regularized']:.3g}")

    elif name == "noise":
        params = _load(args)
        cfg = _config_for_checkpoint(args, params)
        config.write_manifest(out, "experiment noise", cfg, {"checkpoint": args.checkpoint})
        supports = args.supports or [1, 2, 5, 10, 20]
        rows = harness.noise_robustness(params, cfg, args.sigmas, supports, args.n_tasks, cfg.seed)
        harness.write_csv(out / "noise.csv", harness.NOISE_COLUMNS, rows)

    else:  # timing
        cfg = _resolve(args)
        modes = args.modes or [training.LAVA_LAST_LAYER, training.ANIL]
        configs = []
        for m in modes:
            is_lava = m in (training.LAVA_LAST_LAYER, training.LAVA_CONTEXT)
            configs += [(m, 1)] if is_lava else [(m, s) for s in args.steps]
        config.write_manifest(out, "experiment timing", cfg, {"configs": configs})
        rows = harness.timing_benchmark(cfg, configs, args.supports or [cfg.n_support], args.budget)
        harness.write_csv(out / "timing.csv", harness.TIMING_COLUMNS, rows)

    config.finish_manifest(out, status="ok")
    print(f"experiment {name} -> {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    handlers = {"train": cmd_train, "eval": cmd_eval, "experiment": cmd_experiment}
    try:
        return handlers[args.command](args)
    except (ConfigError, CheckpointError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
