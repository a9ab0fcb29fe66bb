"""Diagnostic experiments: adaptation variance, loss landscapes, curvature
conditioning, label-noise robustness and per-iteration cost.

Every function returns plain rows (lists of dicts) that :func:`write_csv`
turns into plot-ready files. Nothing here draws.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import adaptation, models, tasks, training
from . import autodiff as ad
from .adaptation import AdaptationResult
from .autodiff import Tensor
from .errors import ContractError
from .models import MetaParams
from .training import HyperConfig

VARIANCE_COLUMNS = ("epoch", "mode", "log_var")
LANDSCAPE_COLUMNS = ("point_idx", "cx", "cy", "log_mse")
ELLIPSE_COLUMNS = ("point_idx", "h11", "h12", "h22", "mean_x", "mean_y")
TIMING_COLUMNS = ("mode", "steps", "support", "s_per_iter", "mse")
CONDITION_COLUMNS = ("epoch", "mode", "support", "kappa_raw", "kappa_regularized")
NOISE_COLUMNS = ("sigma", "support", "mse_clean", "mse_noisy", "delta")


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in columns})
    return path


# ---------------------------------------------------------------------------
# Variance of adapted parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceReport:
    adapted: np.ndarray  # R × P, one flattened adapted parameter set per row
    covariance: np.ndarray
    log_var: float  # log10 of the covariance trace


def sample_covariance(samples: np.ndarray) -> np.ndarray:
    """Unbiased sample covariance of the rows of ``samples``."""
    # shift by the first row so identical rows give an exact zero
    shifted = samples - samples[:1]
    centered = shifted - shifted.mean(axis=0, keepdims=True)
    return centered.T @ centered / (samples.shape[0] - 1)


def estimate_adaptation_variance(meta: MetaParams, cfg: HyperConfig, task, resamples: int = 100,
                                 n_support: int = 10, rng: np.random.Generator | None = None) -> VarianceReport:
    """Spread of the adapted parameters over re-drawn supports of one task."""
    if resamples < 2:
        raise ContractError("need at least two resamples")
    rng = np.random.default_rng(0) if rng is None else rng
    adapted = []
    for _ in range(resamples):
        x = task.sample_inputs(rng, n_support)
        res = training.adapt(meta, x, task(x), cfg)
        adapted.append(res.params.data.ravel())
    a = np.array(adapted)
    cov = sample_covariance(a)
    tr = float(np.trace(cov))
    return VarianceReport(a, cov, float(np.log10(tr)) if tr > 0 else float("-inf"))


def variance_trajectory(cfg: HyperConfig, task_seed: int = 12345, resamples: int = 100,
                        n_support: int = 10, every: int = 1) -> tuple[MetaParams, list[dict]]:
    """Train under ``cfg`` and track the adapted-parameter log-variance on one fixed task."""
    task = tasks.sample_task(cfg.task, tasks.task_rng(task_seed, 0, 2))
    rows: list[dict] = []

    def record(epoch, params):
        rep = estimate_adaptation_variance(
            params, cfg, task, resamples, n_support, np.random.default_rng([task_seed, epoch])
        )
        rows.append({"epoch": epoch, "mode": cfg.mode, "log_var": rep.log_var})

    params = models.init_params(cfg.seed, cfg.architecture(), cfg.model_mode)
    record(0, params)

    def on_epoch(epoch, p, _log):
        if epoch % every == 0:
            record(epoch, p)

    params, _ = training.meta_train(cfg, params, on_epoch)
    return params, rows


# ---------------------------------------------------------------------------
# Loss landscape over a 2-D context
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (-3.0, 3.0)
    y_range: tuple[float, float] = (-3.0, 3.0)
    width: int = 101
    height: int = 101


@dataclass(frozen=True)
class Landscape:
    rows: list[dict]
    ellipses: list[dict]
    prior: np.ndarray
    per_point: np.ndarray
    fused: np.ndarray
    weights: list[np.ndarray]


def loss_landscape_grid(meta: MetaParams, cfg: HyperConfig, support_x, support_y,
                        grid: GridSpec = GridSpec()) -> Landscape:
    """Per-point log10 squared error over a grid of 2-D contexts, plus markers."""
    if meta.mode != models.CONTEXT or meta.arch.context_dim != 2:
        raise ContractError("loss landscapes need a context model with a 2-D context")
    sx = np.atleast_2d(np.asarray(support_x, dtype=np.float64))
    sy = np.atleast_2d(np.asarray(support_y, dtype=np.float64))
    gx = np.linspace(*grid.x_range, grid.width)
    gy = np.linspace(*grid.y_range, grid.height)
    cx, cy = np.meshgrid(gx, gy, indexing="xy")
    ctx = np.column_stack([cx.ravel(), cy.ravel()])
    rows = []
    for i in range(sx.shape[0]):
        xi = np.repeat(sx[i : i + 1], ctx.shape[0], axis=0)
        pred = models.context_forward_rows(meta.layers, meta.head, Tensor(ctx), Tensor(xi)).data
        err = np.sum((pred - sy[i]) ** 2, axis=1)
        log_mse = np.log10(np.maximum(err, 1e-300))
        rows += [
            {"point_idx": i, "cx": float(a), "cy": float(b), "log_mse": float(v)}
            for a, b, v in zip(ctx[:, 0], ctx[:, 1], log_mse)
        ]
    lava_cfg = replace(cfg, mode=training.LAVA_CONTEXT)
    posts = adaptation.context_posteriors(meta, Tensor(sx), Tensor(sy), lava_cfg.alpha, lava_cfg.eps)
    fused = adaptation.fuse(posts).params.data.ravel()
    ellipses = [
        {
            "point_idx": i,
            "h11": float(p.precision.data[0, 0]),
            "h12": float(p.precision.data[0, 1]),
            "h22": float(p.precision.data[1, 1]),
            "mean_x": float(p.params.data[0, 0]),
            "mean_y": float(p.params.data[0, 1]),
        }
        for i, p in enumerate(posts)
    ]
    return Landscape(
        rows,
        ellipses,
        meta.context.data.ravel().copy(),
        np.array([p.params.data.ravel() for p in posts]),
        fused,
        adaptation.effective_weights(posts),
    )


# ---------------------------------------------------------------------------
# Conditioning of summed precisions
# ---------------------------------------------------------------------------


def condition_numbers(result: AdaptationResult) -> tuple[float, float]:
    """``(κ(Σ Hᵢ), κ(Σ H̃ᵢ))``; ``inf`` marks a numerically singular raw sum."""
    if not result.posteriors or result.posteriors[0].raw_precision is None:
        raise ContractError("condition numbers need per-point raw and regularized precisions")
    raw = np.sum([p.raw_precision.data for p in result.posteriors], axis=0)
    reg = np.sum([p.precision.data for p in result.posteriors], axis=0)
    return adaptation.condition_number(raw), adaptation.condition_number(reg)


def condition_table(meta: MetaParams, cfg: HyperConfig, n_tasks: int = 20, seed: int = 0,
                    epoch: int = 0) -> list[dict]:
    """Mean raw/regularized condition numbers over fresh tasks (LAVA modes)."""
    lava_mode = training.LAVA_CONTEXT if meta.mode == models.CONTEXT else training.LAVA_LAST_LAYER
    lava_cfg = replace(cfg, mode=lava_mode)
    raw, reg = [], []
    for tb in training.eval_batches(lava_cfg, n_tasks, seed):
        res = training.adapt(meta, tb.support_x, tb.support_y, lava_cfg, detailed=True)
        a, b = condition_numbers(res)
        raw.append(a)
        reg.append(b)
    return [{
        "epoch": epoch,
        "mode": lava_mode,
        "support": cfg.n_support,
        "kappa_raw": float(np.mean(raw)),
        "kappa_regularized": float(np.mean(reg)),
    }]


# ---------------------------------------------------------------------------
# Label noise
# ---------------------------------------------------------------------------


def noise_robustness(meta: MetaParams, cfg: HyperConfig, sigmas: Sequence[float] = (3.0,),
                     supports: Sequence[int] = (1, 2, 5, 10, 20), n_tasks: int = 100,
                     seed: int = 0) -> list[dict]:
    """Query-MSE change caused by noisy support labels, per (σ, N)."""
    rows = []
    for n in supports:
        sub = replace(cfg, n_support=n)
        batches = training.eval_batches(sub, n_tasks, seed)
        clean = training.evaluate(meta, batches, sub)
        for sigma in sigmas:
            rng = np.random.default_rng([seed, n, int(round(sigma * 1000))])
            noisy_batches = [tasks.add_label_noise(b, sigma, rng) for b in batches]
            noisy = training.evaluate(meta, noisy_batches, sub)
            rows.append({
                "sigma": float(sigma),
                "support": n,
                "mse_clean": clean.mean,
                "mse_noisy": noisy.mean,
                "delta": noisy.mean - clean.mean,
            })
    return rows


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


def time_meta_iterations(cfg: HyperConfig, iterations: int = 30, warmup: int = 5,
                         params: MetaParams | None = None) -> float:
    """Median wall time of one meta-iteration (outer gradient plus Adam step).

    Task sampling happens up front and is not timed.
    """
    params = models.init_params(cfg.seed, cfg.architecture(), cfg.model_mode) if params is None else params
    batches = [training.sample_meta_batch(cfg, i) for i in range(warmup + iterations)]
    state = training.OptimizerState.zeros_like(params.arrays())
    times = []
    for i, batch in enumerate(batches):
        t0 = time.perf_counter()
        out = training.outer_gradient(params, batch, cfg)
        state, new = training.adam_step(state, params.arrays(), out.grads, cfg.outer_lr)
        params = params.with_flat(new)
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def timing_benchmark(base: HyperConfig, configs: Sequence[tuple[str, int]] = (
        (training.LAVA_LAST_LAYER, 1), (training.ANIL, 1), (training.ANIL, 2), (training.ANIL, 3)),
        supports: Sequence[int] = (10,), budget_iterations: int = 200, timing_iterations: int = 30,
        eval_tasks: int = 50) -> list[dict]:
    """Per-iteration cost and the MSE reached after a fixed iteration budget."""
    rows = []
    for n in supports:
        for mode, steps in configs:
            cfg = replace(base, mode=mode, inner_steps=steps, n_support=n)
            s_per_iter = time_meta_iterations(cfg, timing_iterations)
            mse = float("nan")
            if budget_iterations > 0:
                epochs = max(1, budget_iterations // cfg.batches_per_epoch)
                run = replace(cfg, epochs=epochs, batches_per_epoch=min(budget_iterations, cfg.batches_per_epoch))
                params, _ = training.meta_train(run)
                mse = training.evaluate(params, training.eval_batches(run, eval_tasks, 0), run).mean
            rows.append({"mode": mode, "steps": cfg.inner_steps, "support": n, "s_per_iter": s_per_iter, "mse": mse})
    return rows


def timing_is_stable(cfg: HyperConfig, iterations: int = 30, tolerance: float = 0.2) -> tuple[bool, float, float]:
    """Measure the same configuration twice; stable when they differ by less than ``tolerance``."""
    a = time_meta_iterations(cfg, iterations)
    b = time_meta_iterations(cfg, iterations)
    return abs(a - b) / min(a, b) < tolerance, a, b
