"""Bi-level meta-training with an Adam outer optimizer.

Each meta-iteration samples a batch of tasks, adapts on every support set
(per-point fusion for the LAVA modes, plain gradient steps for the
baselines), scores the adapted parameters on the query sets, and takes one
Adam step on the mean query loss. The whole adapt-then-query computation is
recorded on one tape so the outer gradient flows through the fusion solve.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import adaptation, models, tasks
from . import autodiff as ad
from .adaptation import AdaptationResult
from .autodiff import Tensor
from .errors import ConfigError, NumericError
from .models import Architecture, MetaParams

log = logging.getLogger(__name__)

LAVA_LAST_LAYER = "lava-last-layer"
LAVA_CONTEXT = "lava-context"
ANIL = "anil-baseline"
CAVIA = "cavia-baseline"
TRAIN_MODES = (LAVA_LAST_LAYER, LAVA_CONTEXT, ANIL, CAVIA)

TRAIN_STREAM = 0
EVAL_STREAM = 1


@dataclass(frozen=True)
class HyperConfig:
    mode: str = LAVA_LAST_LAYER
    task: str = "sine"
    alpha: float = 0.1
    outer_lr: float = 1e-3
    eps: float = 0.1
    n_support: int = 10
    n_query: int = 25
    meta_batch: int = 10
    epochs: int = 10
    batches_per_epoch: int = 100
    inner_steps: int = 1
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64, 64)
    context_dim: int = 2
    clip_norm: float | None = None
    eval_tasks: int = 100
    eval_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode: unknown value {self.mode!r}; expected one of {list(TRAIN_MODES)}")
        tasks.family(self.task)
        for name in ("alpha", "outer_lr", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("n_support", "n_query", "meta_batch", "inner_steps", "batches_per_epoch", "eval_tasks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be at least 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be non-negative, got {self.epochs}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm: must be positive, got {self.clip_norm}")
        if self.mode in (LAVA_CONTEXT, CAVIA) and self.context_dim < 1:
            raise ConfigError("context_dim: context modes need at least one context dimension")
        if self.is_lava and self.inner_steps != 1:
            # fusion is defined for a single per-point step
            object.__setattr__(self, "inner_steps", 1)

    @property
    def is_lava(self) -> bool:
        return self.mode in (LAVA_LAST_LAYER, LAVA_CONTEXT)

    @property
    def model_mode(self) -> str:
        return models.CONTEXT if self.mode in (LAVA_CONTEXT, CAVIA) else models.LAST_LAYER

    def architecture(self) -> Architecture:
        fam = tasks.family(self.task)
        c = self.context_dim if self.model_mode == models.CONTEXT else 0
        return Architecture(d_in=fam.d_in, k=fam.k, hidden=tuple(self.hidden), context_dim=c)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Adaptation and outer gradient
# ---------------------------------------------------------------------------


def adapt(meta: MetaParams, support_x, support_y, cfg: HyperConfig, detailed: bool = False) -> AdaptationResult:
    """Task-adapted parameters from one support set.

    ``detailed=True`` builds the per-point posteriors explicitly (and the
    condition numbers); otherwise the batched closed forms are used.
    """
    x, y = ad.as_tensor(support_x), ad.as_tensor(support_y)
    if cfg.mode == LAVA_LAST_LAYER:
        z = models.features(meta.layers, x)
        if detailed:
            return adaptation.fuse(adaptation.head_posteriors(meta.head, z, y, cfg.alpha, cfg.eps), True)
        theta, total = adaptation.lava_head(meta.head, z, y, cfg.alpha, cfg.eps)
        return AdaptationResult(theta, precision_sum=total)
    if cfg.mode == LAVA_CONTEXT:
        if detailed:
            return adaptation.fuse(adaptation.context_posteriors(meta, x, y, cfg.alpha, cfg.eps), True)
        phi, total = adaptation.lava_context(meta, x, y, cfg.alpha, cfg.eps)
        return AdaptationResult(phi, precision_sum=total)
    if cfg.mode == ANIL:
        z = models.features(meta.layers, x)
        return AdaptationResult(adaptation.anil_head(meta.head, z, y, cfg.alpha, cfg.inner_steps))
    return AdaptationResult(adaptation.cavia_context(meta, x, y, cfg.alpha, cfg.inner_steps))


def query_loss(meta: MetaParams, adapted: Tensor, query_x, query_y) -> Tensor:
    return ad.mse(models.predict(meta, ad.as_tensor(query_x), adapted), ad.as_tensor(query_y))


@dataclass
class BatchOutcome:
    loss: float
    task_losses: list[float]
    grads: list[np.ndarray]
    adapted: list[np.ndarray]
    precision_sums: list[np.ndarray | None]


def _last_layer_losses(meta: MetaParams, batch: Sequence[tasks.TaskBatch], cfg: HyperConfig):
    # one feature pass over every support and query row in the batch
    xs, bounds = [], []
    pos = 0
    for tb in batch:
        xs += [tb.support_x, tb.query_x]
        bounds.append((pos, pos + tb.n_support, pos + tb.n_support + tb.n_query))
        pos += tb.n_support + tb.n_query
    z_all = models.features(meta.layers, Tensor(np.concatenate(xs, axis=0)))
    for tb, (a, b, c) in zip(batch, bounds):
        zs, zq = ad.take_rows(z_all, a, b), ad.take_rows(z_all, b, c)
        ys = Tensor._wrap(np.array(tb.support_y, dtype=np.float64))
        if cfg.mode == LAVA_LAST_LAYER:
            theta, total = adaptation.lava_head(meta.head, zs, ys, cfg.alpha, cfg.eps)
        else:
            theta, total = adaptation.anil_head(meta.head, zs, ys, cfg.alpha, cfg.inner_steps), None
        yield theta, total, ad.mse(models.head(theta, zq), Tensor(tb.query_y))


def _context_losses(meta: MetaParams, batch: Sequence[tasks.TaskBatch], cfg: HyperConfig):
    for tb in batch:
        res = adapt(meta, tb.support_x, tb.support_y, cfg)
        yield res.params, res.precision_sum, query_loss(meta, res.params, tb.query_x, tb.query_y)


def outer_gradient(meta: MetaParams, batch: Sequence[tasks.TaskBatch], cfg: HyperConfig) -> BatchOutcome:
    """Mean query MSE over the batch and its gradient w.r.t. every meta-parameter."""
    if not batch:
        raise ConfigError("outer_gradient needs at least one task")
    with ad.Tape() as tape:
        p = meta.watch(tape)
        losses, adapted, totals = [], [], []
        gen = _last_layer_losses if cfg.model_mode == models.LAST_LAYER else _context_losses
        it = gen(p, batch, cfg)
        for i in range(len(batch)):
            try:
                theta, total, loss = next(it)
            except NumericError as exc:
                raise NumericError(f"task {i} of the meta-batch: {exc}") from exc
            losses.append(loss)
            adapted.append(theta.data)
            totals.append(None if total is None else total.data)
        total_loss = losses[0]
        for l in losses[1:]:
            total_loss = total_loss + l
        total_loss = total_loss / len(losses)
        grads = tape.gradient(total_loss, p.flat())
    for g in grads:
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite outer gradient (loss {total_loss.item():.6g})")
    return BatchOutcome(total_loss.item(), [l.item() for l in losses], grads, adapted, totals)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls(tuple(np.zeros_like(p) for p in params), tuple(np.zeros_like(p) for p in params))


def adam_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              lr: float) -> tuple[OptimizerState, list[np.ndarray]]:
    """Bias-corrected Adam update; returns new state and new parameters."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.delta))
        new_m.append(m)
        new_v.append(v)
    return replace(state, m=tuple(new_m), v=tuple(new_v), step=t), new_p


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))
    if norm <= max_norm:
        return list(grads)
    return [g * (max_norm / norm) for g in grads]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

LOG_COLUMNS = (
    "epoch",
    "mean_query_mse",
    "std_query_mse",
    "mean_log_var_adapted",
    "mean_condition_number",
    "wall_time_s",
)


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in LOG_COLUMNS})


class TrainingAborted(NumericError):
    """Non-finite loss or gradient; carries the last finite parameters."""

    def __init__(self, message: str, params: MetaParams, log: TrainingLog, iteration: int):
        super().__init__(message)
        self.params = params
        self.log = log
        self.iteration = iteration


def sample_meta_batch(cfg: HyperConfig, iteration: int, seed: int | None = None,
                      stream: int = TRAIN_STREAM) -> list[tasks.TaskBatch]:
    seed = cfg.seed if seed is None else seed
    start = iteration * cfg.meta_batch
    return [
        tasks.make_batch(cfg.task, cfg.n_support, cfg.n_query, seed, start + b, stream)
        for b in range(cfg.meta_batch)
    ]


def adapted_log_variance(adapted: Sequence[np.ndarray]) -> float:
    """log10 of the trace of the sample covariance of flattened adapted parameters."""
    a = np.array([np.ravel(x) for x in adapted])
    if a.shape[0] < 2:
        return float("nan")
    tr = float(np.sum(np.var(a, axis=0, ddof=1)))
    return float(np.log10(tr)) if tr > 0 else float("-inf")


def meta_train(
    cfg: HyperConfig,
    params: MetaParams | None = None,
    on_epoch: Callable[[int, MetaParams, TrainingLog], None] | None = None,
) -> tuple[MetaParams, TrainingLog]:
    """Run ``cfg.epochs × cfg.batches_per_epoch`` meta-iterations."""
    params = models.init_params(cfg.seed, cfg.architecture(), cfg.model_mode) if params is None else params
    train_log = TrainingLog()
    if cfg.epochs == 0:
        return params, train_log
    state = OptimizerState.zeros_like(params.arrays())
    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses, log_vars = [], []
        outcome = None
        for _ in range(cfg.batches_per_epoch):
            batch = sample_meta_batch(cfg, iteration)
            try:
                outcome = outer_gradient(params, batch, cfg)
            except NumericError as exc:
                raise TrainingAborted(f"iteration {iteration}: {exc}", params, train_log, iteration) from exc
            grads = outcome.grads
            if cfg.clip_norm is not None:
                grads = clip_by_global_norm(grads, cfg.clip_norm)
            state, new = adam_step(state, params.arrays(), grads, cfg.outer_lr)
            if not all(np.isfinite(a).all() for a in new):
                raise TrainingAborted(f"iteration {iteration}: non-finite parameters", params, train_log, iteration)
            params = params.with_flat(new)
            losses.append(outcome.loss)
            log_vars.append(adapted_log_variance(outcome.adapted))
            iteration += 1
        conds = [adaptation.condition_number(s) for s in outcome.precision_sums if s is not None]
        row = {
            "epoch": epoch,
            "mean_query_mse": float(np.mean(losses)),
            "std_query_mse": float(np.std(losses)),
            "mean_log_var_adapted": float(np.mean(log_vars)),
            "mean_condition_number": float(np.mean(conds)) if conds else float("nan"),
            "wall_time_s": time.perf_counter() - t0,
        }
        train_log.append(row)
        log.info("epoch %d  query mse %.5g  (%.1fs)", epoch, row["mean_query_mse"], row["wall_time_s"])
        if on_epoch is not None:
            on_epoch(epoch, params, train_log)
    return params, train_log


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    mean: float
    std: float
    per_task: tuple[float, ...]


def evaluate(meta: MetaParams, batches: Sequence[tasks.TaskBatch], cfg: HyperConfig) -> EvalResult:
    """Adapt on each support set, score on its query set."""
    if not batches:
        raise ConfigError("evaluate needs at least one task")
    scores = []
    for tb in batches:
        res = adapt(meta, tb.support_x, tb.support_y, cfg)
        scores.append(query_loss(meta, res.params, tb.query_x, tb.query_y).item())
    return EvalResult(float(np.mean(scores)), float(np.std(scores)), tuple(scores))


def eval_batches(cfg: HyperConfig, n_tasks: int, seed: int) -> list[tasks.TaskBatch]:
    """Fresh tasks from the evaluation stream, disjoint from training draws."""
    return [tasks.make_batch(cfg.task, cfg.n_support, cfg.n_query, seed, i, EVAL_STREAM) for i in range(n_tasks)]


def evaluate_over_seeds(meta: MetaParams, cfg: HyperConfig, n_tasks: int | None = None,
                        seeds: Sequence[int] | None = None) -> dict:
    """Mean and std across evaluation seeds of the per-seed mean query MSE."""
    n_tasks = cfg.eval_tasks if n_tasks is None else n_tasks
    seeds = cfg.eval_seeds if seeds is None else tuple(seeds)
    results = [evaluate(meta, eval_batches(cfg, n_tasks, s), cfg) for s in seeds]
    means = np.array([r.mean for r in results])
    return {
        "mean": float(means.mean()),
        "std": float(means.std()),
        "per_seed": [float(m) for m in means],
        "std_across_tasks": [r.std for r in results],
    }
