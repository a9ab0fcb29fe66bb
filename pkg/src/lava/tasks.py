"""Synthetic regression task families and support/query sampling.

A task is a frozen parameter record plus the analytic map it defines. Inputs
are drawn i.i.d. from the family's state box and the targets are exact, so
every noiseless batch can be re-checked against its own formula.

Families: ``sine`` (y = A sin(x + φ)), four ODE vector fields, and an
inverse-dynamics cartpole whose inputs are trajectory states and whose target
is the applied force.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, IngestionError


@dataclass(frozen=True)
class TaskBatch:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    descriptor: dict = field(default_factory=dict)

    @property
    def n_support(self) -> int:
        return self.support_x.shape[0]

    @property
    def n_query(self) -> int:
        return self.query_x.shape[0]


@dataclass(frozen=True)
class Task:
    """One draw from a task family.

    ``params`` holds the family constants; ``state`` carries anything the
    sampler needs beyond them (the cartpole trajectory).
    """

    family: str
    params: dict
    state: dict = field(default_factory=dict, repr=False, compare=False)

    def sample_inputs(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return FAMILIES[self.family].sample_inputs(self, rng, n)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return FAMILIES[self.family].target(self, np.atleast_2d(np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class Family:
    name: str
    d_in: int
    k: int
    param_ranges: dict[str, tuple[float, float]]
    state_box: tuple[tuple[float, float], ...]
    target: Callable[[Task, np.ndarray], np.ndarray]
    sample_inputs: Callable[[Task, np.random.Generator, int], np.ndarray] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.sample_inputs is None:
            object.__setattr__(self, "sample_inputs", self._box_inputs)

    def _box_inputs(self, task: Task, rng: np.random.Generator, n: int) -> np.ndarray:
        lo = np.array([b[0] for b in self.state_box])
        hi = np.array([b[1] for b in self.state_box])
        return rng.uniform(lo, hi, size=(n, self.d_in))


# ---------------------------------------------------------------------------
# Analytic targets
# ---------------------------------------------------------------------------


def sine_target(task: Task, x: np.ndarray) -> np.ndarray:
    return task.params["amplitude"] * np.sin(x + task.params["phase"])


def fitzhugh_nagumo_field(task: Task, s: np.ndarray) -> np.ndarray:
    a, b, c = (task.params[n] for n in ("a", "b", "c"))
    u, v = s[:, 0], s[:, 1]
    du = c * (u - u**3 / 3.0 + v)
    dv = -(u - a + b * v) / c
    return np.stack([du, dv], axis=1)


def mass_spring_field(task: Task, s: np.ndarray) -> np.ndarray:
    m, k = task.params["m"], task.params["k"]
    x, xdot = s[:, 0], s[:, 1]
    return np.stack([-xdot / m, -k * x], axis=1)


def pendulum_field(task: Task, s: np.ndarray) -> np.ndarray:
    m, l, g = task.params["m"], task.params["l"], task.params["g"]
    th, thdot = s[:, 0], s[:, 1]
    return np.stack([thdot / (m * l * l), -m * g * l * np.sin(th)], axis=1)


def van_der_pol_field(task: Task, s: np.ndarray) -> np.ndarray:
    mu = task.params["mu"]
    x, y = s[:, 0], s[:, 1]
    return np.stack([y, mu * (1.0 - x * x) * y - x], axis=1)


# ---------------------------------------------------------------------------
# Cartpole inverse dynamics
# ---------------------------------------------------------------------------
#
# q = (cart position p, pole angle ϑ from upright). With cart mass M, pole
# mass m and half-length l:
#   [[M+m, m l cosϑ], [m l cosϑ, m l²]] q̈ + [[0, -m l ϑ̇ sinϑ], [0, 0]] q̇
#     + [0, -m g l sinϑ] = [1, 0] u

POLE_MASS = 0.1
POLE_LENGTH = 0.5
GRAVITY = 9.81
CARTPOLE_DT = 0.01
CARTPOLE_STEPS = 200


def cartpole_mass_matrix(cart_mass: float, th: np.ndarray) -> np.ndarray:
    m, l = POLE_MASS, POLE_LENGTH
    c = np.cos(th)
    out = np.empty(th.shape + (2, 2))
    out[..., 0, 0] = cart_mass + m
    out[..., 0, 1] = out[..., 1, 0] = m * l * c
    out[..., 1, 1] = m * l * l
    return out


def cartpole_bias(th: np.ndarray, thdot: np.ndarray) -> np.ndarray:
    """Coriolis plus gravity terms ``C q̇ + g``."""
    m, l = POLE_MASS, POLE_LENGTH
    s = np.sin(th)
    return np.stack([-m * l * thdot**2 * s, -m * GRAVITY * l * s], axis=-1)


def cartpole_accel(cart_mass: float, state: np.ndarray, u: float) -> np.ndarray:
    _, th, _, thdot = state
    mm = cartpole_mass_matrix(cart_mass, np.asarray(th))
    rhs = np.array([u, 0.0]) - cartpole_bias(np.asarray(th), np.asarray(thdot))
    return np.linalg.solve(mm, rhs)


def cartpole_control(t: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    amp, freq, phase = coeffs[:, 0:1], coeffs[:, 1:2], coeffs[:, 2:3]
    return np.sum(amp * np.sin(freq * np.atleast_1d(t)[None, :] + phase), axis=0)


def simulate_cartpole(cart_mass: float, init: np.ndarray, coeffs: np.ndarray,
                      dt: float = CARTPOLE_DT, steps: int = CARTPOLE_STEPS) -> np.ndarray:
    """Fixed-step RK4 roll-out; rows are ``(p, ϑ, ṗ, ϑ̇, p̈, ϑ̈, u)``."""

    def deriv(state, t):
        u = cartpole_control(np.array([t]), coeffs)[0]
        acc = cartpole_accel(cart_mass, state, u)
        return np.array([state[2], state[3], acc[0], acc[1]])

    rows = []
    s = np.asarray(init, dtype=np.float64)
    for i in range(steps):
        t = i * dt
        u = cartpole_control(np.array([t]), coeffs)[0]
        acc = cartpole_accel(cart_mass, s, u)
        rows.append(np.concatenate([s, acc, [u]]))
        k1 = deriv(s, t)
        k2 = deriv(s + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = deriv(s + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = deriv(s + dt * k3, t + dt)
        s = s + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return np.array(rows)


def cartpole_inverse_dynamics(task: Task, x: np.ndarray) -> np.ndarray:
    """Force ``u`` reproducing the accelerations in each trajectory row."""
    th, thdot = x[:, 1], x[:, 3]
    acc = x[:, 4:6]
    mm = cartpole_mass_matrix(task.params["cart_mass"], th)
    gen = np.einsum("nij,nj->ni", mm, acc) + cartpole_bias(th, thdot)
    return gen[:, :1]


def _cartpole_inputs(task: Task, rng: np.random.Generator, n: int) -> np.ndarray:
    traj = task.state["trajectory"]
    idx = rng.integers(0, traj.shape[0], size=n)
    return traj[idx, :6].copy()


# ---------------------------------------------------------------------------
# Registry and samplers
# ---------------------------------------------------------------------------

FAMILIES: dict[str, Family] = {
    "sine": Family(
        "sine", 1, 1,
        {"amplitude": (0.1, 5.0), "phase": (0.0, math.pi)},
        ((-5.0, 5.0),),
        sine_target,
    ),
    "fitzhugh-nagumo": Family(
        "fitzhugh-nagumo", 2, 2,
        {"a": (0.1, 2.0), "b": (0.1, 2.0), "c": (0.1, 2.0)},
        ((-2.5, 2.5), (-2.5, 2.5)),
        fitzhugh_nagumo_field,
    ),
    "mass-spring": Family(
        "mass-spring", 2, 2,
        {"m": (0.5, 1.5), "k": (0.5, 1.5)},
        ((-1.0, 1.0), (-1.0, 1.0)),
        mass_spring_field,
    ),
    "pendulum": Family(
        "pendulum", 2, 2,
        {"m": (0.5, 1.5), "l": (0.5, 1.5), "g": (0.5, 1.5)},
        ((-math.pi / 2, math.pi / 2), (-1.0, 1.0)),
        pendulum_field,
    ),
    "van-der-pol": Family(
        "van-der-pol", 2, 2,
        {"mu": (0.1, 5.0)},
        ((-3.0, 3.0), (-3.0, 3.0)),
        van_der_pol_field,
    ),
    "cartpole": Family(
        "cartpole", 6, 1,
        {"cart_mass": (0.5, 1.5)},
        (),
        cartpole_inverse_dynamics,
        _cartpole_inputs,
    ),
}

ODE_SYSTEMS = ("fitzhugh-nagumo", "mass-spring", "pendulum", "van-der-pol", "cartpole")


def family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown task family {name!r}; expected one of {sorted(FAMILIES)}") from None


def _draw_params(fam: Family, rng: np.random.Generator) -> dict:
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in fam.param_ranges.items()}


def sample_sine_task(rng: np.random.Generator) -> Task:
    return Task("sine", _draw_params(FAMILIES["sine"], rng))


def sample_ode_task(system: str, rng: np.random.Generator) -> Task:
    if system not in ODE_SYSTEMS:
        raise ConfigError(f"unknown ODE system {system!r}; expected one of {list(ODE_SYSTEMS)}")
    fam = FAMILIES[system]
    params = _draw_params(fam, rng)
    if system != "cartpole":
        return Task(system, params)
    init = np.array([
        rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)
    ])
    coeffs = np.column_stack([
        rng.uniform(-2.0, 2.0, 3), rng.uniform(0.5, 5.0, 3), rng.uniform(0.0, 2 * math.pi, 3)
    ])
    traj = simulate_cartpole(params["cart_mass"], init, coeffs)
    return Task(system, params, {"trajectory": traj})


def sample_task(name: str, rng: np.random.Generator) -> Task:
    if name == "sine":
        return sample_sine_task(rng)
    return sample_ode_task(name, rng)


def sample_support_query(task: Task, n_support: int, n_query: int, rng: np.random.Generator) -> TaskBatch:
    """Draw ``N + M`` i.i.d. points and split them into support and query."""
    if n_support < 1 or n_query < 1:
        raise ContractError("support and query sizes must be at least 1")
    x = task.sample_inputs(rng, n_support + n_query)
    y = task(x)
    desc = {"family": task.family, **task.params}
    return TaskBatch(x[:n_support], y[:n_support], x[n_support:], y[n_support:], desc)


def task_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for task ``index`` of ``stream`` under ``seed``."""
    return np.random.default_rng([int(seed), int(stream), int(index)])


def make_batch(name: str, n_support: int, n_query: int, seed: int, index: int, stream: int = 0) -> TaskBatch:
    """Reproducible ``(seed, index) -> TaskBatch``."""
    rng = task_rng(seed, index, stream)
    return sample_support_query(sample_task(name, rng), n_support, n_query, rng)


def add_label_noise(batch: TaskBatch, sigma: float, rng: np.random.Generator) -> TaskBatch:
    """Gaussian noise on the support targets only."""
    if sigma < 0:
        raise ContractError(f"noise level must be non-negative, got {sigma}")
    if sigma == 0:
        return batch
    noisy = batch.support_y + rng.normal(0.0, sigma, size=batch.support_y.shape)
    return replace(batch, support_y=noisy)


# ---------------------------------------------------------------------------
# CSV time series
# ---------------------------------------------------------------------------


def read_csv_series(path: str | Path, time_column: str, value_columns: Sequence[str]) -> np.ndarray:
    """Value columns of a headed CSV as an ``(rows, k)`` array."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        for col in (time_column, *value_columns):
            if col not in header:
                raise IngestionError(f"{path}: missing column {col!r}")
        idx = [header.index(c) for c in value_columns]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[i]) for i in idx])
            except (ValueError, IndexError):
                raise IngestionError(f"{path}: row {line_no} has a non-numeric or missing value") from None
    values = np.array(rows, dtype=np.float64).reshape(-1, len(value_columns))
    if not np.isfinite(values).all():
        raise IngestionError(f"{path}: non-finite measurement")
    return values


def load_csv_series(
    path: str | Path,
    n_support: int,
    n_query: int,
    rng: np.random.Generator,
    time_column: str = "time",
    value_columns: Sequence[str] = ("value",),
    num_tasks: int | None = None,
) -> Iterator[TaskBatch]:
    """Interpolation tasks from random contiguous windows of a series.

    Each window of ``n_support + n_query`` rows is shuffled into support and
    query; the input is the row's relative position in the window, in [0, 1].
    """
    values = read_csv_series(path, time_column, value_columns)
    window = n_support + n_query
    if n_support < 1 or n_query < 1:
        raise ContractError("support and query sizes must be at least 1")
    if window > values.shape[0]:
        raise IngestionError(f"{path}: window of {window} rows exceeds the {values.shape[0]} available")
    positions = (np.arange(window) / max(window - 1, 1)).reshape(-1, 1)

    def gen():
        produced = 0
        while num_tasks is None or produced < num_tasks:
            start = int(rng.integers(0, values.shape[0] - window + 1))
            seg = values[start : start + window]
            perm = rng.permutation(window)
            s, q = perm[:n_support], perm[n_support:]
            yield TaskBatch(positions[s], seg[s], positions[q], seg[q], {"family": "csv", "start": start})
            produced += 1

    return gen()
