"""Finite-difference oracles shared by the test modules."""

import numpy as np

from lava import models, training

FD_STEP = 1e-5

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def central_diff(f, arrays, coords, step=FD_STEP):
    """Central differences of scalar ``f(arrays)`` at ``coords`` = [(array_idx, (i, j)), ...]."""
    out = []
    for a_idx, ij in coords:
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[a_idx][ij] += step
        minus[a_idx][ij] -= step
        out.append((f(plus) - f(minus)) / (2 * step))
    return np.array(out)


def rel_err(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def random_coords(rng, shapes, n):
    """``n`` random (array index, entry) pairs across arrays of the given shapes."""
    sizes = np.array([r * c for r, c in shapes])
    picks = rng.choice(sizes.sum(), size=min(n, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    coords = []
    for p in picks:
        a = int(np.searchsorted(bounds, p, side="right"))
        off = p - (bounds[a - 1] if a else 0)
        coords.append((a, np.unravel_index(off, shapes[a])))
    return coords


def random_spd(rng, n, cond=None):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    if cond is None:
        eig = rng.uniform(0.2, 3.0, n)
    else:
        eig = np.geomspace(1.0, cond, n)
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


def tiny_params(cfg, seed=0):
    meta = models.init_params(seed, cfg.architecture(), cfg.model_mode)
    rng = np.random.default_rng(seed)
    # nonzero biases and context so every parameter matters
    return meta.with_flat([a + rng.uniform(-0.5, 0.5, a.shape) for a in meta.arrays()])


def kink_margin(meta, batch, cfg):
    """Smallest |pre-activation| met anywhere in the adapt-then-query pass."""
    xs = []
    for tb in batch:
        if cfg.model_mode == models.CONTEXT:
            res = training.adapt(meta, tb.support_x, tb.support_y, cfg)
            phi = np.repeat(meta.context.data, tb.n_support, axis=0)
            xs.append(np.concatenate([tb.support_x, phi], axis=1))
            phi_q = np.repeat(res.params.data, tb.n_query, axis=0)
            xs.append(np.concatenate([tb.query_x, phi_q], axis=1))
        else:
            xs += [tb.support_x, tb.query_x]
    h = np.concatenate(xs)
    margin = np.inf
    for w, b in meta.layers:
        a = h @ w.data + b.data
        margin = min(margin, np.min(np.abs(a)))
        h = np.maximum(a, 0)
    return margin
