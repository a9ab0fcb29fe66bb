"""MLP feature extractor with a linear head, and its context-conditioned variant.

Weights follow the ``h @ W + b`` convention (``W`` is fan_in × fan_out). The
final linear layer is always stored as a ``k × (d+1)`` matrix ``[W | b]`` so
that predictions are ``z @ headᵀ`` with ``z`` the ones-padded features.

In last-layer mode the head is the adapted quantity. In context mode the head
belongs to the meta-learned network and a context row vector, concatenated to
the input, is adapted instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ContractError, DimensionError

LAST_LAYER = "last-layer"
CONTEXT = "context"
MODES = (LAST_LAYER, CONTEXT)


@dataclass(frozen=True)
class Architecture:
    d_in: int = 1
    k: int = 1
    hidden: tuple[int, ...] = (64, 64, 64)
    context_dim: int = 0

    def __post_init__(self):
        if self.d_in < 1 or self.k < 1 or not self.hidden or min(self.hidden) < 1:
            raise ContractError(f"invalid architecture {self}")
        if self.context_dim < 0:
            raise ContractError("context_dim must be non-negative")

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    @property
    def net_input_dim(self) -> int:
        return self.d_in + self.context_dim


@dataclass(frozen=True)
class MetaParams:
    """Snapshot of meta-learned parameters.

    ``layers`` are the hidden (weight, bias) pairs, ``head`` the output layer
    ``[W | b]`` and ``context`` the 1×c prior (context mode only).
    """

    arch: Architecture
    mode: str
    layers: tuple[tuple[Tensor, Tensor], ...]
    head: Tensor
    context: Tensor | None = None
    names: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}")
        if (self.mode == CONTEXT) != (self.context is not None):
            raise ContractError("context prior is present iff mode is 'context'")
        names = []
        for i in range(len(self.layers)):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        names.append("head")
        if self.context is not None:
            names.append("context")
        object.__setattr__(self, "names", tuple(names))
        self._check_shapes()

    def _check_shapes(self) -> None:
        expected = param_shapes(self.arch, self.mode)
        for name, t, shp in zip(self.names, self.flat(), expected):
            if t.shape != shp:
                raise DimensionError(f"{name}: expected shape {shp}, got {t.shape}")

    def flat(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in self.layers:
            out += [w, b]
        out.append(self.head)
        if self.context is not None:
            out.append(self.context)
        return out

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.flat()]

    def with_flat(self, tensors: Sequence) -> "MetaParams":
        """New snapshot with the same structure and the given tensors."""
        ts = [ad.as_tensor(t) for t in tensors]
        if len(ts) != len(self.names):
            raise DimensionError(f"expected {len(self.names)} tensors, got {len(ts)}")
        n = len(self.layers)
        layers = tuple((ts[2 * i], ts[2 * i + 1]) for i in range(n))
        head = ts[2 * n]
        context = ts[2 * n + 1] if self.context is not None else None
        return MetaParams(self.arch, self.mode, layers, head, context)

    def watch(self, tape: ad.Tape) -> "MetaParams":
        """Copy whose tensors are leaves on ``tape``."""
        return self.with_flat([tape.watch(t) for t in self.flat()])

    def detach(self) -> "MetaParams":
        return self.with_flat([t.detach() for t in self.flat()])

    def num_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self.flat()]))


def param_shapes(arch: Architecture, mode: str) -> list[tuple[int, int]]:
    dims = [arch.net_input_dim if mode == CONTEXT else arch.d_in, *arch.hidden]
    shapes: list[tuple[int, int]] = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        shapes += [(fan_in, fan_out), (1, fan_out)]
    shapes.append((arch.k, arch.feature_dim + 1))
    if mode == CONTEXT:
        shapes.append((1, arch.context_dim))
    return shapes


def init_params(seed: int, arch: Architecture, mode: str = LAST_LAYER) -> MetaParams:
    """Fan-in scaled uniform weights, zero biases, zero context prior."""
    if mode == CONTEXT and arch.context_dim < 1:
        # c = 0 is allowed for context_forward but there is nothing to adapt
        raise ContractError("context mode needs context_dim >= 1")
    rng = np.random.default_rng(seed)
    dims = [arch.net_input_dim if mode == CONTEXT else arch.d_in, *arch.hidden]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((Tensor(w), Tensor(np.zeros((1, fan_out)))))
    d = arch.feature_dim
    bound = 1.0 / np.sqrt(d)
    head = np.concatenate([rng.uniform(-bound, bound, size=(arch.k, d)), np.zeros((arch.k, 1))], axis=1)
    context = Tensor(np.zeros((1, arch.context_dim))) if mode == CONTEXT else None
    return MetaParams(arch, mode, tuple(layers), Tensor(head), context)


# ---------------------------------------------------------------------------
# Forward maps
# ---------------------------------------------------------------------------


def features(layers: Sequence[tuple[Tensor, Tensor]], x: Tensor) -> Tensor:
    """Penultimate ReLU activations with a trailing ones column."""
    h = x
    for w, b in layers:
        if h.cols != w.rows:
            raise DimensionError(f"features: input has {h.cols} columns, layer expects {w.rows}")
        h = ad.relu(ad.add_row(h @ w, b))
    return ad.append_ones(h)


def head(theta: Tensor, z: Tensor) -> Tensor:
    """Linear read-out ``z @ θᵀ``."""
    if theta.cols != z.cols:
        raise DimensionError(f"head: θ {theta.shape} vs z {z.shape}")
    return z @ ad.transpose(theta)


def broadcast_context(phi: Tensor, rows: int) -> Tensor:
    return ad.ones(rows, 1) @ phi


def context_forward(layers, out_head: Tensor, phi: Tensor, x: Tensor) -> Tensor:
    """MLP output on ``[x | φ]`` with φ repeated for every row of ``x``."""
    if phi.rows != 1:
        raise DimensionError(f"context must be a row vector, got {phi.shape}")
    if phi.cols == 0:
        return head(out_head, features(layers, x))
    return context_forward_rows(layers, out_head, broadcast_context(phi, x.rows), x)


def context_forward_rows(layers, out_head: Tensor, phis: Tensor, x: Tensor) -> Tensor:
    """Like :func:`context_forward` but with a separate context per row."""
    if phis.rows != x.rows:
        raise DimensionError(f"context rows {phis.rows} vs input rows {x.rows}")
    return head(out_head, features(layers, ad.concat_columns(x, phis)))


def predict(params: MetaParams, x: Tensor, adapted: Tensor | None = None) -> Tensor:
    """Prediction with the prior (``adapted=None``) or with adapted parameters."""
    if params.mode == LAST_LAYER:
        theta = params.head if adapted is None else adapted
        return head(theta, features(params.layers, x))
    phi = params.context if adapted is None else adapted
    return context_forward(params.layers, params.head, phi, x)


def context_jacobian(layers, out_head: Tensor, phis: Tensor, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Outputs and per-output Jacobians w.r.t. the context, built from primitives.

    Returns ``(out, [J_0, ..., J_{k-1}])`` where ``J_j`` is N×c and row ``i``
    holds ``∂ out[i, j] / ∂ φ_i``. ReLU gates enter as constants, which is
    exact wherever the network is differentiable, so the Jacobians stay
    differentiable w.r.t. the weights on a first-order tape.
    """
    n, c = phis.rows, phis.cols
    d_in = x.cols
    h = ad.concat_columns(x, phis)
    masks = []
    for w, b in layers:
        a = ad.add_row(h @ w, b)
        masks.append(Tensor._wrap((a.data > 0).astype(np.float64)))
        h = ad.relu(a)
    out = ad.append_ones(h) @ ad.transpose(out_head)

    k, d1 = out_head.shape
    drop_bias = Tensor._wrap(np.eye(d1)[:, : d1 - 1])
    pick_ctx = Tensor._wrap(np.eye(d_in + c)[:, d_in:])
    row_ones = ad.ones(n, 1)
    jacs = []
    for j in range(k):
        sel = Tensor._wrap(np.eye(k)[j : j + 1])
        w_out = sel @ out_head @ drop_bias
        delta = ad.multiply(row_ones @ w_out, masks[-1])
        for (w, _), m in zip(reversed(layers[1:]), reversed(masks[:-1])):
            delta = ad.multiply(delta @ ad.transpose(w), m)
        jacs.append(delta @ ad.transpose(layers[0][0]) @ pick_ctx)
    return out, jacs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout (all little-endian):
#   8 bytes   magic b"LAVACKPT"
#   u32       format version
#   u32       mode code (0 last-layer, 1 context)
#   u32 x 4   d_in, k, context_dim, number of hidden layers
#   u32 x L   hidden widths
#   f64 ...   tensors in declaration order, row-major, shapes implied above

MAGIC = b"LAVACKPT"
VERSION = 1


def save_checkpoint(params: MetaParams, path: str | Path) -> None:
    a = params.arch
    header = MAGIC + struct.pack(
        f"<6I{len(a.hidden)}I",
        VERSION,
        MODES.index(params.mode),
        a.d_in,
        a.k,
        a.context_dim,
        len(a.hidden),
        *a.hidden,
    )
    body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.arrays())
    Path(path).write_bytes(header + body)


def load_checkpoint(path: str | Path, expected: Architecture | None = None) -> MetaParams:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    try:
        version, mode_code, d_in, k, c, n_hidden = struct.unpack_from("<6I", raw, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        hidden = struct.unpack_from(f"<{n_hidden}I", raw, 32)
        mode = MODES[mode_code]
    except (struct.error, IndexError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt header") from exc
    arch = Architecture(d_in=d_in, k=k, hidden=tuple(hidden), context_dim=c)
    if expected is not None and expected != arch:
        raise CheckpointError(f"{path}: {_first_mismatch(arch, expected, mode)}")
    offset = 32 + 4 * n_hidden
    shapes = param_shapes(arch, mode)
    total = int(np.sum([r * cc for r, cc in shapes]))
    if len(raw) - offset != 8 * total:
        raise CheckpointError(f"{path}: payload holds {len(raw) - offset} bytes, expected {8 * total}")
    flat = np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64)
    if not np.isfinite(flat).all():
        raise CheckpointError(f"{path}: non-finite parameter values")
    if mode == CONTEXT and c < 1:
        raise CheckpointError(f"{path}: context checkpoint with zero context size")
    tensors, pos = [], 0
    for r, cc in shapes:
        tensors.append(Tensor(flat[pos : pos + r * cc].reshape(r, cc)))
        pos += r * cc
    return init_params(0, arch, mode).with_flat(tensors)


def _first_mismatch(found: Architecture, expected: Architecture, mode: str) -> str:
    names = init_params(0, found, mode).names
    got, want = param_shapes(found, mode), param_shapes(expected, mode)
    for i, name in enumerate(names):
        if i >= len(want) or got[i] != want[i]:
            exp = want[i] if i < len(want) else "absent"
            return f"architecture mismatch at tensor {name}: checkpoint {got[i]}, expected {exp}"
    return f"architecture mismatch: checkpoint {found}, expected {expected}"
