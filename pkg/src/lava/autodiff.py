"""Dense float64 matrices with a define-by-run reverse-mode tape.

Every value is a 2-D ``Tensor``. Primitives check shapes, refuse to produce
non-finite values, and, when a :class:`Tape` is active and any input is
tracked, append a node carrying the vector-Jacobian product for that kind.

The tape differentiates to first order only. Curvature terms that the outer
loop must see are built explicitly out of these primitives by the callers.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import lapack

from .errors import ContractError, DimensionError, NumericError, SingularMatrixError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "lava_active_tape", default=None
)

SYMMETRY_TOL = 1e-9


class Tensor:
    """Immutable 2-D float64 matrix, optionally bound to a tape node."""

    __slots__ = ("_data", "node_id", "tape")

    def __init__(self, data, *, _node_id: int | None = None, _tape: "Tape | None" = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got ndim={arr.ndim}")
        if not np.isfinite(arr).all():
            raise NumericError("tensor contains non-finite values")
        arr.flags.writeable = False
        self._data = arr
        self.node_id = _node_id
        self.tape = _tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, node_id=None, tape=None) -> "Tensor":
        # trusted internal constructor; arr is already 2-D float64 and finite
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t._data = arr
        t.node_id = node_id
        t.tape = tape
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self._data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(_as_tensor(other), self)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise DimensionError("division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    """Coerce arrays and nested lists to an untracked :class:`Tensor`."""
    return _as_tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjp: VJP | None = None
    adjoint: np.ndarray | None = field(default=None, repr=False)


class Tape:
    """Records primitives applied to watched tensors.

    Use as a context manager; nodes get ids in creation order, which is a
    topological order of the graph by construction.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, x) -> Tensor:
        """Register ``x`` as a leaf and return the tracked handle."""
        x = _as_tensor(x)
        node_id = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), x.data))
        return Tensor._wrap(x.data, node_id, self)

    def _record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
        ids = tuple(t.node_id if t.tape is self else -1 for t in inputs)
        node_id = len(self.nodes)
        self.nodes.append(TapeNode(kind, ids, value, vjp))
        return Tensor._wrap(value, node_id, self)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar root; returns node id -> adjoint."""
        if root.shape != (1, 1):
            raise ContractError(f"backward root must be 1x1, got {root.shape}")
        if root.tape is not self:
            raise ContractError("root was not recorded on this tape")
        adj: dict[int, np.ndarray] = {root.node_id: np.ones((1, 1))}
        for nid in range(root.node_id, -1, -1):
            g = adj.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            grads = node.vjp(g)
            for src, gi in zip(node.inputs, grads):
                if src < 0 or gi is None:
                    continue
                prev = adj.get(src)
                adj[src] = gi if prev is None else prev + gi
        for nid, g in adj.items():
            self.nodes[nid].adjoint = g
        return adj

    def gradient(self, root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of ``root`` for each tensor in ``wrt`` (zeros when unreached)."""
        adj = self.backward(root)
        out = []
        for t in wrt:
            if t.tape is not self:
                raise ContractError("gradient requested for a tensor not on this tape")
            g = adj.get(t.node_id)
            out.append(np.zeros(t.shape) if g is None else g)
        return out


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Backward pass on the tape that recorded ``root``."""
    if root.tape is None:
        raise ContractError("root is not on a tape")
    return root.tape.backward(root)


def _finish(kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
    if not np.isfinite(value).all():
        raise NumericError(f"{kind} produced non-finite values")
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.tape is tape for t in inputs):
        return tape._record(kind, inputs, value, vjp)
    return Tensor._wrap(value)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _finish("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _finish("add", (a, b), a.data + b.data, lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("subtract", a, b)
    return _finish("subtract", (a, b), a.data - b.data, lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _same_shape("multiply", a, b)
    A, B = a.data, b.data
    return _finish("multiply", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if not np.isfinite(s):
        raise NumericError("scale factor is not finite")
    return _finish("scale", (a,), a.data * s, lambda g: (g * s,))


def transpose(a: Tensor) -> Tensor:
    return _finish("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def concat_columns(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise DimensionError(f"concat_columns: row counts {a.rows} and {b.rows}")
    n = a.cols
    value = np.concatenate([a.data, b.data], axis=1)
    return _finish("concat-columns", (a, b), value, lambda g: (g[:, :n], g[:, n:]))


def append_ones(a: Tensor) -> Tensor:
    """Append a trailing column of ones (bias padding)."""
    value = np.concatenate([a.data, np.ones((a.rows, 1))], axis=1)
    n = a.cols
    return _finish("row-append-ones", (a,), value, lambda g: (g[:, :n],))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Sum of all entries (1x1), or over ``axis`` keeping 2-D shape."""
    shape = a.shape
    if axis is None:
        value = np.array([[a.data.sum()]])
        return _finish("sum", (a,), value, lambda g: (np.full(shape, g[0, 0]),))
    if axis not in (0, 1):
        raise DimensionError(f"sum: axis must be 0, 1 or None, got {axis}")
    value = a.data.sum(axis=axis, keepdims=True)
    return _finish("sum", (a,), value, lambda g: (np.broadcast_to(g, shape).copy(),))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over rows of the squared Euclidean row residual."""
    _same_shape("mean-squared-error", pred, target)
    r = pred.data - target.data
    m = pred.rows
    value = np.array([[np.sum(r * r) / m]])

    def vjp(g):
        d = (2.0 * g[0, 0] / m) * r
        return d, -d

    return _finish("mean-squared-error", (pred, target), value, vjp)


def outer(u: Tensor, v: Tensor) -> Tensor:
    """``uᵀ v`` for row vectors ``u`` (1×m) and ``v`` (1×n)."""
    if u.rows != 1 or v.rows != 1:
        raise DimensionError(f"outer: expects row vectors, got {u.shape}, {v.shape}")
    U, V = u.data, v.data
    return _finish(
        "outer-product",
        (u, v),
        U.T @ V,
        lambda g: ((g @ V.T).T, U @ g),
    )


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a 1×n row to every row of an m×n tensor (layer bias)."""
    if row.rows != 1 or row.cols != a.cols:
        raise DimensionError(f"add_row: {a.shape} + {row.shape}")
    return _finish(
        "add-row",
        (a, row),
        a.data + row.data,
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``a[start:stop]``."""
    if not 0 <= start < stop <= a.rows:
        raise DimensionError(f"take_rows: [{start}:{stop}] outside {a.rows} rows")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _finish("take-rows", (a,), a.data[start:stop].copy(), vjp)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Vertical concatenation of tensors with equal column counts."""
    if not parts:
        raise DimensionError("stack_rows needs at least one tensor")
    cols = parts[0].cols
    if any(p.cols != cols for p in parts):
        raise DimensionError("stack_rows: column counts differ")
    bounds = np.cumsum([0] + [p.rows for p in parts])
    value = np.concatenate([p.data for p in parts], axis=0)
    return _finish(
        "stack-rows",
        tuple(parts),
        value,
        lambda g: [g[bounds[i] : bounds[i + 1]] for i in range(len(parts))],
    )


# ---------------------------------------------------------------------------
# Symmetric positive-definite solve
# ---------------------------------------------------------------------------


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises SingularMatrixError with the failing pivot."""
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise SingularMatrixError(
            f"matrix is not positive definite (leading minor {info} fails)", pivot=info - 1
        )
    if info < 0:
        raise ContractError(f"dpotrf rejected argument {-info}")
    return c


def cho_solve(c: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise ContractError(f"dpotrs rejected argument {-info}")
    return x


def check_symmetric(a: np.ndarray, tol: float = SYMMETRY_TOL) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    scale_ = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > tol * scale_:
        raise ContractError("matrix is not symmetric within tolerance")


def spd_solve(a: Tensor, b: Tensor) -> Tensor:
    """Solve ``a x = b`` for symmetric positive-definite ``a`` via Cholesky.

    Adjoints: ``b̄ = a⁻¹ ḡ`` and ``ā = -sym(b̄ xᵀ)``.
    """
    if a.rows != a.cols or a.rows != b.rows:
        raise DimensionError(f"spd_solve: a {a.shape}, b {b.shape}")
    check_symmetric(a.data)
    c = cholesky(a.data)
    x = cho_solve(c, b.data)

    def vjp(g):
        gb = cho_solve(c, g)
        ga = -gb @ x.T
        return 0.5 * (ga + ga.T), gb

    return _finish("spd-solve", (a, b), x, vjp)


def forward_primitive(kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    """Dispatch a primitive by its kind name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "elementwise-multiply": multiply,
    "scalar-scale": scale,
    "transpose": transpose,
    "relu": relu,
    "concat-columns": concat_columns,
    "row-append-ones": append_ones,
    "sum": sum,
    "mean-squared-error": mse,
    "outer-product": outer,
    "add-row": add_row,
    "take-rows": take_rows,
    "stack-rows": stack_rows,
    "spd-solve": spd_solve,
}


def eye(n: int) -> Tensor:
    return Tensor._wrap(np.eye(n))


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor._wrap(np.zeros((rows, cols)))


def ones(rows: int, cols: int) -> Tensor:
    return Tensor._wrap(np.ones((rows, cols)))
