"""Per-point Laplace posteriors, their fusion, and the averaging baseline.

Each support point gives one gradient step from the prior and a precision
(the loss curvature at the adapted point). Fusing the resulting Gaussians
yields the precision-weighted mean

    θ̂ = (Σ H̃ᵢ)⁻¹ Σ H̃ᵢ θ̂ᵢ,   H̃ᵢ = (Hᵢ + εI) / (1 + ε).

Adapted parameters are handled as row blocks: a k×m head or a 1×c context.
For the last-layer head the curvature of ``‖θz − y‖²`` is ``I_k ⊗ 2zᵀz``, so
every output row shares the same m×m factor and the fusion is solved
row-wise against that factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .errors import ContractError, DimensionError, NumericError


@dataclass(frozen=True)
class PointPosterior:
    """One support point's Gaussian: mean ``params`` and regularized precision."""

    params: Tensor
    precision: Tensor
    raw_precision: Tensor | None = None


@dataclass(frozen=True)
class AdaptationResult:
    params: Tensor
    posteriors: list[PointPosterior] = field(default_factory=list)
    condition: float | None = None
    raw_condition: float | None = None
    precision_sum: Tensor | None = None


def inner_step(prior: Tensor, grad, alpha: float) -> Tensor:
    """One gradient step ``prior - α·grad``."""
    if not alpha > 0:
        raise ContractError(f"step size must be positive, got {alpha}")
    if not isinstance(grad, Tensor):
        arr = np.asarray(grad, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("inner step received a non-finite gradient")
        grad = Tensor(arr)
    if grad.shape != prior.shape:
        raise DimensionError(f"gradient {grad.shape} vs parameters {prior.shape}")
    return prior - alpha * grad


def head_point_gradient(theta: Tensor, z: Tensor, y: Tensor) -> Tensor:
    """Gradient of ``‖θz − y‖²`` in θ for one padded feature row ``z``."""
    r = head_residual(theta, z, y)
    return 2.0 * ad.outer(r, z)


def head_residual(theta: Tensor, z: Tensor, y: Tensor) -> Tensor:
    return models.head(theta, z) - y


def head_point_hessian(z: Tensor) -> Tensor:
    """Kronecker factor ``G = 2 zᵀz`` of the per-point head Hessian ``I_k ⊗ G``."""
    if z.rows != 1:
        raise DimensionError(f"expected a single feature row, got {z.shape}")
    return 2.0 * ad.outer(z, z)


def context_point_hessian(
    loss: Callable[[np.ndarray], float], phi_hat, step: float = 1e-4
) -> np.ndarray:
    """Central finite-difference Hessian of a scalar loss at ``phi_hat``.

    The result is a plain array and carries no gradient information.
    """
    phi = np.asarray(phi_hat.data if isinstance(phi_hat, Tensor) else phi_hat, dtype=np.float64)
    shape = phi.shape
    x0 = phi.ravel()
    c = x0.size
    if c > 16:
        raise ContractError(f"finite-difference Hessian limited to 16 coordinates, got {c}")

    def f(v):
        val = float(loss(v.reshape(shape)))
        if not np.isfinite(val):
            raise NumericError("loss is not finite at a probe point")
        return val

    h = np.zeros((c, c))
    eye = np.eye(c) * step
    for a in range(c):
        for b in range(a, c):
            ea, eb = eye[a], eye[b]
            h[a, b] = (f(x0 + ea + eb) - f(x0 + ea - eb) - f(x0 - ea + eb) + f(x0 - ea - eb)) / (
                4.0 * step * step
            )
            h[b, a] = h[a, b]
    return 0.5 * (h + h.T)


def regularize(h, eps: float) -> Tensor:
    """Shrink a precision towards identity: ``(H + εI) / (1 + ε)``."""
    if not eps > 0:
        raise ContractError(f"regularizer must be positive, got {eps}")
    h = ad.as_tensor(h)
    ad.check_symmetric(h.data)
    return (h + eps * ad.eye(h.rows)) / (1.0 + eps)


def fuse(posteriors: Sequence[PointPosterior], with_condition: bool = False) -> AdaptationResult:
    """Mean of the product of the per-point Gaussians.

    Parameters are row blocks (k×m) and every row is fused against the shared
    m×m precision, i.e. ``θ̂ Σ H̃ᵢ = Σ θ̂ᵢ H̃ᵢ``.
    """
    if not posteriors:
        raise ContractError("fuse needs at least one posterior")
    m = posteriors[0].precision.rows
    shape = posteriors[0].params.shape
    for p in posteriors:
        if p.precision.shape != (m, m) or p.params.shape != shape or shape[1] != m:
            raise DimensionError("posteriors disagree in shape")
    total = posteriors[0].precision
    rhs = posteriors[0].precision @ ad.transpose(posteriors[0].params)
    for p in posteriors[1:]:
        total = total + p.precision
        rhs = rhs + p.precision @ ad.transpose(p.params)
    fused = ad.transpose(ad.spd_solve(total, rhs))
    cond = raw = None
    if with_condition:
        cond = condition_number(total.data)
        if posteriors[0].raw_precision is not None:
            raw = condition_number(np.sum([p.raw_precision.data for p in posteriors], axis=0))
    return AdaptationResult(fused, list(posteriors), cond, raw, total)


def effective_weights(posteriors: Sequence[PointPosterior]) -> list[np.ndarray]:
    """``Wᵢ = (Σ H̃ⱼ)⁻¹ H̃ᵢ`` implied by :func:`fuse`."""
    total = np.sum([p.precision.data for p in posteriors], axis=0)
    c = ad.cholesky(total)
    return [ad.cho_solve(c, p.precision.data) for p in posteriors]


def average_adapt(theta0: Tensor, grads: Sequence, alpha: float) -> Tensor:
    """Single step on the mean support loss (mean of per-point gradients)."""
    if not grads:
        raise ContractError("average_adapt needs at least one gradient")
    gs = [g if isinstance(g, Tensor) else Tensor(g) for g in grads]
    mean = gs[0]
    for g in gs[1:]:
        mean = mean + g
    return inner_step(theta0, mean / len(gs), alpha)


def min_variance_weights(covariances: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Minimum trace-variance linear weights summing to identity.

    ``Wᵢ = (Σ Σⱼ⁻¹)⁻¹ Σᵢ⁻¹``; inverses come from Cholesky solves.
    """
    if not covariances:
        raise ContractError("need at least one covariance")
    m = np.asarray(covariances[0]).shape[0]
    eye = np.eye(m)
    precisions = []
    for s in covariances:
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (m, m):
            raise DimensionError("covariances differ in shape")
        ad.check_symmetric(s)
        precisions.append(ad.cho_solve(ad.cholesky(s), eye))
    total = np.sum(precisions, axis=0)
    c = ad.cholesky(0.5 * (total + total.T))
    return [ad.cho_solve(c, p) for p in precisions]


def combined_covariance(weights: Sequence[np.ndarray], covariances: Sequence[np.ndarray]) -> np.ndarray:
    """Covariance ``Σ Wᵢ Σᵢ Wᵢᵀ`` of ``Σ Wᵢ θᵢ`` for independent ``θᵢ``."""
    return np.sum([w @ s @ w.T for w, s in zip(weights, covariances)], axis=0)


def condition_number(a: np.ndarray, singular_at: float = 1e-13) -> float:
    """Ratio of extreme singular values; ``inf`` when numerically singular."""
    s = np.linalg.svd(np.asarray(a, dtype=np.float64), compute_uv=False)
    if s[0] == 0.0 or s[-1] <= singular_at * s[0]:
        return float("inf")
    return float(s[0] / s[-1])


# ---------------------------------------------------------------------------
# Per-point posteriors
# ---------------------------------------------------------------------------


def head_posteriors(theta0: Tensor, z: Tensor, y: Tensor, alpha: float, eps: float) -> list[PointPosterior]:
    """Per-point steps and Kronecker factors for last-layer adaptation."""
    out = []
    for i in range(z.rows):
        zi, yi = ad.take_rows(z, i, i + 1), ad.take_rows(y, i, i + 1)
        theta_i = inner_step(theta0, head_point_gradient(theta0, zi, yi), alpha)
        g = head_point_hessian(zi)
        out.append(PointPosterior(theta_i, regularize(g, eps), g))
    return out


def context_posteriors(params: models.MetaParams, x: Tensor, y: Tensor, alpha: float, eps: float) -> list[PointPosterior]:
    """Per-point context steps with exact Gauss-Newton curvature.

    For a ReLU network with squared loss the second derivative of the output
    in the context vanishes almost everywhere, so ``2 Σⱼ JⱼᵀJⱼ`` is the exact
    Hessian at the adapted context.
    """
    out = []
    for i in range(x.rows):
        xi, yi = ad.take_rows(x, i, i + 1), ad.take_rows(y, i, i + 1)
        pred, jacs = models.context_jacobian(params.layers, params.head, params.context, xi)
        r = pred - yi
        grad = _weighted_jacobian_rows(r, jacs)
        phi_i = inner_step(params.context, grad, alpha)
        _, jacs_hat = models.context_jacobian(params.layers, params.head, phi_i, xi)
        h = _gauss_newton(jacs_hat)
        out.append(PointPosterior(phi_i, regularize(h, eps), h))
    return out


def _weighted_jacobian_rows(r: Tensor, jacs: list[Tensor]) -> Tensor:
    """Row-wise ``2 Σⱼ r[:, j] · Jⱼ`` (per-point context gradients)."""
    n, k = r.shape
    c = jacs[0].cols
    spread = ad.ones(1, c)
    total = None
    for j, jac in enumerate(jacs):
        col = r if k == 1 else r @ Tensor._wrap(np.eye(k)[:, j : j + 1])
        term = ad.multiply(col @ spread, jac)
        total = term if total is None else total + term
    return 2.0 * total


def _gauss_newton(jacs: list[Tensor]) -> Tensor:
    total = None
    for jac in jacs:
        term = ad.transpose(jac) @ jac
        total = term if total is None else total + term
    return 2.0 * total


# ---------------------------------------------------------------------------
# Batched forms used inside the training loop
# ---------------------------------------------------------------------------


def lava_head(theta0: Tensor, z: Tensor, y: Tensor, alpha: float, eps: float) -> tuple[Tensor, Tensor]:
    """Fused head for a whole support set without per-point loops.

    Returns ``(θ̂, Σ H̃ᵢ)``. Matches :func:`fuse` over :func:`head_posteriors`.
    """
    n, m = z.shape
    k = theta0.rows
    pred = z @ ad.transpose(theta0)
    resid = pred - y
    sq_norm = ad.sum(ad.multiply(z, z), axis=1)
    if k > 1:
        sq_norm = sq_norm @ ad.ones(1, k)
    # fitted value of each per-point step at its own feature row
    fitted = pred - (2.0 * alpha) * ad.multiply(resid, sq_norm)
    zt = ad.transpose(z)
    step_sum = n * theta0 - (2.0 * alpha) * (ad.transpose(resid) @ z)
    shrink = 1.0 / (1.0 + eps)
    total = (2.0 * (zt @ z) + (n * eps) * ad.eye(m)) * shrink
    rhs = (2.0 * (zt @ fitted) + eps * ad.transpose(step_sum)) * shrink
    return ad.transpose(ad.spd_solve(total, rhs)), total


def lava_context(params: models.MetaParams, x: Tensor, y: Tensor, alpha: float, eps: float) -> tuple[Tensor, Tensor]:
    """Fused context for a whole support set; returns ``(φ̂, Σ H̃ᵢ)``."""
    n = x.rows
    c = params.context.cols
    phi0_rows = models.broadcast_context(params.context, n)
    pred, jacs = models.context_jacobian(params.layers, params.head, phi0_rows, x)
    grads = _weighted_jacobian_rows(pred - y, jacs)
    phi_rows = phi0_rows - alpha * grads
    _, jacs_hat = models.context_jacobian(params.layers, params.head, phi_rows, x)
    shrink = 1.0 / (1.0 + eps)
    gn = None
    rhs = None
    for jac in jacs_hat:
        jt = ad.transpose(jac)
        proj = ad.sum(ad.multiply(jac, phi_rows), axis=1)
        gn = jt @ jac if gn is None else gn + jt @ jac
        rhs = jt @ proj if rhs is None else rhs + jt @ proj
    total = (2.0 * gn + (n * eps) * ad.eye(c)) * shrink
    rhs = (2.0 * rhs + eps * (ad.transpose(phi_rows) @ ad.ones(n, 1))) * shrink
    return ad.transpose(ad.spd_solve(total, rhs)), total


def anil_head(theta0: Tensor, z: Tensor, y: Tensor, alpha: float, steps: int = 1) -> Tensor:
    """``steps`` gradient steps on the mean support loss of the head."""
    theta = theta0
    scale = 2.0 / z.rows
    for _ in range(steps):
        resid = z @ ad.transpose(theta) - y
        theta = theta - (alpha * scale) * (ad.transpose(resid) @ z)
    return theta


def cavia_context(params: models.MetaParams, x: Tensor, y: Tensor, alpha: float, steps: int = 1) -> Tensor:
    """``steps`` gradient steps on the mean support loss of the context."""
    n = x.rows
    row = ad.ones(1, n) / n
    phi = params.context
    for _ in range(steps):
        pred, jacs = models.context_jacobian(params.layers, params.head, models.broadcast_context(phi, n), x)
        phi = phi - alpha * (row @ _weighted_jacobian_rows(pred - y, jacs))
    return phi
