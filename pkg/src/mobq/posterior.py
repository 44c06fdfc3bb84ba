"""Multi-output Bayesian quadrature.

A :class:`BQModel` holds everything that depends only on the kernel, the
measure and the point sets: the Gram factor, the kernel-mean block
``Pi[C(., X)]`` (``D x ND``), the initial-error block ``Pi Pi[C]`` (``D x D``)
and the weight matrix ``W = C(X, X)^{-1} Pi[C(., X)]^T`` (``ND x D``).
Integrating data is then a matrix-vector product::

    mean = W^T f(X)
    cov  = Pi Pi[C] - Pi[C(., X)] W

The prior mean is zero; centre the data yourself if that matters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mobq import linalg
from mobq.core import Dataset, Design, Measure, as_points
from mobq.errors import ConsistencyError, InvalidArgumentError
from mobq.kernels import OutputKernel, cross_covariance, matrix_eval, mo_initial_error, mo_kernel_mean

VARIANCE_CLAMP = 1e-10


@dataclass(frozen=True, eq=False)
class BQModel:
    kernel: OutputKernel
    measure: Measure
    design: Design
    factor: linalg.GramFactor
    kernel_mean_block: np.ndarray
    initial_error_block: np.ndarray
    weight_matrix: np.ndarray

    @property
    def jitter(self) -> float:
        return self.factor.jitter


@dataclass(frozen=True, eq=False)
class BQPosterior:
    mean: np.ndarray
    cov: np.ndarray
    weights: np.ndarray
    jitter_used: float
    initial_error_block: np.ndarray | None = None

    def std(self) -> np.ndarray:
        return np.array([worst_case_error(self, d) for d in range(len(self.mean))])


def fit(kernel: OutputKernel, measure: Measure, data: Dataset | Design, *, method: str = "closed",
        kronecker: str = "auto", jitter_ladder=linalg.JITTER_LADDER) -> BQModel:
    """Condition the ``GP(0, kernel)`` prior on the design's point sets.

    ``method`` is forwarded to the kernel-mean routines (``"auto"`` allows
    the quadrature fallback).
    """
    design = data.design if isinstance(data, Dataset) else data
    if kernel.n_outputs != design.n_outputs:
        raise InvalidArgumentError(f"kernel has {kernel.n_outputs} outputs, design has {design.n_outputs}")
    z = mo_kernel_mean(kernel, measure, design, method=method)
    ie = mo_initial_error(kernel, measure, method=method)
    factor = linalg.factorize_kernel(kernel, design, kronecker=kronecker, jitter_ladder=jitter_ladder)
    W = factor.solve(z.T)
    for a in (z, ie, W):
        a.setflags(write=False)
    return BQModel(kernel, measure, design, factor, z, ie, W)


def weights(model: BQModel) -> np.ndarray:
    return model.weight_matrix


def integral_posterior(model: BQModel, dataset: Dataset) -> BQPosterior:
    if dataset.design.sizes != model.design.sizes:
        raise InvalidArgumentError("dataset does not match the model's design")
    W = model.weight_matrix
    mean = W.T @ dataset.values
    cov = model.initial_error_block - model.kernel_mean_block @ W
    cov = 0.5 * (cov + cov.T)
    return BQPosterior(mean, cov, W, model.jitter, model.initial_error_block)


def _as_query(model, x):
    return as_points(x, dim=model.design.dim)


def predict_mean(model: BQModel, dataset: Dataset, x) -> np.ndarray:
    """Posterior mean ``m_N(x)``; shape ``(D,)`` for one point, ``(m, D)`` for several."""
    xq = _as_query(model, x)
    alpha = model.factor.solve(dataset.values)
    out = cross_covariance(model.kernel, xq, model.design) @ alpha
    return out[0] if len(xq) == 1 else out


def predict_cov(model: BQModel, x, y) -> np.ndarray:
    """Posterior covariance ``C_N(x, y)`` between two single points (``D x D``)."""
    xq, yq = _as_query(model, x)[:1], _as_query(model, y)[:1]
    cx = cross_covariance(model.kernel, xq, model.design)[0]
    cy = cross_covariance(model.kernel, yq, model.design)[0]
    return matrix_eval(model.kernel, xq[0], yq[0]) - cx @ model.factor.solve(cy.T)


def predict_var(model: BQModel, x) -> np.ndarray:
    """Marginal posterior variances at each row of ``x``: shape ``(m, D)``."""
    xq = _as_query(model, x)
    cx = cross_covariance(model.kernel, xq, model.design)
    D = model.kernel.n_outputs
    prior = np.zeros((len(xq), D))
    for d in range(D):
        for c, k in model.kernel.entries(d, d, model.design.dim):
            prior[:, d] += c * k.diag(xq)
    flat = cx.reshape(-1, cx.shape[-1])
    reduction = np.einsum("ij,ji->i", flat, model.factor.solve(flat.T)).reshape(len(xq), D)
    return prior - reduction


def worst_case_error(posterior: BQPosterior, d: int) -> float:
    """Worst-case integration error of output ``d``: the square root of ``cov[d, d]``.

    Small negative variances left by rounding are clamped to zero; anything
    more negative than ``1e-10`` relative to the prior variance is an error.
    """
    if not 0 <= d < len(posterior.mean):
        raise InvalidArgumentError(f"output index {d} out of range")
    v = float(posterior.cov[d, d])
    if v < 0:
        scale = 1.0
        if posterior.initial_error_block is not None:
            scale = max(1.0, abs(float(posterior.initial_error_block[d, d])))
        if v < -VARIANCE_CLAMP * scale:
            raise ConsistencyError(f"posterior variance of output {d} is {v:.3g}")
        v = 0.0
    return math.sqrt(v)


def quadratic_wce(model: BQModel, W, d: int) -> float:
    """Worst-case error of an arbitrary rule with weight column ``W[:, d]``.

    Evaluates ``w^T C(X, X) w - 2 Pi[C(., X)]_d w + Pi Pi[C]_dd`` using the
    (unregularised) Gram matrix.
    """
    w = np.asarray(W, dtype=float)[:, d]
    G = linalg.assemble_gram(model.kernel, model.design)
    val = w @ G @ w - 2.0 * model.kernel_mean_block[d] @ w + model.initial_error_block[d, d]
    return math.sqrt(max(val, 0.0))
