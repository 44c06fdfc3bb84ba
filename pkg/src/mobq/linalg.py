"""Gram assembly, jitter-regularised Cholesky factors and solves.

The dense factor works for any kernel and design. When the kernel is
separable and every output shares one point set, the Gram matrix is
``B (x) c(X, X)`` and :class:`KroneckerFactor` keeps the two small Cholesky
factors instead, solving ``(B (x) K)^{-1} vec(V) = vec(B^{-1} V K^{-1})``
without materialising the ``ND x ND`` matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from mobq.core import Design
from mobq.errors import InvalidArgumentError, NotPositiveDefiniteError
from mobq.kernels import OutputKernel, _SeparableBase

log = logging.getLogger(__name__)

# multiples of the mean diagonal (trace / size)
JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)


def assemble_gram(K: OutputKernel, design: Design) -> np.ndarray:
    if K.n_outputs != design.n_outputs:
        raise InvalidArgumentError(f"kernel has {K.n_outputs} outputs, design has {design.n_outputs}")
    G = K.gram(design)
    return 0.5 * (G + G.T)


def _cholesky_ladder(A, ladder):
    n = len(A)
    scale = float(np.trace(A)) / n
    if not np.isfinite(scale) or scale <= 0:
        raise NotPositiveDefiniteError("matrix has a non-positive trace", _min_eig(A))
    for step in ladder:
        eta = step * scale
        try:
            L = cholesky(A + eta * np.eye(n) if eta else A, lower=True, check_finite=True)
        except (LinAlgError, ValueError):
            continue
        if eta:
            log.debug("cholesky needed jitter %.3g (ladder step %g)", eta, step)
        return L, eta
    raise NotPositiveDefiniteError(
        f"matrix of size {n} is not positive definite even with jitter {ladder[-1]:g} x mean diagonal",
        _min_eig(A),
    )


def _min_eig(A):
    try:
        return float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    except (np.linalg.LinAlgError, ValueError):
        return float("nan")


@dataclass(frozen=True, eq=False)
class DenseFactor:
    """Lower Cholesky factor of ``gram + jitter * I``."""

    chol: np.ndarray
    jitter: float

    @property
    def size(self) -> int:
        return len(self.chol)

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.size:
            raise InvalidArgumentError(f"rhs has {rhs.shape[0]} rows, factor has size {self.size}")
        return cho_solve((self.chol, True), rhs, check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def inverse(self) -> np.ndarray:
        Linv = solve_triangular(self.chol, np.eye(self.size), lower=True, check_finite=False)
        return Linv.T @ Linv

    def matrix(self) -> np.ndarray:
        return self.chol @ self.chol.T


@dataclass(frozen=True, eq=False)
class KroneckerFactor:
    """Factors of ``B (x) (c(X, X) + jitter * I)`` kept separately.

    Jitter is only ever added to the scalar Gram; ``B`` must factor as is.
    """

    chol_b: np.ndarray
    chol_c: np.ndarray
    jitter: float

    @property
    def n_outputs(self) -> int:
        return len(self.chol_b)

    @property
    def n_points(self) -> int:
        return len(self.chol_c)

    @property
    def size(self) -> int:
        return self.n_outputs * self.n_points

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.size:
            raise InvalidArgumentError(f"rhs has {rhs.shape[0]} rows, factor has size {self.size}")
        vec = rhs.ndim == 1
        R = rhs.reshape(self.n_outputs, self.n_points, -1)
        D, N, m = R.shape
        # B^{-1} V K^{-1}, applied to each right-hand-side column
        tmp = cho_solve((self.chol_b, True), R.reshape(D, N * m), check_finite=False).reshape(D, N, m)
        tmp = tmp.transpose(1, 0, 2).reshape(N, D * m)
        out = cho_solve((self.chol_c, True), tmp, check_finite=False).reshape(N, D, m).transpose(1, 0, 2)
        out = out.reshape(D * N, m)
        return out[:, 0] if vec else out

    def logdet(self) -> float:
        return (2.0 * self.n_points * float(np.sum(np.log(np.diag(self.chol_b))))
                + 2.0 * self.n_outputs * float(np.sum(np.log(np.diag(self.chol_c)))))

    def matrix(self) -> np.ndarray:
        return np.kron(self.chol_b @ self.chol_b.T, self.chol_c @ self.chol_c.T)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.size))


GramFactor = DenseFactor | KroneckerFactor


def factorize(gram, jitter_ladder=JITTER_LADDER) -> DenseFactor:
    A = np.asarray(gram, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgumentError("gram must be square")
    if not np.allclose(A, A.T, rtol=1e-10, atol=1e-12 * max(1.0, float(np.abs(A).max()))):
        raise InvalidArgumentError("gram must be symmetric")
    L, eta = _cholesky_ladder(0.5 * (A + A.T), jitter_ladder)
    return DenseFactor(L, eta)


def factorize_kronecker(B, cgram, jitter_ladder=JITTER_LADDER) -> KroneckerFactor:
    B = np.asarray(B, dtype=float)
    Lb, _ = _cholesky_ladder(0.5 * (B + B.T), (0.0,))
    Lc, eta = _cholesky_ladder(0.5 * (cgram + cgram.T), jitter_ladder)
    return KroneckerFactor(Lb, Lc, eta)


def kronecker_eligible(K: OutputKernel, design: Design) -> bool:
    return design.shared and isinstance(K, _SeparableBase)


def factorize_kernel(K: OutputKernel, design: Design, *, kronecker: str = "auto",
                     jitter_ladder=JITTER_LADDER) -> GramFactor:
    """Factor ``C(X, X)``; ``kronecker`` is ``"auto"``, ``"never"`` or ``"always"``."""
    if kronecker not in ("auto", "never", "always"):
        raise InvalidArgumentError(f"bad kronecker mode {kronecker!r}")
    if kronecker != "never" and kronecker_eligible(K, design):
        x = design.per_output[0]
        try:
            return factorize_kronecker(K.coregion(), K.base(x, x), jitter_ladder)
        except NotPositiveDefiniteError:
            if kronecker == "always":
                raise
            log.debug("coregionalisation matrix not positive definite; using the dense path")
    elif kronecker == "always":
        raise InvalidArgumentError("Kronecker path needs a separable kernel and a shared design")
    return factorize(assemble_gram(K, design), jitter_ladder)


def solve(factor: GramFactor, rhs) -> np.ndarray:
    return factor.solve(rhs)
