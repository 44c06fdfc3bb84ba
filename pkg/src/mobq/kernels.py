"""Scalar and matrix-valued kernels with their integral identities.

Scalar kernels carry their own hyperparameters and know three things:
how to build a Gram matrix, how that Gram matrix moves with each
(log-transformed) hyperparameter, and, for the supported measures, the
closed-form kernel mean ``Pi[c(., x)]`` and initial error ``Pi Pi[c]``.

Matrix-valued kernels are written as a sum of *entries*: for an output pair
``(d, e)`` the entry is a list of ``(coefficient, scalar kernel)`` terms, so
Gram assembly, kernel means and initial errors of every matrix-valued
kernel reduce to the scalar identities.

Squared exponential convention: ``amplitude**2 * exp(-r**2 / (2 lengthscale**2))``.
The other common form ``exp(-r**2 / s**2)`` is this one with
``lengthscale = s / sqrt(2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy import integrate
from scipy.special import erf, erfc, gamma, kv

from mobq import quadrature
from mobq.core import Design, Measure, UniformBox, UniformSphere, as_points, check_on_sphere
from mobq.errors import DomainError, InvalidArgumentError, UnsupportedIdentityError

SQRT3 = math.sqrt(3.0)
SQRT5 = math.sqrt(5.0)
FALLBACK_TOL = 1e-10
SMALL_ARG = 0.25  # below this many lengthscales the interval closed forms switch to Gauss-Legendre


def _dist(x, y):
    return cdist(x, y, "euclidean")


def _sqdist(x, y):
    return cdist(x, y, "sqeuclidean")


def _freeze(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


# ==========================================================================
# scalar kernels
# ==========================================================================


class ScalarKernel:
    """Base class; concrete kernels are frozen dataclasses."""

    param_names: tuple = ()
    param_roles: tuple = ()

    def __call__(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def param_grads(self, x, y) -> list:
        """Derivatives of ``self(x, y)`` with respect to :meth:`theta`."""
        return []

    def theta(self) -> np.ndarray:
        return np.empty(0)

    def with_theta(self, theta) -> "ScalarKernel":
        return self

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def closed_kernel_mean(self, measure: Measure, x: np.ndarray):
        return None

    def closed_initial_error(self, measure: Measure):
        return None

    def diag(self, x) -> np.ndarray:
        x = as_points(x)
        return np.array([self(x[i : i + 1], x[i : i + 1])[0, 0] for i in range(len(x))])

    def to_dict(self) -> dict:
        raise NotImplementedError


class _Stationary(ScalarKernel):
    """``amplitude**2 * g(r / lengthscale)`` with ``r`` the Euclidean distance."""

    param_names = ("amplitude", "lengthscale")
    param_roles = ("amplitude", "lengthscale")

    amplitude: float
    lengthscale: float

    def _check(self):
        if not (self.amplitude > 0 and self.lengthscale > 0):
            raise InvalidArgumentError(f"{type(self).__name__} needs positive amplitude and lengthscale")

    def _profile(self, u):
        """Return ``(g(u), -u g'(u))``."""
        raise NotImplementedError

    def _scaled_distance(self, x, y):
        return _dist(as_points(x), as_points(y)) / self.lengthscale

    def __call__(self, x, y):
        g, _ = self._profile(self._scaled_distance(x, y))
        return self.amplitude**2 * g

    def diag(self, x):
        return np.full(len(as_points(x)), self.amplitude**2)

    def param_grads(self, x, y):
        g, dg = self._profile(self._scaled_distance(x, y))
        a2 = self.amplitude**2
        return [2.0 * a2 * g, a2 * dg]

    def theta(self):
        return np.array([math.log(self.amplitude), math.log(self.lengthscale)])

    def with_theta(self, theta):
        return type(self)(**self._with_fields(amplitude=math.exp(theta[0]), lengthscale=math.exp(theta[1])))

    def _with_fields(self, **kw):
        return kw

    def _isotropic(self, r):
        g, _ = self._profile(np.asarray(r, dtype=float) / self.lengthscale)
        return self.amplitude**2 * g


@dataclass(frozen=True)
class Matern(_Stationary):
    """Matern kernel of order ``alpha`` (the Bessel order).

    Orders 1/2, 3/2 and 5/2 use the exponential-polynomial closed forms;
    any other positive order is evaluated through the modified Bessel
    function, and its interval identities through adaptive quadrature of a
    1-D profile. On ``R^p`` the RKHS is norm-equivalent to the Sobolev space
    of order ``alpha + p / 2``; see :func:`sobolev_matern`.
    """

    alpha: float = 1.5
    amplitude: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidArgumentError(f"Matern order must be positive, got {self.alpha}")
        self._check()

    @property
    def half_integer(self) -> bool:
        return self.alpha in (0.5, 1.5, 2.5)

    def _with_fields(self, **kw):
        return dict(alpha=self.alpha, **kw)

    def _profile(self, u):
        if not self.half_integer:
            return _bessel_matern_profile(self.alpha, np.asarray(u, dtype=float))
        if self.alpha == 0.5:
            e = np.exp(-u)
            return e, u * e
        if self.alpha == 1.5:
            s = SQRT3 * u
            e = np.exp(-s)
            return (1.0 + s) * e, s * s * e
        s = SQRT5 * u
        e = np.exp(-s)
        return (1.0 + s + s * s / 3.0) * e, (s * s / 3.0) * (1.0 + s) * e

    # --- closed forms on an interval --------------------------------------
    # F(u) = int_0^u g(t / ell) dt  and  Phi(L) = int_0^L F(u) du

    def _F(self, u):
        ell = self.lengthscale
        u = np.asarray(u, dtype=float)
        if not self.half_integer:
            return _cumulative_integral(lambda t: self._profile(t / ell)[0], u, ell)
        small = u < SMALL_ARG * ell
        if np.any(small):
            # the closed forms cancel badly for short intervals
            out = self._F_closed(np.where(small, ell, u))
            return np.where(small, _short_integral(lambda t: self._profile(t / ell)[0], u), out)
        return self._F_closed(u)

    def _F_closed(self, u):
        ell = self.lengthscale
        if self.alpha == 0.5:
            return ell * -np.expm1(-u / ell)
        if self.alpha == 1.5:
            c = SQRT3 / ell
            s = c * u
            return (2.0 - (2.0 + s) * np.exp(-s)) / c
        c = SQRT5 / ell
        s = c * u
        return (8.0 - (8.0 + 5.0 * s + s * s) * np.exp(-s)) / (3.0 * c)

    def _Phi(self, length):
        ell = self.lengthscale
        if not self.half_integer or length < SMALL_ARG * ell:
            if self.half_integer:
                return float(_short_integral(lambda t: (length - t) * self._profile(t / ell)[0], np.array(length)))
            # int_0^L F(u) du = int_0^L (L - t) g(t / ell) dt
            return _quad(lambda t: (length - t) * self._profile(np.array(t / ell))[0], 0.0, float(length))
        if self.alpha == 0.5:
            return ell * length + ell * ell * np.expm1(-length / ell)
        if self.alpha == 1.5:
            c = SQRT3 / ell
            s = c * length
            return (2.0 * length - (3.0 - (3.0 + s) * np.exp(-s)) / c) / c
        c = SQRT5 / ell
        s = c * length
        return (8.0 * length - (15.0 - (15.0 + 7.0 * s + s * s) * np.exp(-s)) / c) / (3.0 * c)

    def closed_kernel_mean(self, measure, x):
        if not isinstance(measure, UniformBox) or measure.dim != 1:
            return None
        a, b = measure.lower[0], measure.upper[0]
        t = x[:, 0]

        def odd(u):
            return np.sign(u) * self._F(np.abs(u))

        return self.amplitude**2 * (odd(b - t) - odd(a - t)) / (b - a)

    def closed_initial_error(self, measure):
        if not isinstance(measure, UniformBox) or measure.dim != 1:
            return None
        length = measure.upper[0] - measure.lower[0]
        return float(2.0 * self.amplitude**2 * self._Phi(length) / length**2)

    def to_dict(self):
        return {"kind": "matern", "alpha": self.alpha, "amplitude": self.amplitude, "lengthscale": self.lengthscale}


def _bessel_matern_profile(nu, u):
    """``g(u) = 2^(1-nu)/Gamma(nu) s^nu K_nu(s)`` with ``s = sqrt(2 nu) u``, and ``-u g'(u)``."""
    s = math.sqrt(2.0 * nu) * np.abs(u)
    c = 2.0 ** (1.0 - nu) / gamma(nu)
    with np.errstate(invalid="ignore", over="ignore"):
        g = c * s**nu * kv(nu, s)
        # d/ds [s^nu K_nu(s)] = -s^nu K_{nu-1}(s)
        dg = c * s ** (nu + 1.0) * kv(nu - 1.0, s)
    tiny = s < 1e-300
    g = np.where(tiny, 1.0, g)
    dg = np.where(tiny, 0.0, dg)
    # K_nu underflows long before the product matters
    big = ~np.isfinite(g) | (s > 700.0)
    return np.where(big, 0.0, g), np.where(big | ~np.isfinite(dg), 0.0, dg)


def _short_integral(f, u):
    """``int_0^u f`` by one 16-point Gauss-Legendre panel; exact to rounding for analytic ``f`` on short ``u``."""
    gx, gw = quadrature._rule(quadrature.ORDER)
    half = 0.5 * np.asarray(u, dtype=float)
    t = half[..., None] * (1.0 + gx)
    return half * (f(t) @ gw)


def _cumulative_integral(f, u, scale):
    """``int_0^u f`` at every entry of ``u >= 0`` by composite Gauss-Legendre.

    Panel edges are the requested points, a uniform grid of spacing
    ``scale / 8`` and a geometric grading towards 0, so every panel
    ``[e, e']`` has ``e' - e <= max(e, scale / 8)`` and ``f`` (smooth away
    from the origin) is integrated to rounding error on each.
    """
    flat = u.ravel()
    top = float(flat.max()) if flat.size else 0.0
    step = scale / 8.0
    grading = step * 2.0 ** -np.arange(1, 60)
    edges = np.unique(np.concatenate([[0.0], grading[grading < top], np.arange(step, top, step), flat]))
    gx, gw = quadrature._rule(quadrature.ORDER)
    lo, hi = edges[:-1], edges[1:]
    half, mid = 0.5 * (hi - lo), 0.5 * (hi + lo)
    vals = f(mid[:, None] + half[:, None] * gx[None, :]) @ gw * half
    cum = np.concatenate([[0.0], np.cumsum(vals)])
    return cum[np.searchsorted(edges, flat)].reshape(u.shape)


def _quad(f, a, b):
    if b <= a:
        return 0.0
    val, _ = integrate.quad(lambda t: float(f(t)), a, b, epsabs=1e-14, epsrel=1e-13, limit=200)
    return val


def sobolev_matern(smoothness: float, dim: int = 1, amplitude: float = 1.0, lengthscale: float = 1.0) -> Matern:
    """Matern kernel whose RKHS on ``R^dim`` is the Sobolev space of order ``smoothness``."""
    if smoothness <= dim / 2.0:
        raise InvalidArgumentError("Sobolev order must exceed dim / 2")
    return Matern(smoothness - dim / 2.0, amplitude, lengthscale)


@dataclass(frozen=True)
class SquaredExponential(_Stationary):
    amplitude: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        self._check()

    def _scaled_distance(self, x, y):
        return np.sqrt(_sqdist(as_points(x), as_points(y))) / self.lengthscale

    def __call__(self, x, y):
        return self.amplitude**2 * np.exp(-0.5 * _sqdist(as_points(x), as_points(y)) / self.lengthscale**2)

    def param_grads(self, x, y):
        q = _sqdist(as_points(x), as_points(y)) / self.lengthscale**2
        k = self.amplitude**2 * np.exp(-0.5 * q)
        return [2.0 * k, q * k]

    def _profile(self, u):
        e = np.exp(-0.5 * u * u)
        return e, u * u * e

    def closed_kernel_mean(self, measure, x):
        if not isinstance(measure, UniformBox):
            return None
        out = np.full(len(x), self.amplitude**2)
        ell = self.lengthscale
        for j, (a, b) in enumerate(zip(measure.lower, measure.upper)):
            s = math.sqrt(2.0) * ell
            out *= ell * math.sqrt(math.pi / 2.0) * _erf_diff((a - x[:, j]) / s, (b - x[:, j]) / s) / (b - a)
        return out

    def closed_initial_error(self, measure):
        if not isinstance(measure, UniformBox):
            return None
        ell = self.lengthscale
        val = self.amplitude**2
        for a, b in zip(measure.lower, measure.upper):
            length = b - a
            z = length / (math.sqrt(2.0) * ell)
            inner = length * ell * math.sqrt(2.0 * math.pi) * math.erf(z) + 2.0 * ell * ell * math.expm1(-z * z)
            val *= inner / length**2
        return float(val)

    def to_dict(self):
        return {"kind": "se", "amplitude": self.amplitude, "lengthscale": self.lengthscale}


@dataclass(frozen=True)
class WhiteNoise(ScalarKernel):
    """``amplitude**2`` where ``x == x'`` exactly, else 0: an observation nugget.

    It is invisible to any measure with a density, so its kernel mean and
    initial error vanish; it only regularises the Gram matrix.
    """

    amplitude: float = 1e-3
    param_names = ("amplitude",)
    param_roles = ("noise",)

    def __post_init__(self):
        if not self.amplitude > 0:
            raise InvalidArgumentError("white-noise amplitude must be positive")

    def __call__(self, x, y):
        return self.amplitude**2 * (_sqdist(as_points(x), as_points(y)) == 0.0)

    def diag(self, x):
        return np.full(len(as_points(x)), self.amplitude**2)

    def param_grads(self, x, y):
        return [2.0 * self(x, y)]

    def theta(self):
        return np.array([math.log(self.amplitude)])

    def with_theta(self, theta):
        return WhiteNoise(math.exp(theta[0]))

    def _isotropic(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def closed_kernel_mean(self, measure, x):
        return np.zeros(len(x))

    def closed_initial_error(self, measure):
        return 0.0

    def to_dict(self):
        return {"kind": "white", "amplitude": self.amplitude}


def _erf_diff(lo, hi):
    """``erf(hi) - erf(lo)`` for ``lo <= hi`` without cancellation in the tails."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out = erf(hi) - erf(lo)
    right = lo > 0
    out = np.where(right, erfc(lo) - erfc(hi), out)
    left = hi < 0
    return np.where(left, erfc(-hi) - erfc(-lo), out)


@dataclass(frozen=True)
class SphereSobolev32(ScalarKernel):
    """``8/3 - ||x - x'||**exponent`` on the unit sphere of R^3.

    ``exponent=2`` is the squared-distance form; it equals ``2/3 + 2 x.x'``
    and so spans only a 4-dimensional space of functions. ``exponent=1`` is
    the distance form whose RKHS is norm-equivalent to the Sobolev space of
    smoothness 3/2 on the sphere; use it wherever convergence rates matter.
    """

    exponent: int = 2

    def __post_init__(self):
        if self.exponent not in (1, 2):
            raise InvalidArgumentError("exponent must be 1 or 2")

    def __call__(self, x, y):
        x, y = as_points(x, dim=3), as_points(y, dim=3)
        check_on_sphere(x)
        check_on_sphere(y)
        d2 = np.clip(_sqdist(x, y), 0.0, 4.0)
        return 8.0 / 3.0 - (d2 if self.exponent == 2 else np.sqrt(d2))

    def diag(self, x):
        return np.full(len(as_points(x, dim=3)), 8.0 / 3.0)

    def _isotropic(self, r):
        return 8.0 / 3.0 - np.asarray(r, dtype=float) ** self.exponent

    def closed_kernel_mean(self, measure, x):
        if not isinstance(measure, UniformSphere):
            return None
        check_on_sphere(x)
        # E||x - X'||^2 = 2 and E||x - X'|| = 4/3 for X' uniform on the sphere
        return np.full(len(x), 2.0 / 3.0 if self.exponent == 2 else 4.0 / 3.0)

    def closed_initial_error(self, measure):
        if not isinstance(measure, UniformSphere):
            return None
        return 2.0 / 3.0 if self.exponent == 2 else 4.0 / 3.0

    def to_dict(self):
        return {"kind": "sphere_sobolev32", "exponent": self.exponent}


# --------------------------------------------------------------------------
# scalar operations
# --------------------------------------------------------------------------


def scalar_eval(k: ScalarKernel, x, y) -> float:
    dim = 3 if isinstance(k, SphereSobolev32) else None
    return float(k(as_points(x, dim=dim)[:1], as_points(y, dim=dim)[:1])[0, 0])


def kernel_mean(k: ScalarKernel, measure: Measure, x, *, method: str = "closed") -> np.ndarray:
    """``Pi[k(., x)]`` at each row of ``x``.

    ``method`` is ``"closed"`` (raise if no identity is known), ``"auto"``
    (closed form, else quadrature) or ``"quadrature"`` (always quadrature).
    """
    x = as_points(x, dim=measure.dim)
    if x.shape[1] != measure.dim:
        raise InvalidArgumentError(f"points of dimension {x.shape[1]} for a measure of dimension {measure.dim}")
    if method != "quadrature":
        out = k.closed_kernel_mean(measure, x)
        if out is not None:
            return np.asarray(out, dtype=float)
        if method == "closed":
            raise UnsupportedIdentityError(
                f"no closed-form kernel mean for {type(k).__name__} under {type(measure).__name__}; "
                "pass method='auto' to allow the quadrature fallback"
            )
    return np.array([_kernel_mean_quadrature(k, measure, xi) for xi in x])


def initial_error(k: ScalarKernel, measure: Measure, *, method: str = "closed") -> float:
    if method != "quadrature":
        out = k.closed_initial_error(measure)
        if out is not None:
            return float(out)
        if method == "closed":
            raise UnsupportedIdentityError(
                f"no closed-form initial error for {type(k).__name__} under {type(measure).__name__}"
            )
    return _initial_error_quadrature(k, measure, method)


def _kernel_mean_quadrature(k, measure, xi):
    if isinstance(measure, UniformSphere):
        check_on_sphere(xi[None, :])
        # X'.x is uniform on [-1, 1]; in the chordal distance r this is density r / 2 on [0, 2]
        val, _, _ = quadrature.integrate_1d(lambda r: r * k._isotropic(r), 0.0, 2.0, tol=FALLBACK_TOL)
        return 0.5 * val
    if isinstance(measure, UniformBox):
        if isinstance(k, SphereSobolev32):
            raise DomainError("the sphere kernel is not defined on a box")
        if measure.dim == 1:
            a, b = measure.lower[0], measure.upper[0]
            val, _, _ = quadrature.integrate_1d(lambda t: k(t[:, None], xi[None, :])[:, 0], a, b,
                                                tol=FALLBACK_TOL * (b - a), breaks=(float(xi[0]),))
            return val / (b - a)
        val, _, _ = quadrature.integrate_box(lambda t: k(t, xi[None, :])[:, 0], measure.lower, measure.upper,
                                             tol=FALLBACK_TOL * measure.volume)
        return val / measure.volume
    raise UnsupportedIdentityError(f"no quadrature rule for {type(measure).__name__}")


def _initial_error_quadrature(k, measure, method):
    if isinstance(measure, UniformSphere):
        return float(kernel_mean(k, measure, np.array([[0.0, 0.0, 1.0]]), method=method)[0])
    if isinstance(measure, UniformBox):
        def mean_at(t):
            return kernel_mean(k, measure, t if t.ndim == 2 else t[:, None], method=method)

        if measure.dim == 1:
            a, b = measure.lower[0], measure.upper[0]
            val, _, _ = quadrature.integrate_1d(mean_at, a, b, tol=FALLBACK_TOL * (b - a))
            return val / (b - a)
        val, _, _ = quadrature.integrate_box(mean_at, measure.lower, measure.upper, tol=FALLBACK_TOL * measure.volume)
        return val / measure.volume
    raise UnsupportedIdentityError(f"no quadrature rule for {type(measure).__name__}")


# ==========================================================================
# matrix-valued kernels
# ==========================================================================


class OutputKernel:
    """Matrix-valued kernel ``C(x, x')`` for ``n_outputs`` outputs."""

    n_outputs: int

    def entries(self, d: int, e: int, dim: int) -> list:
        """Terms ``(coefficient, scalar kernel)`` summing to ``C_{de}``."""
        raise NotImplementedError

    def gram(self, design: Design) -> np.ndarray:
        return _assemble(self, design.per_output, design.per_output, design.dim)

    def gram_grads(self, design: Design) -> list:
        raise NotImplementedError

    def theta(self) -> np.ndarray:
        raise NotImplementedError

    def with_theta(self, theta) -> "OutputKernel":
        raise NotImplementedError

    def param_names(self) -> list:
        raise NotImplementedError

    def param_roles(self) -> list:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def _assemble(K, xs_rows, xs_cols, dim):
    rows = []
    for d, xd in enumerate(xs_rows):
        row = []
        for e, xe in enumerate(xs_cols):
            block = np.zeros((len(xd), len(xe)))
            for coef, k in K.entries(d, e, dim):
                if coef != 0.0:
                    block += coef * k(xd, xe)
            row.append(block)
        rows.append(row)
    return np.block(rows)


def _chol_params_to_matrix(theta, size):
    L = np.zeros((size, size))
    it = iter(theta)
    for i in range(size):
        for j in range(i + 1):
            v = next(it)
            L[i, j] = math.exp(v) if i == j else v
    return L


def _matrix_to_chol_params(B):
    L = np.linalg.cholesky(B)
    out = []
    for i in range(len(B)):
        for j in range(i + 1):
            out.append(math.log(L[i, j]) if i == j else L[i, j])
    return np.array(out)


class _SeparableBase(OutputKernel):
    """``B c(x, x')`` for a coregionalisation matrix ``B``."""

    base: ScalarKernel

    def coregion(self) -> np.ndarray:
        raise NotImplementedError

    def coregion_grads(self) -> list:
        raise NotImplementedError

    def entries(self, d, e, dim):
        return [(float(self.coregion()[d, e]), self.base)]

    def gram(self, design):
        B = self.coregion()
        if design.shared:
            return np.kron(B, self.base(design.per_output[0], design.per_output[0]))
        return _separable_blocks(B, self._base_blocks(design))

    def _base_blocks(self, design):
        xs = design.per_output
        return [[self.base(xd, xe) for xe in xs] for xd in xs]

    def gram_grads(self, design):
        B = self.coregion()
        xs = design.per_output
        out = []
        if self.coregion_grads():
            blocks = self._base_blocks(design)
            out.extend(_separable_blocks(dB, blocks) for dB in self.coregion_grads())
        if self.base.n_params:
            grads = [[self.base.param_grads(xd, xe) for xe in xs] for xd in xs]
            for j in range(self.base.n_params):
                out.append(_separable_blocks(B, [[g[j] for g in row] for row in grads]))
        return out


def _separable_blocks(B, blocks):
    D = len(blocks)
    return np.block([[B[d, e] * blocks[d][e] for e in range(D)] for d in range(D)])


@dataclass(frozen=True, eq=False)
class Separable(_SeparableBase):
    """``C(x, x') = B c(x, x')`` with ``B`` symmetric positive definite.

    Hyperparameters: the lower Cholesky factor of ``B`` (log-diagonal and raw
    off-diagonal, row-major over the lower triangle), then the base kernel's.
    """

    B: np.ndarray
    base: ScalarKernel

    def __post_init__(self):
        B = _freeze(np.atleast_2d(self.B))
        if B.shape[0] != B.shape[1] or not np.allclose(B, B.T, rtol=0, atol=1e-12 * max(1.0, np.abs(B).max())):
            raise InvalidArgumentError("B must be a symmetric square matrix")
        object.__setattr__(self, "B", B)

    @property
    def n_outputs(self):
        return self.B.shape[0]

    def coregion(self):
        return self.B

    def coregion_grads(self):
        D = self.n_outputs
        L = np.linalg.cholesky(self.B)
        grads = []
        for i in range(D):
            for j in range(i + 1):
                dL = np.zeros((D, D))
                dL[i, j] = L[i, j] if i == j else 1.0
                grads.append(dL @ L.T + L @ dL.T)
        return grads

    def theta(self):
        return np.concatenate([_matrix_to_chol_params(self.B), self.base.theta()])

    def with_theta(self, theta):
        D = self.n_outputs
        m = D * (D + 1) // 2
        L = _chol_params_to_matrix(theta[:m], D)
        return Separable(L @ L.T, self.base.with_theta(theta[m:]))

    def param_names(self):
        names = [f"B.L[{i},{j}]" for i in range(self.n_outputs) for j in range(i + 1)]
        return names + [f"base.{n}" for n in self.base.param_names]

    def param_roles(self):
        roles = ["chol_diag" if i == j else "chol_off" for i in range(self.n_outputs) for j in range(i + 1)]
        return roles + list(self.base.param_roles)

    def to_dict(self):
        return {"kind": "separable", "B": self.B.ravel().tolist(), "base": self.base.to_dict()}


@dataclass(frozen=True, eq=False)
class LMC(_SeparableBase):
    """Linear model of coregionalisation: ``B = A^T A + diag(nugget)``.

    ``factors`` is the ``R x D`` matrix of coefficients ``a^i_d``; the
    optional per-output ``nugget`` is added to the diagonal of ``B``.
    """

    factors: np.ndarray
    base: ScalarKernel
    nugget: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "factors", _freeze(np.atleast_2d(self.factors)))
        if self.nugget is not None:
            nug = _freeze(np.atleast_1d(self.nugget))
            if nug.shape != (self.n_outputs,) or np.any(nug <= 0):
                raise InvalidArgumentError("nugget needs one positive entry per output")
            object.__setattr__(self, "nugget", nug)

    @property
    def n_outputs(self):
        return self.factors.shape[1]

    @property
    def rank(self):
        return self.factors.shape[0]

    def coregion(self):
        B = self.factors.T @ self.factors
        if self.nugget is not None:
            B = B + np.diag(self.nugget)
        return B

    def coregion_grads(self):
        A = self.factors
        D = self.n_outputs
        grads = []
        for r in range(self.rank):
            for k in range(D):
                dB = np.zeros((D, D))
                dB[k, :] += A[r]
                dB[:, k] += A[r]
                grads.append(dB)
        if self.nugget is not None:
            for k in range(D):
                dB = np.zeros((D, D))
                dB[k, k] = self.nugget[k]
                grads.append(dB)
        return grads

    def theta(self):
        parts = [self.factors.ravel()]
        if self.nugget is not None:
            parts.append(np.log(self.nugget))
        parts.append(self.base.theta())
        return np.concatenate(parts)

    def with_theta(self, theta):
        n = self.factors.size
        A = np.asarray(theta[:n]).reshape(self.factors.shape)
        nug = None
        if self.nugget is not None:
            nug = np.exp(theta[n : n + self.n_outputs])
            n += self.n_outputs
        return LMC(A, self.base.with_theta(theta[n:]), nug)

    def param_names(self):
        names = [f"factors[{r},{d}]" for r in range(self.rank) for d in range(self.n_outputs)]
        if self.nugget is not None:
            names += [f"nugget[{d}]" for d in range(self.n_outputs)]
        return names + [f"base.{n}" for n in self.base.param_names]

    def param_roles(self):
        roles = ["factor"] * self.factors.size
        if self.nugget is not None:
            roles += ["nugget"] * self.n_outputs
        return roles + list(self.base.param_roles)

    def to_dict(self):
        out = {"kind": "lmc", "factors": self.factors.tolist(), "base": self.base.to_dict()}
        if self.nugget is not None:
            out["nugget"] = self.nugget.tolist()
        return out


@dataclass(frozen=True, eq=False)
class ProcessConvolution(OutputKernel):
    """Gaussian process-convolution kernel with ``R`` latent processes.

    Output ``d`` is a sum over latents ``i`` of the latent process
    ``lambda_i**2 exp(-r**2 / (2 sigma_i**2))`` blurred by
    ``G_{i,d}(r) = lambda_{i,d}**2 exp(-r**2 / (2 sigma_{i,d}**2))``. In ``p``
    dimensions the double convolution is Gaussian again:

        C_de(x, x') = sum_i A_ide exp(-r**2 / (2 S_ide)),
        S_ide = sigma_{i,d}**2 + sigma_{i,e}**2 + sigma_i**2,
        A_ide = lambda_{i,d}**2 lambda_{i,e}**2 lambda_i**2
                (2 pi)**p (sigma_{i,d} sigma_{i,e} sigma_i)**p / S_ide**(p/2),

    plus an optional independent kernel on the diagonal.
    """

    blur_amplitudes: np.ndarray
    blur_widths: np.ndarray
    latent_amplitude: np.ndarray
    latent_width: np.ndarray
    independent: tuple = field(default=None)

    def __post_init__(self):
        ba = _freeze(np.atleast_2d(self.blur_amplitudes))
        bw = _freeze(np.atleast_2d(self.blur_widths))
        la = _freeze(np.atleast_1d(self.latent_amplitude))
        lw = _freeze(np.atleast_1d(self.latent_width))
        if ba.shape != bw.shape or la.shape != (ba.shape[0],) or lw.shape != la.shape:
            raise InvalidArgumentError("blur parameters must be R x D and latent parameters length R")
        if np.any(ba <= 0) or np.any(bw <= 0) or np.any(la <= 0) or np.any(lw <= 0):
            raise InvalidArgumentError("process-convolution amplitudes and widths must be positive")
        ind = self.independent
        if ind is not None:
            ind = tuple(ind)
            if len(ind) != ba.shape[1]:
                raise InvalidArgumentError("need one independent kernel (or None) per output")
        for name, v in (("blur_amplitudes", ba), ("blur_widths", bw), ("latent_amplitude", la),
                        ("latent_width", lw), ("independent", ind)):
            object.__setattr__(self, name, v)

    @property
    def n_outputs(self):
        return self.blur_amplitudes.shape[1]

    @property
    def n_latent(self):
        return self.blur_amplitudes.shape[0]

    def _pair(self, i, d, e, dim):
        bw, ba = self.blur_widths, self.blur_amplitudes
        S = bw[i, d] ** 2 + bw[i, e] ** 2 + self.latent_width[i] ** 2
        A = (ba[i, d] ** 2 * ba[i, e] ** 2 * self.latent_amplitude[i] ** 2
             * (2.0 * math.pi) ** dim * (bw[i, d] * bw[i, e] * self.latent_width[i]) ** dim / S ** (dim / 2.0))
        return A, S

    def entries(self, d, e, dim):
        out = []
        for i in range(self.n_latent):
            A, S = self._pair(i, d, e, dim)
            out.append((1.0, SquaredExponential(math.sqrt(A), math.sqrt(S))))
        if d == e and self.independent is not None and self.independent[d] is not None:
            out.append((1.0, self.independent[d]))
        return out

    def gram_grads(self, design):
        xs = design.per_output
        p = design.dim
        D, R = self.n_outputs, self.n_latent
        off = design.offsets
        n = design.total
        sq = [[_sqdist(xd, xe) for xe in xs] for xd in xs]
        g_ba = np.zeros((R, D, n, n))
        g_bw = np.zeros((R, D, n, n))
        g_la = np.zeros((R, n, n))
        g_lw = np.zeros((R, n, n))
        for d in range(D):
            for e in range(D):
                sl = (slice(off[d], off[d + 1]), slice(off[e], off[e + 1]))
                for i in range(R):
                    A, S = self._pair(i, d, e, p)
                    v = A * np.exp(-0.5 * sq[d][e] / S)
                    shape = -p / (2.0 * S) + sq[d][e] / (2.0 * S * S)
                    g_la[i][sl] = 2.0 * v
                    g_lw[i][sl] = (p + 2.0 * self.latent_width[i] ** 2 * shape) * v
                    for k in {d, e}:
                        m = (k == d) + (k == e)
                        g_ba[i, k][sl] += 2.0 * m * v
                        g_bw[i, k][sl] += (m * p + 2.0 * m * self.blur_widths[i, k] ** 2 * shape) * v
        out = [g_ba[i, d] for i in range(R) for d in range(D)]
        out += [g_bw[i, d] for i in range(R) for d in range(D)]
        out += list(g_la) + list(g_lw)
        if self.independent is not None:
            for d, k in enumerate(self.independent):
                if k is None:
                    continue
                for g in k.param_grads(xs[d], xs[d]):
                    full = np.zeros((n, n))
                    full[off[d] : off[d + 1], off[d] : off[d + 1]] = g
                    out.append(full)
        return out

    def _independent_list(self):
        return [k for k in (self.independent or ()) if k is not None]

    def theta(self):
        parts = [np.log(self.blur_amplitudes).ravel(), np.log(self.blur_widths).ravel(),
                 np.log(self.latent_amplitude), np.log(self.latent_width)]
        parts += [k.theta() for k in self._independent_list()]
        return np.concatenate(parts)

    def with_theta(self, theta):
        R, D = self.n_latent, self.n_outputs
        theta = np.asarray(theta, dtype=float)
        i = 0

        def take(n):
            nonlocal i
            v = theta[i : i + n]
            i += n
            return v

        ba = np.exp(take(R * D)).reshape(R, D)
        bw = np.exp(take(R * D)).reshape(R, D)
        la = np.exp(take(R))
        lw = np.exp(take(R))
        ind = None
        if self.independent is not None:
            ind = tuple(None if k is None else k.with_theta(take(k.n_params)) for k in self.independent)
        return ProcessConvolution(ba, bw, la, lw, ind)

    def param_names(self):
        R, D = self.n_latent, self.n_outputs
        names = [f"blur_amplitudes[{i},{d}]" for i in range(R) for d in range(D)]
        names += [f"blur_widths[{i},{d}]" for i in range(R) for d in range(D)]
        names += [f"latent_amplitude[{i}]" for i in range(R)] + [f"latent_width[{i}]" for i in range(R)]
        if self.independent is not None:
            for d, k in enumerate(self.independent):
                if k is not None:
                    names += [f"independent[{d}].{n}" for n in k.param_names]
        return names

    def param_roles(self):
        R, D = self.n_latent, self.n_outputs
        roles = ["blur_amplitude"] * (R * D) + ["lengthscale"] * (R * D) + ["latent_amplitude"] * R
        roles += ["lengthscale"] * R
        for k in self._independent_list():
            roles += list(k.param_roles)
        return roles

    def to_dict(self):
        out = {
            "kind": "pc",
            "blur_amplitudes": self.blur_amplitudes.tolist(),
            "blur_widths": self.blur_widths.tolist(),
            "latent_amplitude": self.latent_amplitude.tolist(),
            "latent_width": self.latent_width.tolist(),
        }
        if self.independent is not None:
            out["independent"] = [None if k is None else k.to_dict() for k in self.independent]
        return out


@dataclass(frozen=True, eq=False)
class Sum(OutputKernel):
    """Elementwise sum of matrix-valued kernels with the same output count."""

    parts: tuple

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts or len({p.n_outputs for p in parts}) != 1:
            raise InvalidArgumentError("Sum needs at least one part, all with the same number of outputs")
        object.__setattr__(self, "parts", parts)

    @property
    def n_outputs(self):
        return self.parts[0].n_outputs

    def entries(self, d, e, dim):
        return [t for p in self.parts for t in p.entries(d, e, dim)]

    def gram(self, design):
        return sum(p.gram(design) for p in self.parts)

    def gram_grads(self, design):
        return [g for p in self.parts for g in p.gram_grads(design)]

    def theta(self):
        return np.concatenate([p.theta() for p in self.parts])

    def with_theta(self, theta):
        out, i = [], 0
        for p in self.parts:
            n = len(p.theta())
            out.append(p.with_theta(theta[i : i + n]))
            i += n
        return Sum(tuple(out))

    def param_names(self):
        return [f"parts[{q}].{n}" for q, p in enumerate(self.parts) for n in p.param_names()]

    def param_roles(self):
        return [r for p in self.parts for r in p.param_roles()]

    def to_dict(self):
        return {"kind": "sum", "parts": [p.to_dict() for p in self.parts]}


# --------------------------------------------------------------------------
# matrix-valued operations
# --------------------------------------------------------------------------


def matrix_eval(K: OutputKernel, x, y) -> np.ndarray:
    """The ``D x D`` matrix ``C(x, y)`` for single points ``x`` and ``y``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[1] != y.shape[1]:
        raise InvalidArgumentError("x and y have different dimensions")
    D = K.n_outputs
    out = np.zeros((D, D))
    for d in range(D):
        for e in range(D):
            out[d, e] = sum(c * k(x[:1], y[:1])[0, 0] for c, k in K.entries(d, e, x.shape[1]))
    return out


def cross_covariance(K: OutputKernel, x, design: Design) -> np.ndarray:
    """``C(x, X)`` for each row of ``x``: an array of shape ``(m, D, ND)``."""
    x = as_points(x, dim=design.dim)
    D = K.n_outputs
    off = design.offsets
    out = np.zeros((len(x), D, design.total))
    for d in range(D):
        for e, xe in enumerate(design.per_output):
            for c, k in K.entries(d, e, design.dim):
                if c != 0.0:
                    out[:, d, off[e] : off[e + 1]] += c * k(x, xe)
    return out


def mo_kernel_mean(K: OutputKernel, measure: Measure, design: Design, *, method: str = "closed") -> np.ndarray:
    """``Pi[C(., X)]`` as a ``D x ND`` matrix (rows: output of the integral)."""
    if design.dim != measure.dim:
        raise InvalidArgumentError("design and measure dimensions differ")
    D = K.n_outputs
    off = design.offsets
    out = np.zeros((D, design.total))
    cache = {}
    for d in range(D):
        for e, xe in enumerate(design.per_output):
            for c, k in K.entries(d, e, design.dim):
                if c == 0.0:
                    continue
                key = (id(k), e)
                if key not in cache:
                    cache[key] = (k, kernel_mean(k, measure, xe, method=method))
                out[d, off[e] : off[e + 1]] += c * cache[key][1]
    return out


def mo_initial_error(K: OutputKernel, measure: Measure, *, method: str = "closed") -> np.ndarray:
    D = K.n_outputs
    out = np.zeros((D, D))
    for d in range(D):
        for e in range(D):
            out[d, e] = sum(c * initial_error(k, measure, method=method) for c, k in K.entries(d, e, measure.dim))
    return 0.5 * (out + out.T)


# ==========================================================================
# hyperparameter vectors
# ==========================================================================


@dataclass(frozen=True, eq=False)
class HyperSchema:
    """Maps a flat vector to a kernel with the same structure as ``template``."""

    template: OutputKernel
    names: tuple
    roles: tuple
    free: tuple

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def free_mask(self) -> np.ndarray:
        return np.array(self.free, dtype=bool)


@dataclass(frozen=True, eq=False)
class HyperVector:
    theta: np.ndarray
    schema: HyperSchema

    def kernel(self) -> OutputKernel:
        return unpack_hypers(self.schema, self.theta)


def pack_hypers(K: OutputKernel, fixed=()) -> HyperVector:
    """Flatten ``K``'s hyperparameters; names starting with any prefix in ``fixed`` are held fixed."""
    names = tuple(K.param_names())
    free = tuple(not any(n.startswith(f) for f in fixed) for n in names)
    schema = HyperSchema(K, names, tuple(K.param_roles()), free)
    theta = _freeze(K.theta())
    return HyperVector(theta, schema)


def unpack_hypers(schema: HyperSchema, theta) -> OutputKernel:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (schema.size,):
        raise InvalidArgumentError(f"schema expects {schema.size} hyperparameters, got shape {theta.shape}")
    return schema.template.with_theta(theta)


# ==========================================================================
# serialisation
# ==========================================================================


def scalar_from_dict(spec: dict) -> ScalarKernel:
    kind = spec.get("kind")
    if kind == "matern":
        return Matern(float(spec["alpha"]), float(spec.get("amplitude", 1.0)), float(spec.get("lengthscale", 1.0)))
    if kind == "se":
        return SquaredExponential(float(spec.get("amplitude", 1.0)), float(spec.get("lengthscale", 1.0)))
    if kind == "sphere_sobolev32":
        return SphereSobolev32(int(spec.get("exponent", 2)))
    if kind == "white":
        return WhiteNoise(float(spec.get("amplitude", 1e-3)))
    raise InvalidArgumentError(f"unknown scalar kernel kind {kind!r}")


def kernel_from_dict(spec: dict) -> OutputKernel:
    kind = spec.get("kind")
    if kind == "separable":
        B = np.asarray(spec["B"], dtype=float)
        D = int(round(math.sqrt(B.size)))
        return Separable(B.reshape(D, D), scalar_from_dict(spec["base"]))
    if kind == "lmc":
        nug = spec.get("nugget")
        return LMC(np.asarray(spec["factors"], dtype=float), scalar_from_dict(spec["base"]),
                   None if nug is None else np.asarray(nug, dtype=float))
    if kind == "pc":
        ind = spec.get("independent")
        if ind is not None:
            ind = tuple(None if s is None else scalar_from_dict(s) for s in ind)
        return ProcessConvolution(spec["blur_amplitudes"], spec["blur_widths"], spec["latent_amplitude"],
                                  spec["latent_width"], ind)
    if kind == "sum":
        return Sum(tuple(kernel_from_dict(p) for p in spec["parts"]))
    if kind in ("matern", "se", "sphere_sobolev32", "white"):
        return Separable(np.eye(1), scalar_from_dict(spec))
    raise InvalidArgumentError(f"unknown kernel kind {kind!r}")
