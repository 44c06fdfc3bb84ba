"""Integrands used by the experiments.

* two-level multi-fidelity toy functions (a step and a Forrester variant with a jump),
* a steady Allen-Cahn boundary-value problem solved by finite differences,
* spherical illumination integrands built from a synthetic environment map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from mobq.core import as_points, check_on_sphere
from mobq.errors import DomainError, InvalidArgumentError, SolverFailedError

FIDELITIES = ("high", "low")


def _check_fidelity(fidelity):
    if fidelity not in FIDELITIES:
        raise InvalidArgumentError(f"fidelity must be one of {FIDELITIES}, got {fidelity!r}")


def _in_interval(x, a, b):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x < a) or np.any(x > b):
        raise DomainError(f"points outside [{a}, {b}]")
    return x


def _scalar_or_array(x, out):
    return float(out) if np.ndim(x) == 0 else out


def step_function(x, fidelity: str):
    """Low: 0 up to and including 1, then 1. High: -1 then 2. Domain [0, 2]."""
    _check_fidelity(fidelity)
    xv = _in_interval(x, 0.0, 2.0)
    lo, hi = (-1.0, 2.0) if fidelity == "high" else (0.0, 1.0)
    return _scalar_or_array(x, np.where(xv <= 1.0, lo, hi))


def _forrester_low(x):
    return (3 * x - 1) ** 2 * np.sin(12 * x - 4) / 4 + 10 * (x - 1) + np.where(x > 0.5, 3.0, 0.0)


def forrester_jump(x, fidelity: str):
    """Forrester-type function with a jump at 1/2 on [0, 1].

    The high-fidelity level is ``2 low(x) - 20 (x - 1)`` plus 4 to the right of the jump.
    """
    _check_fidelity(fidelity)
    xv = _in_interval(x, 0.0, 1.0)
    low = _forrester_low(xv)
    if fidelity == "low":
        return _scalar_or_array(x, low)
    return _scalar_or_array(x, 2 * low - 20 * (xv - 1) + np.where(xv > 0.5, 4.0, 0.0))


# --------------------------------------------------------------------------
# Allen-Cahn
# --------------------------------------------------------------------------

AC_DOMAIN = (0.0, 10.0)
AC_BOUNDARY = (1.0, -1.0)


@dataclass(frozen=True, eq=False)
class BVPSolution:
    """Grid solution of ``eps u'' + u - u^3 = sin(x)`` with a cubic interpolant."""

    eps: float
    grid: np.ndarray
    values: np.ndarray
    residual: float
    iterations: int
    residual_history: tuple

    @property
    def spline(self) -> CubicSpline:
        return CubicSpline(self.grid, self.values)

    def __call__(self, x):
        xv = _in_interval(x, *AC_DOMAIN)
        out = self.spline(xv)
        # pin the boundary values against interpolation rounding
        out = np.where(xv == AC_DOMAIN[0], self.values[0], np.where(xv == AC_DOMAIN[1], self.values[-1], out))
        return _scalar_or_array(x, out)

    def integral(self) -> float:
        """Mean of the interpolant over the domain (integral against the uniform measure)."""
        a, b = AC_DOMAIN
        return float(self.spline.integrate(a, b)) / (b - a)


def _ac_residual(u, x, eps, h):
    r = np.zeros_like(u)
    r[1:-1] = eps * (u[:-2] - 2 * u[1:-1] + u[2:]) / h**2 + u[1:-1] - u[1:-1] ** 3 - np.sin(x[1:-1])
    r[0] = u[0] - AC_BOUNDARY[0]
    r[-1] = u[-1] - AC_BOUNDARY[1]
    return r


def _jacobian_bands(u, eps, h, shift=0.0):
    # tridiagonal Jacobian in banded storage; boundary rows are identity
    M = len(u)
    ab = np.zeros((3, M))
    ab[0, 2:] = eps / h**2
    ab[1, 1:-1] = -2 * eps / h**2 + 1 - 3 * u[1:-1] ** 2 - shift
    ab[1, 0] = ab[1, -1] = 1.0
    ab[2, :-2] = eps / h**2
    return ab


def _newton(u, x, eps, h, tol, max_iters):
    res = _ac_residual(u, x, eps, h)
    history = [float(np.max(np.abs(res)))]
    for _ in range(max_iters):
        if history[-1] < tol:
            return u, history, None
        du = solve_banded((1, 1), _jacobian_bands(u, eps, h), -res)
        # backtrack on the Euclidean residual, for which the Newton step is a descent direction
        merit = float(res @ res)
        step = 1.0
        while step > 1e-10:
            cand = u + step * du
            cres = _ac_residual(cand, x, eps, h)
            if float(cres @ cres) <= (1.0 - 1e-4 * step) * merit:
                break
            step *= 0.5
        else:
            return u, history, "Newton line search stalled"
        u, res = cand, cres
        history.append(float(np.max(np.abs(res))))
    if history[-1] < tol:
        return u, history, None
    return u, history, f"Newton did not converge in {max_iters} iterations"


def _pseudo_transient(u, x, eps, h, tol, max_iters, dt=0.1):
    """Newton damped by a pseudo time step that grows as the residual falls.

    Each iteration is one linearised backward-Euler step of
    ``u_t = eps u'' + u - u^3 - sin(x)``, so the iteration follows the
    parabolic flow into a stable steady state.
    """
    res = _ac_residual(u, x, eps, h)
    history = [float(np.max(np.abs(res)))]
    for _ in range(max_iters):
        if history[-1] < tol:
            return u, history, None
        u = u + solve_banded((1, 1), _jacobian_bands(u, eps, h, 1.0 / dt), -res)
        res = _ac_residual(u, x, eps, h)
        history.append(float(np.max(np.abs(res))))
        dt = min(dt * history[-2] / max(history[-1], 1e-300), 1e12)
    if history[-1] < tol:
        return u, history, None
    return u, history, f"pseudo-transient Newton did not converge in {max_iters} iterations"


def allen_cahn_solve(eps: float, M: int = 401, *, tol: float = 1e-8, max_iters: int = 200) -> BVPSolution:
    """Central differences on ``M`` uniform nodes and damped Newton from the linear guess.

    For small ``eps`` plain Newton from the linear guess stalls in a local
    minimum of the residual norm. The solver then restarts from the same
    guess with pseudo-transient damping, which converges to a stable state.
    """
    if not eps > 0:
        raise InvalidArgumentError("eps must be positive")
    if M < 50:
        raise InvalidArgumentError("M must be at least 50")
    a, b = AC_DOMAIN
    x = np.linspace(a, b, M)
    h = (b - a) / (M - 1)
    guess = np.linspace(*AC_BOUNDARY, M)
    u, history, failure = _newton(guess, x, eps, h, tol, max_iters)
    if failure:
        u, extra, failure = _pseudo_transient(guess, x, eps, h, tol, max_iters)
        history += extra
    if failure:
        raise SolverFailedError(failure, residual_history=tuple(history))
    u = u.copy()
    u[0], u[-1] = AC_BOUNDARY
    for arr in (x, u):
        arr.setflags(write=False)
    return BVPSolution(float(eps), x, u, history[-1], len(history) - 1, tuple(history))


# --------------------------------------------------------------------------
# multi-fidelity problems
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FidelityFunction:
    """A two-level model on an interval, with the points where it jumps or kinks."""

    identifier: str
    evaluators: dict
    domain: tuple
    breaks: tuple = ()

    def __call__(self, x, fidelity: str):
        _check_fidelity(fidelity)
        return self.evaluators[fidelity](x)


def fidelity_function(name: str, *, M: int = 401, eps_high: float = 0.1, eps_low: float = 2.0) -> FidelityFunction:
    if name == "step":
        return FidelityFunction("step", {f: (lambda x, f=f: step_function(x, f)) for f in FIDELITIES}, (0.0, 2.0), (1.0,))
    if name == "forrester":
        return FidelityFunction("forrester", {f: (lambda x, f=f: forrester_jump(x, f)) for f in FIDELITIES},
                                (0.0, 1.0), (0.5,))
    if name == "allen_cahn":
        return FidelityFunction("allen_cahn", {"high": allen_cahn_solve(eps_high, M), "low": allen_cahn_solve(eps_low, M)},
                                AC_DOMAIN)
    raise InvalidArgumentError(f"unknown multi-fidelity function {name!r}")


def multifidelity_split(name: str):
    """Point sets ``(high, low)`` for the named problem, each of shape ``(n, 1)``.

    Step and Forrester use 20 equidistant points with 1-based numbers
    4, 10, 11, 14 and 17 at high fidelity. Allen-Cahn uses the integers
    0..10 with 2, 5 and 8 at high fidelity.
    """
    if name in ("step", "forrester"):
        b = 2.0 if name == "step" else 1.0
        grid = np.linspace(0.0, b, 20)
        high_idx = np.array([4, 10, 11, 14, 17]) - 1
    elif name == "allen_cahn":
        grid = np.arange(11, dtype=float)
        high_idx = np.array([2, 5, 8])
    else:
        raise InvalidArgumentError(f"unknown multi-fidelity function {name!r}")
    mask = np.zeros(len(grid), dtype=bool)
    mask[high_idx] = True
    return grid[mask][:, None], grid[~mask][:, None]


# --------------------------------------------------------------------------
# illumination
# --------------------------------------------------------------------------

CHANNELS = ("red", "green", "blue")


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not n > 0:
        raise InvalidArgumentError("zero vector")
    return v / n


@dataclass(frozen=True)
class Lobe:
    """``amplitude * exp(concentration * (w . direction - 1))``."""

    direction: tuple
    concentration: float
    amplitude: float

    def __call__(self, w):
        return self.amplitude * np.exp(self.concentration * (w @ np.asarray(self.direction) - 1.0))

    def to_dict(self):
        return {"direction": list(self.direction), "concentration": self.concentration, "amplitude": self.amplitude}


def _lobe(direction, kappa, amp):
    return Lobe(tuple(_unit(direction).tolist()), float(kappa), float(amp))


DEFAULT_LOBES = {
    "red": (_lobe((0.2, 0.1, 1.0), 4.0, 1.2), _lobe((1.0, -0.4, 0.3), 12.0, 0.8), _lobe((-0.5, 0.8, 0.2), 2.0, 0.4)),
    "green": (_lobe((0.1, 0.3, 1.0), 3.0, 1.0), _lobe((0.8, 0.5, 0.1), 9.0, 0.6), _lobe((-0.7, -0.6, 0.4), 5.0, 0.5)),
    "blue": (_lobe((-0.1, 0.2, 1.0), 2.0, 0.9), _lobe((0.3, -0.9, 0.4), 7.0, 0.7), _lobe((0.6, 0.6, -0.5), 3.0, 0.6)),
}


@dataclass(frozen=True, eq=False)
class IlluminationScene:
    """Synthetic environment map, reflectance and camera directions.

    The map for each colour channel is a sum of von Mises-Fisher-shaped
    lobes plus a constant ambient level. Reflectance is ``diffuse`` plus an
    optional Phong lobe ``specular [w . r]_+^shininess`` around the mirror
    direction ``r`` of the camera about ``normal``. The clamp in the
    integrand uses the camera direction.
    """

    cameras: np.ndarray
    normal: tuple = (0.0, 0.0, 1.0)
    lobes: dict = field(default_factory=lambda: dict(DEFAULT_LOBES))
    ambient: float = 0.1
    diffuse: float = 1.0
    specular: float = 0.0
    shininess: float = 8.0

    def __post_init__(self):
        cams = np.atleast_2d(np.asarray(self.cameras, dtype=float))
        if cams.shape[1] != 3:
            raise InvalidArgumentError("cameras must be unit vectors in R^3")
        check_on_sphere(cams)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-12:
            raise InvalidArgumentError("normal must be a unit vector")
        if self.ambient < 0 or self.diffuse < 0 or self.specular < 0:
            raise InvalidArgumentError("environment and reflectance must be nonnegative")
        for lobes in self.lobes.values():
            if any(lb.amplitude < 0 for lb in lobes):
                raise InvalidArgumentError("lobe amplitudes must be nonnegative")
        cams.setflags(write=False)
        object.__setattr__(self, "cameras", cams)

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    @property
    def channels(self) -> tuple:
        return tuple(self.lobes)

    def radiance(self, channel: str, w) -> np.ndarray:
        if channel not in self.lobes:
            raise InvalidArgumentError(f"unknown channel {channel!r}")
        w = as_points(w, dim=3)
        return self.ambient + sum(lb(w) for lb in self.lobes[channel])

    def reflectance(self, camera: int, w) -> np.ndarray:
        w = as_points(w, dim=3)
        if not self.specular:
            return np.full(len(w), self.diffuse)
        n = np.asarray(self.normal)
        c = self.cameras[camera]
        r = 2.0 * (c @ n) * n - c
        return self.diffuse + self.specular * np.clip(w @ r, 0.0, None) ** self.shininess

    def integrand(self, channel: str, camera: int, w) -> np.ndarray:
        """``radiance(w) * reflectance(w) * max(w . camera, 0)``."""
        if not 0 <= camera < self.n_cameras:
            raise InvalidArgumentError(f"camera index {camera} out of range")
        w = as_points(w, dim=3)
        check_on_sphere(w)
        cos = np.clip(w @ self.cameras[camera], 0.0, None)
        return self.radiance(channel, w) * self.reflectance(camera, w) * cos

    def to_dict(self):
        return {
            "cameras": self.cameras.tolist(), "normal": list(self.normal), "ambient": self.ambient,
            "diffuse": self.diffuse, "specular": self.specular, "shininess": self.shininess,
            "lobes": {c: [lb.to_dict() for lb in lobes] for c, lobes in self.lobes.items()},
        }


def illumination_integrand(scene: IlluminationScene, channel: str, camera: int, w) -> np.ndarray:
    return scene.integrand(channel, camera, w)


def camera_ring(base, D: int, step: float, tangent=None) -> np.ndarray:
    """``D`` unit vectors on a great circle through ``base``, ``step`` radians apart.

    The circle runs along ``tangent`` (projected orthogonal to ``base``);
    by default a fixed axis is used.
    """
    if D < 1:
        raise InvalidArgumentError("D must be at least 1")
    z = _unit(base)
    if tangent is None:
        tangent = (1.0, 0.0, 0.0) if abs(z[0]) < 0.9 else (0.0, 1.0, 0.0)
    t = np.asarray(tangent, dtype=float)
    t = _unit(t - (t @ z) * z)
    ang = step * np.arange(D)
    out = np.cos(ang)[:, None] * z[None, :] + np.sin(ang)[:, None] * t[None, :]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def camera_covariance(cameras) -> np.ndarray:
    """``B[i, j] = exp(c_i . c_j - 1)``."""
    c = as_points(cameras, dim=3)
    check_on_sphere(c)
    B = np.exp(np.clip(c @ c.T, -1.0, 1.0) - 1.0)
    np.fill_diagonal(B, 1.0)
    return 0.5 * (B + B.T)


DEFAULT_CAMERA_BASE = (0.3, 0.2, 0.93)
DEFAULT_CAMERA_STEP = 0.005 * math.pi


def default_scene(D: int = 5, **kw) -> IlluminationScene:
    return IlluminationScene(camera_ring(DEFAULT_CAMERA_BASE, D, DEFAULT_CAMERA_STEP), **kw)
