"""Composite Gauss-Legendre rules with panel doubling.

Each sub-interval between break points is split into ``m`` equal panels,
each carrying a fixed 16-point Gauss-Legendre rule; ``m`` doubles until two
successive estimates agree to ``tol`` or the node budget is spent. Break
points let callers put kinks and jumps on panel boundaries, where the rule
stays spectrally accurate.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from mobq.errors import AccuracyNotMetError

ORDER = 16
MAX_NODES = 2**14


@lru_cache(maxsize=None)
def _rule(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def composite_nodes(a: float, b: float, panels: int, order: int = ORDER, breaks=()):
    """Nodes and weights of the composite rule on ``[a, b]`` (weights sum to ``b - a``)."""
    edges = np.unique(np.concatenate([[a, b], [t for t in breaks if a < t < b]]))
    gx, gw = _rule(order)
    xs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        p = np.linspace(lo, hi, panels + 1)
        half = 0.5 * np.diff(p)
        mid = 0.5 * (p[:-1] + p[1:])
        xs.append((mid[:, None] + half[:, None] * gx[None, :]).ravel())
        ws.append((half[:, None] * gw[None, :]).ravel())
    return np.concatenate(xs), np.concatenate(ws)


def integrate_1d(f, a: float, b: float, *, tol: float = 1e-10, breaks=(), max_nodes: int = MAX_NODES,
                 start_panels: int = 1, raise_on_fail: bool = True):
    """Integral of a vectorised ``f`` over ``[a, b]`` (not normalised).

    Returns ``(value, error_estimate, nodes_used)``. The error estimate is the
    absolute change between the last two doublings.
    """
    n_sub = 1 + sum(1 for t in breaks if a < t < b)
    panels = start_panels
    x, w = composite_nodes(a, b, panels, breaks=breaks)
    prev = float(np.dot(w, f(x)))
    err = np.inf
    while True:
        panels *= 2
        if panels * ORDER * n_sub > max_nodes:
            if raise_on_fail:
                raise AccuracyNotMetError(
                    f"quadrature did not reach tol={tol:g} within {max_nodes} nodes",
                    best_estimate=prev, error_estimate=err,
                )
            return prev, err, len(x)
        x, w = composite_nodes(a, b, panels, breaks=breaks)
        cur = float(np.dot(w, f(x)))
        err = abs(cur - prev)
        if err < tol:
            return cur, err, len(x)
        prev = cur


def tensor_nodes(lower, upper, panels: int, order: int = ORDER):
    """Tensor product of composite rules on a box; returns ``(points, weights)``."""
    axes = [composite_nodes(lo, hi, panels, order) for lo, hi in zip(lower, upper)]
    grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    wgrids = np.meshgrid(*[a[1] for a in axes], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return pts, wts


def integrate_box(f, lower, upper, *, tol: float = 1e-10, max_nodes: int = 2**21, order: int = 8):
    """Integral of ``f`` (taking an ``(n, p)`` array) over a box, by tensor doubling."""
    p = len(lower)
    panels = 1
    x, w = tensor_nodes(lower, upper, panels, order)
    prev = float(np.dot(w, f(x)))
    err = np.inf
    while True:
        panels *= 2
        if (panels * order) ** p > max_nodes:
            raise AccuracyNotMetError(f"box quadrature did not reach tol={tol:g}", best_estimate=prev, error_estimate=err)
        x, w = tensor_nodes(lower, upper, panels, order)
        cur = float(np.dot(w, f(x)))
        err = abs(cur - prev)
        if err < tol:
            return cur, err, len(x)
        prev = cur


def sphere_product_rule(n_theta: int, n_phi: int, pole=None, hemisphere: bool = False):
    """Product rule for the normalised uniform measure on the unit sphere.

    Gauss-Legendre in ``t = cos(theta)`` times the trapezoid rule in ``phi``,
    rotated so that ``theta`` is measured from ``pole``. With
    ``hemisphere=True`` only ``t in [0, 1]`` is covered (the weights then sum
    to 1/2), which is what integrands clamped by ``[w . pole]_+`` need.
    """
    lo = 0.0 if hemisphere else -1.0
    t, wt = composite_nodes(lo, 1.0, max(1, n_theta // ORDER))
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    s = np.sqrt(np.clip(1.0 - t * t, 0.0, None))
    local = np.stack(
        [np.outer(s, np.cos(phi)).ravel(), np.outer(s, np.sin(phi)).ravel(), np.repeat(t, n_phi)], axis=1
    )
    weights = np.repeat(wt, n_phi) / (2.0 * n_phi)
    if pole is not None:
        local = local @ _frame(np.asarray(pole, dtype=float)).T
    return local, weights


def _frame(pole: np.ndarray) -> np.ndarray:
    """Rotation whose third column is ``pole``."""
    z = pole / np.linalg.norm(pole)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = helper - np.dot(helper, z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)
