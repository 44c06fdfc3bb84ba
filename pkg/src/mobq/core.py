"""Domain primitives: measures, per-output designs, datasets and seeded randomness.

Point sets are plain ``(n, p)`` float arrays throughout the package. Values
of a multi-output dataset are concatenated output-major: every point of
output 0, then every point of output 1, and so on. The Gram matrices in
:mod:`mobq.linalg` use exactly the same ordering.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from mobq.errors import DegenerateDesignError, DomainError, InvalidArgumentError

SPHERE_TOL = 1e-12


def as_points(x, dim=None) -> np.ndarray:
    """Coerce scalars, 1-D arrays and lists of points to an ``(n, p)`` array.

    A 1-D input is read as ``n`` points in one dimension unless ``dim`` says
    otherwise (then it is a single point of dimension ``dim``).
    """
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1) if (dim is not None and dim == a.size and dim > 1) else a.reshape(-1, 1)
    if a.ndim != 2:
        raise InvalidArgumentError(f"points must be at most 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError("points must have finite coordinates")
    return a


# --------------------------------------------------------------------------
# measures
# --------------------------------------------------------------------------


class Measure:
    """A probability measure with a sampler; subclasses are immutable."""

    dim: int

    def sample(self, n: int, rng: "Rng") -> np.ndarray:
        raise NotImplementedError

    def contains(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class UniformBox(Measure):
    """Uniform probability measure on the box ``[lower, upper]``."""

    lower: tuple
    upper: tuple

    def __init__(self, lower, upper):
        lo = tuple(float(v) for v in np.atleast_1d(lower))
        hi = tuple(float(v) for v in np.atleast_1d(upper))
        if len(lo) != len(hi) or not lo:
            raise InvalidArgumentError("lower and upper must have the same positive length")
        if not all(a < b for a, b in zip(lo, hi)):
            raise InvalidArgumentError(f"need lower < upper componentwise, got {lo}, {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def sample(self, n, rng):
        u = rng.generator().random((n, self.dim))
        return np.asarray(self.lower) + u * (np.asarray(self.upper) - np.asarray(self.lower))

    def contains(self, x):
        x = as_points(x)
        return np.all((x >= np.asarray(self.lower)) & (x <= np.asarray(self.upper)), axis=1)

    def to_dict(self):
        return {"kind": "box", "lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class UniformSphere(Measure):
    """Uniform probability measure on the unit sphere in R^3."""

    dim: int = field(default=3, init=False)

    def sample(self, n, rng):
        gen = rng.generator()
        out = np.empty((n, 3))
        filled = 0
        while filled < n:
            g = gen.standard_normal((n - filled, 3))
            norms = np.linalg.norm(g, axis=1)
            keep = norms >= 1e-8
            g = g[keep] / norms[keep, None]
            out[filled : filled + len(g)] = g
            filled += len(g)
        return out

    def contains(self, x):
        x = as_points(x, dim=3)
        return np.abs(np.linalg.norm(x, axis=1) - 1.0) <= SPHERE_TOL

    def to_dict(self):
        return {"kind": "sphere"}


def check_on_sphere(x: np.ndarray) -> None:
    if x.shape[1] != 3 or np.any(np.abs(np.linalg.norm(x, axis=1) - 1.0) > SPHERE_TOL):
        raise DomainError("sphere kernels need unit-norm points in R^3")


def measure_from_dict(spec: dict) -> Measure:
    kind = spec.get("kind")
    if kind == "box":
        return UniformBox(spec["lower"], spec["upper"])
    if kind == "sphere":
        return UniformSphere()
    raise InvalidArgumentError(f"unknown measure kind {kind!r}")


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Rng:
    """Seeded, splittable handle onto a counter-based (Philox) bit generator.

    A handle is a value: calling :meth:`generator` twice gives two generators
    producing the same stream. Independent streams come from :meth:`child`.
    """

    seed: int
    stream: tuple = ()
    algorithm: str = "philox"

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(self.stream))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, i: int) -> "Rng":
        return Rng(self.seed, tuple(self.stream) + (int(i),), self.algorithm)

    def split(self, k: int) -> list:
        return [self.child(i) for i in range(k)]


# --------------------------------------------------------------------------
# designs and datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Design:
    """Per-output point sets ``X = (X_1, ..., X_D)``."""

    per_output: tuple
    shared: bool = field(init=False)

    def __init__(self, per_output):
        sets = tuple(as_points(x) for x in per_output)
        if not sets:
            raise InvalidArgumentError("a design needs at least one output")
        if any(len(x) == 0 for x in sets):
            raise InvalidArgumentError("every output needs at least one point")
        if len({x.shape[1] for x in sets}) != 1:
            raise InvalidArgumentError("all points of a design must share one dimension")
        for x in sets:
            x.setflags(write=False)
        shared = all(x.shape == sets[0].shape and np.array_equal(x, sets[0]) for x in sets[1:])
        object.__setattr__(self, "per_output", sets)
        object.__setattr__(self, "shared", bool(shared))

    @classmethod
    def shared_design(cls, x, n_outputs: int) -> "Design":
        x = as_points(x)
        return cls([x] * n_outputs)

    @property
    def n_outputs(self) -> int:
        return len(self.per_output)

    @property
    def dim(self) -> int:
        return self.per_output[0].shape[1]

    @property
    def sizes(self) -> list:
        return [len(x) for x in self.per_output]

    @property
    def total(self) -> int:
        return sum(self.sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def stacked(self) -> np.ndarray:
        return np.vstack(self.per_output)

    def output_index(self) -> np.ndarray:
        """Output label of every row of :meth:`stacked`."""
        return np.repeat(np.arange(self.n_outputs), self.sizes)

    def subset(self, outputs) -> "Design":
        return Design([self.per_output[d] for d in outputs])


@dataclass(frozen=True, eq=False)
class Dataset:
    design: Design
    values: np.ndarray

    def __init__(self, design: Design, values):
        v = np.asarray(values, dtype=float).ravel().copy()
        if v.size != design.total:
            raise InvalidArgumentError(f"expected {design.total} values, got {v.size}")
        v.setflags(write=False)
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_outputs(cls, design: Design, per_output_values) -> "Dataset":
        parts = [np.asarray(v, dtype=float).ravel() for v in per_output_values]
        if [p.size for p in parts] != design.sizes:
            raise InvalidArgumentError("per-output value counts do not match the design")
        return cls(design, np.concatenate(parts))

    @classmethod
    def evaluate(cls, design: Design, functions) -> "Dataset":
        """Evaluate ``functions[d]`` (vectorised over an ``(n, p)`` array) on ``X_d``."""
        return cls.from_outputs(design, [np.asarray(f(x), dtype=float) for f, x in zip(functions, design.per_output)])

    def per_output(self) -> list:
        off = self.design.offsets
        return [self.values[off[d] : off[d + 1]] for d in range(self.design.n_outputs)]


# --------------------------------------------------------------------------
# point generators and geometry
# --------------------------------------------------------------------------


def equidistant_grid(n: int, a: float, b: float) -> np.ndarray:
    """``n`` equally spaced points on ``[a, b]`` including both end points, as ``(n, 1)``."""
    if n < 2:
        raise InvalidArgumentError(f"equidistant grid needs n >= 2, got {n}")
    if not a < b:
        raise InvalidArgumentError(f"need a < b, got [{a}, {b}]")
    i = np.arange(n, dtype=float)
    return (a + i * (b - a) / (n - 1)).reshape(-1, 1)


def sample_measure(measure: Measure, n: int, rng: Rng) -> np.ndarray:
    if n < 1:
        raise InvalidArgumentError(f"need n >= 1, got {n}")
    return measure.sample(n, rng)


def domain_proxy(measure: Measure, n: int = 4096, rng: Rng | None = None) -> np.ndarray:
    """Dense stand-in for the domain, used to approximate the fill distance.

    Boxes get a regular grid of about ``n`` points (cell-centred plus faces);
    the sphere gets ``n`` IID uniform points.
    """
    if isinstance(measure, UniformBox):
        per_dim = max(2, int(round(n ** (1.0 / measure.dim))))
        axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(measure.lower, measure.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)
    if isinstance(measure, UniformSphere):
        return measure.sample(n, rng or Rng(0))
    raise InvalidArgumentError(f"no proxy for {measure!r}")


@dataclass(frozen=True)
class GeometryStats:
    fill_distance: float
    separation_radius: float
    mesh_ratio: float


def geometry_stats(x, domain_samples) -> GeometryStats:
    x = as_points(x)
    proxy = as_points(domain_samples, dim=x.shape[1])
    if len(x) < 2:
        raise InvalidArgumentError("geometry statistics need at least two points")
    tree = cKDTree(x)
    h = float(np.max(tree.query(proxy, k=1)[0]))
    nn = tree.query(x, k=2)[0][:, 1]
    q = 0.5 * float(np.min(nn))
    if q == 0.0:
        raise DegenerateDesignError("design contains duplicate points (separation radius is zero)")
    return GeometryStats(h, q, h / q)
