"""Empirical Bayes: log marginal likelihood, its gradient, and a multi-start optimiser.

All derivatives are taken with respect to the packed hyperparameter vector
(log amplitudes and lengthscales, Cholesky parameters of ``B``, raw LMC
factors). With ``alpha = C^{-1} f`` the gradient is

    d log p / d theta_i = 1/2 tr((alpha alpha^T - C^{-1}) dC/dtheta_i).

The objective is evaluated on the dense Gram matrix. When the factorisation
needs jitter (a fixed multiple of the mean diagonal), the gradient includes
the jitter's own dependence on ``theta``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial.distance import pdist

from mobq import linalg
from mobq.core import Dataset, Rng
from mobq.errors import InvalidArgumentError, NotPositiveDefiniteError, OptimizationFailedError
from mobq.kernels import HyperSchema, HyperVector, OutputKernel, pack_hypers, unpack_hypers

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
POSITIVE_ROLES = {"amplitude", "lengthscale", "chol_diag", "nugget", "noise", "blur_amplitude", "latent_amplitude"}


@dataclass(frozen=True)
class OptimizerConfig:
    """Projected gradient ascent in the packed (log) coordinates.

    Step lengths follow Barzilai-Borwein and are cut back by ``shrink`` until
    the sufficient-increase test passes, so every restart's trace is
    non-decreasing.
    """

    restarts: int = 10
    max_iters: int = 300
    initial_step: float = 0.1
    shrink: float = 0.5
    grow: float = 2.0
    sufficient_increase: float = 1e-4
    max_backtracks: int = 40
    max_move: float = 1.0
    grad_tol: float = 1e-5
    init_range: tuple = (1e-2, 1e2)
    bound_factor: float = 1e3
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.restarts < 1 or self.max_iters < 1:
            raise InvalidArgumentError("restarts and max_iters must be at least 1")
        if not (0 < self.shrink < 1 < self.grow) or self.initial_step <= 0 or self.grad_tol <= 0:
            raise InvalidArgumentError("invalid step policy")
        lo, hi = self.init_range
        if not 0 < lo <= hi:
            raise InvalidArgumentError("init_range must satisfy 0 < lo <= hi")

    @classmethod
    def from_dict(cls, spec: dict | None) -> "OptimizerConfig":
        spec = dict(spec or {})
        unknown = set(spec) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgumentError(f"unknown optimizer settings: {sorted(unknown)}")
        if "init_range" in spec:
            spec["init_range"] = tuple(spec["init_range"])
        return cls(**spec)


def _schema_of(schema_or_kernel) -> HyperSchema:
    if isinstance(schema_or_kernel, HyperSchema):
        return schema_or_kernel
    if isinstance(schema_or_kernel, HyperVector):
        return schema_or_kernel.schema
    if isinstance(schema_or_kernel, OutputKernel):
        return pack_hypers(schema_or_kernel).schema
    raise InvalidArgumentError("expected a HyperSchema, HyperVector or OutputKernel")


def _theta_of(theta) -> np.ndarray:
    return np.asarray(theta.theta if isinstance(theta, HyperVector) else theta, dtype=float)


def _factor(K, design, jitter_ladder):
    try:
        return linalg.factorize(linalg.assemble_gram(K, design), jitter_ladder)
    except (NotPositiveDefiniteError, FloatingPointError, ValueError):
        return None


def log_marginal(schema, theta, dataset: Dataset, measure=None, *, jitter_ladder=linalg.JITTER_LADDER) -> float:
    """``log p(f(X) | X, theta)``; ``-inf`` when no jitter makes the Gram factorable.

    ``measure`` is accepted for signature symmetry with the posterior and is unused.
    """
    K = unpack_hypers(_schema_of(schema), _theta_of(theta))
    F = _factor(K, dataset.design, jitter_ladder)
    if F is None:
        return -math.inf
    f = dataset.values
    return float(-0.5 * f @ F.solve(f) - 0.5 * F.logdet() - 0.5 * len(f) * LOG_2PI)


def _lml_and_grad(schema, theta, dataset, jitter_ladder=linalg.JITTER_LADDER):
    K = unpack_hypers(schema, theta)
    design = dataset.design
    F = _factor(K, design, jitter_ladder)
    if F is None:
        return -math.inf, None, True
    f = dataset.values
    alpha = F.solve(f)
    lml = float(-0.5 * f @ alpha - 0.5 * F.logdet() - 0.5 * len(f) * LOG_2PI)
    if not math.isfinite(lml):
        return -math.inf, None, True
    try:
        grads = K.gram_grads(design)
    except NotImplementedError:
        return lml, _fd_grad(schema, theta, dataset, jitter_ladder), False
    Q = np.outer(alpha, alpha) - F.inverse()
    g = np.array([0.5 * float(np.sum(Q * dC)) for dC in grads])
    if F.jitter:
        # the jitter is a fixed multiple of the mean diagonal, so it moves with theta too
        n = len(f)
        rel = F.jitter / (float(np.trace(F.matrix())) - n * F.jitter) * n
        g += 0.5 * float(np.trace(Q)) * rel / n * np.array([float(np.trace(dC)) for dC in grads])
    return lml, g, True


def _fd_grad(schema, theta, dataset, jitter_ladder):
    g = np.zeros(len(theta))
    for i in range(len(theta)):
        h = 1e-6 * (1.0 + abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (log_marginal(schema, tp, dataset, jitter_ladder=jitter_ladder)
                - log_marginal(schema, tm, dataset, jitter_ladder=jitter_ladder)) / (2 * h)
    return g


def grad_log_marginal(schema, theta, dataset: Dataset, measure=None, *, jitter_ladder=linalg.JITTER_LADDER):
    """Gradient of :func:`log_marginal`; returns ``(gradient, analytic)``.

    ``analytic`` is ``False`` when the kernel has no analytic Gram derivative
    and central finite differences were used instead.
    """
    schema = _schema_of(schema)
    _, g, analytic = _lml_and_grad(schema, _theta_of(theta), dataset, jitter_ladder)
    if g is None:
        raise NotPositiveDefiniteError("gradient requested where the Gram matrix cannot be factored")
    return g, analytic


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


@dataclass
class RestartResult:
    theta: np.ndarray
    lml: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


@dataclass
class OptimizeResult:
    hyper: HyperVector
    lml: float
    trace: list
    restarts: list
    best_index: int

    @property
    def kernel(self) -> OutputKernel:
        return self.hyper.kernel()


def role_scales(schema: HyperSchema, dataset: Dataset) -> np.ndarray:
    """Characteristic size of each hyperparameter, from the data."""
    f = dataset.values
    rms = float(np.sqrt(np.mean(f * f))) or 1.0
    x = dataset.design.stacked()
    dist = pdist(x) if len(x) > 1 else np.array([1.0])
    dist = dist[dist > 0]
    ell = float(np.median(dist)) if dist.size else 1.0
    p = dataset.design.dim
    latent = rms / math.sqrt((2.0 * math.pi / math.sqrt(3.0)) ** p * ell**p)
    table = {
        "amplitude": rms, "lengthscale": ell, "chol_diag": 1.0, "chol_off": 1.0, "factor": rms,
        "nugget": 0.1 * rms * rms, "noise": 0.1 * rms, "blur_amplitude": 1.0, "latent_amplitude": latent,
    }
    return np.array([table.get(r, 1.0) for r in schema.roles])


def _bounds(schema, scales, factor):
    lo = np.empty(schema.size)
    hi = np.empty(schema.size)
    for i, (role, s) in enumerate(zip(schema.roles, scales)):
        if role in POSITIVE_ROLES:
            lo[i], hi[i] = math.log(s / factor), math.log(s * factor)
        else:
            lo[i], hi[i] = -factor * s, factor * s
    return lo, hi


def _initial_theta(schema, base_theta, scales, config, rng: Rng, restart: int):
    theta = np.array(base_theta, dtype=float)
    if restart == 0:
        return theta
    gen = rng.generator()
    a, b = config.init_range
    for i, (role, s) in enumerate(zip(schema.roles, scales)):
        u = gen.random()
        if not schema.free[i]:
            continue
        if role in POSITIVE_ROLES:
            theta[i] = math.log(s * a) + u * (math.log(s * b) - math.log(s * a))
        else:
            theta[i] = s * (2.0 * u - 1.0)
    return theta


def _ascend(schema, theta0, dataset, config, lo, hi, unit, jitter_ladder):
    free = schema.free_mask
    theta = np.clip(theta0, lo, hi)
    lml, g, _ = _lml_and_grad(schema, theta, dataset, jitter_ladder)
    res = RestartResult(theta.copy(), lml, [lml])
    if g is None:
        return res
    g = np.where(free, g, 0.0)
    step = config.initial_step
    for _ in range(config.max_iters):
        # projected gradient: drop components pushing out of the box
        pg = np.where(((theta <= lo) & (g < 0)) | ((theta >= hi) & (g > 0)), 0.0, g)
        if np.linalg.norm(pg) < config.grad_tol:
            res.converged = True
            break
        # trust cap: no coordinate moves more than max_move of its unit per step
        biggest = float(np.max(np.abs(g) / unit))
        if biggest * step > config.max_move:
            step = config.max_move / biggest
        accepted = False
        for _ in range(config.max_backtracks):
            cand = np.clip(theta + step * g, lo, hi)
            move = cand - theta
            c_lml, c_g, _ = _lml_and_grad(schema, cand, dataset, jitter_ladder)
            if c_g is not None and c_lml >= lml + config.sufficient_increase * float(g @ move):
                accepted = True
                break
            step *= config.shrink
        if not accepted:
            break
        c_g = np.where(free, c_g, 0.0)
        # Barzilai-Borwein length for the next step, from the change in gradient
        curv = -float(move @ (c_g - g))
        step = float(move @ move) / curv if curv > 0 else step * config.grow
        step = min(max(step, 1e-12), 1e6)
        theta, lml, g = cand, c_lml, c_g
        res.trace.append(lml)
        if float(np.max(np.abs(move))) < 1e-12:
            res.converged = True
            break
    res.theta, res.lml, res.iterations = theta, lml, len(res.trace) - 1
    return res


def optimize(schema, dataset: Dataset, measure=None, config: OptimizerConfig | None = None, *,
             jitter_ladder=linalg.JITTER_LADDER) -> OptimizeResult:
    """Maximise the log marginal likelihood over the free hyperparameters.

    Restart 0 starts from the schema's template kernel; restart ``r > 0`` draws
    its start log-uniformly (or uniformly for unconstrained coordinates) from
    stream ``r`` of the configured seed, so adding restarts never changes the
    earlier ones.
    """
    config = config or OptimizerConfig()
    if isinstance(schema, OutputKernel):
        hv = pack_hypers(schema)
        schema, base_theta = hv.schema, hv.theta
    elif isinstance(schema, HyperVector):
        schema, base_theta = schema.schema, schema.theta
    else:
        base_theta = schema.template.theta()
    scales = role_scales(schema, dataset)
    lo, hi = _bounds(schema, scales, config.bound_factor)
    # log coordinates move in natural units, raw ones relative to their scale
    unit = np.array([1.0 if r in POSITIVE_ROLES else s for r, s in zip(schema.roles, scales)])
    rngs = Rng(config.seed).split(config.restarts)
    starts = [_initial_theta(schema, base_theta, scales, config, rngs[r], r) for r in range(config.restarts)]

    def run(theta0):
        return _ascend(schema, theta0, dataset, config, lo, hi, unit, jitter_ladder)

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(t) for t in starts]
    lmls = np.array([r.lml for r in results])
    if not np.any(np.isfinite(lmls)):
        raise OptimizationFailedError("every restart hit a Gram matrix that could not be factored")
    best = int(np.argmax(lmls))
    log.info("optimiser: best lml %.6g at restart %d of %d", lmls[best], best, len(results))
    theta = results[best].theta.copy()
    theta.setflags(write=False)
    return OptimizeResult(HyperVector(theta, schema), float(lmls[best]), [r.trace for r in results], results, best)
