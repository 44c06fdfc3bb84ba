"""Acceptance suite: one marked test (or group) per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion.
"""
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from mobq import hyper, linalg, posterior, studies
from mobq.core import Dataset, Design, Rng, UniformBox, UniformSphere, sample_measure
from mobq.kernels import (
    LMC, Matern, ProcessConvolution, Separable, SphereSobolev32, SquaredExponential, Sum, WhiteNoise, initial_error,
    kernel_mean, pack_hypers, sobolev_matern,
)

UNIT = UniformBox((0.0,), (1.0,))
criterion = pytest.mark.criterion


def _stratified(gen, n):
    return (np.arange(n) + 0.25 + 0.5 * gen.random(n)) / n


def _spd(gen, D):
    A = gen.normal(size=(D, D))
    return A @ A.T + 0.5 * np.eye(D)


# --------------------------------------------------------------------------
# 1: one output reduces to textbook quadrature
# --------------------------------------------------------------------------


def _textbook(x, f, kind, amp, ell):
    """Single-output BQ on [0, 1] with hand-derived kernel means."""
    r = x[:, None] - x[None, :]
    if kind == "se":
        G = amp**2 * np.exp(-r * r / (2 * ell * ell))
        s = math.sqrt(2) * ell
        z = amp**2 * ell * math.sqrt(math.pi / 2) * (erf((1 - x) / s) + erf(x / s))
        zz = amp**2 * (ell * math.sqrt(2 * math.pi) * erf(1 / s) - 2 * ell * ell * (1 - math.exp(-1 / (2 * ell * ell))))
    else:
        G = amp**2 * np.exp(-np.abs(r) / ell)
        z = amp**2 * ell * (2 - np.exp(-x / ell) - np.exp(-(1 - x) / ell))
        zz = amp**2 * (2 * ell - 2 * ell * ell * (1 - math.exp(-1 / ell)))
    L = np.linalg.cholesky(G)
    w = np.linalg.solve(L.T, np.linalg.solve(L, z))
    return w @ f, zz - z @ w


@criterion(1, "one-output engine matches textbook BQ to 1e-10")
def test_single_output_reduction():
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        gen = Rng(1, (i,)).generator()
        kind = ("se", "exp")[i % 2]
        n = int(gen.integers(2, 11))
        amp, ell = gen.uniform(0.5, 2.0), gen.uniform(0.05, 0.15) if kind == "se" else gen.uniform(0.05, 1.0)
        x = _stratified(gen, n)
        f = gen.normal(size=n)
        k = SquaredExponential(amp, ell) if kind == "se" else Matern(0.5, amp, ell)
        model = posterior.fit(Separable(np.eye(1), k), UNIT, Design([x[:, None]]))
        post = posterior.integral_posterior(model, Dataset(model.design, f))
        mean, var = _textbook(x, f, kind, amp, ell)
        worst = max(worst, abs(post.mean[0] - mean), abs(post.cov[0, 0] - var))
    elapsed = time.perf_counter() - t0
    assert worst < 1e-10, worst
    assert elapsed < 5.0, elapsed


# --------------------------------------------------------------------------
# 2: separable decoupling on a shared design
# --------------------------------------------------------------------------


@criterion(2, "separable model on a shared design decouples")
@settings(max_examples=60)
@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 30),
       st.sampled_from(["se", "m05", "m15", "m25", "sphere"]), st.sampled_from(["auto", "never"]))
def test_separable_decoupling(seed, D, N, kind, kronecker):
    gen = Rng(seed).generator()
    if kind == "sphere":
        measure, k = UniformSphere(), SphereSobolev32(1)
        x = sample_measure(measure, N, Rng(seed, (1,)))
    else:
        measure = UNIT
        x = _stratified(gen, N)[:, None]
        ell = gen.uniform(0.02, 0.2)
        k = {"se": SquaredExponential(1.0, ell / 2), "m05": Matern(0.5, 1.0, ell),
             "m15": Matern(1.5, 1.0, ell), "m25": Matern(2.5, 1.0, ell)}[kind]
    B = _spd(gen, D)
    multi = posterior.fit(Separable(B, k), measure, Design.shared_design(x, D), kronecker=kronecker)
    uni = posterior.fit(Separable(np.eye(1), k), measure, Design([x]))
    w = uni.weight_matrix[:, 0]
    assert np.abs(multi.weight_matrix - np.kron(np.eye(D), w[:, None])).max() < 1e-10
    e2 = initial_error(k, measure) - kernel_mean(k, measure, x) @ w
    cov = posterior.integral_posterior(multi, Dataset(multi.design, np.zeros(N * D))).cov
    assert np.abs(cov - B * e2).max() <= 1e-9 * np.abs(B * e2).max() + 1e-15


# --------------------------------------------------------------------------
# 3: sphere kernel identities
# --------------------------------------------------------------------------


@criterion(3, "sphere kernel mean and initial error equal 2/3")
def test_sphere_identities():
    k, S = SphereSobolev32(), UniformSphere()
    x = sample_measure(S, 200, Rng(3))
    assert np.abs(kernel_mean(k, S, x) - 2 / 3).max() < 1e-12
    assert abs(initial_error(k, S) - 2 / 3) < 1e-12
    # Monte Carlo oracle: 3.2e7 samples, standard error about 2e-4
    gen = Rng(3, (1,)).generator()
    x0 = x[0]
    mean_at_x0 = initial = 0.0
    chunks = 8
    for _ in range(chunks):
        u = _uniform_sphere(gen, 4_000_000)
        v = _uniform_sphere(gen, 4_000_000)
        mean_at_x0 += np.mean(8 / 3 - np.sum((u - x0) ** 2, axis=1)) / chunks
        initial += np.mean(8 / 3 - np.sum((u - v) ** 2, axis=1)) / chunks
    assert abs(mean_at_x0 - 2 / 3) < 1e-3
    assert abs(initial - 2 / 3) < 1e-3


def _uniform_sphere(gen, n):
    g = gen.standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# 4 and 11: illumination study
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def illumination():
    t0 = time.perf_counter()
    report = studies.illumination_study(studies.IlluminationConfig())
    return report, time.perf_counter() - t0


@criterion(4, "illumination WCE slopes lie in [-0.9, -0.6]")
def test_illumination_rates(illumination):
    report, elapsed = illumination
    bq = {k: v.slope for k, v in report.slopes.items() if not k.startswith("MC")}
    assert len(bq) == 1 + 2 + 5
    bad = {k: s for k, s in bq.items() if not -0.9 <= s <= -0.6}
    assert not bad, bad
    assert elapsed < 120.0, elapsed


@criterion(11, "every BQ variant beats Monte Carlo at N >= 64")
def test_illumination_beats_monte_carlo(illumination):
    report, _ = illumination
    beats = report.summary["beats_mc_at_64_plus"]
    assert set(beats) == {"BQ", "2-output BQ", "5-output BQ"}
    assert all(beats.values()), beats


# --------------------------------------------------------------------------
# 5 and 6: rates on equidistant grids
# --------------------------------------------------------------------------

GRID_SCHEDULE = (8, 16, 32, 64, 128, 256)


def _wce_slope(K):
    return studies.convergence_study(K, UNIT, design="grid", schedule=GRID_SCHEDULE).slopes["wce[0]"].slope


@criterion(5, "Matern rate on grids and sum-kernel rate")
def test_matern_and_sum_rates():
    t0 = time.perf_counter()
    rough = Separable(np.eye(1), sobolev_matern(1.5, lengthscale=0.5))
    smooth = Separable(np.eye(1), sobolev_matern(2.5, lengthscale=0.5))
    s_rough = _wce_slope(rough)
    s_sum = _wce_slope(Sum((rough, smooth)))
    assert abs(s_rough + 1.5) <= 0.3, s_rough
    assert abs(s_sum - s_rough) <= 0.3, (s_sum, s_rough)
    assert time.perf_counter() - t0 < 60.0


@criterion(6, "smoother prior on a rougher integrand keeps its rate")
@settings(max_examples=8)
@given(st.floats(0.2, 0.8), st.sampled_from([2.5, 3.0]))
def test_misspecified_rate(center, smoothness):
    K = Separable(np.eye(1), sobolev_matern(smoothness, lengthscale=0.5))
    kink = studies.integrand_from_dict({"name": "abs_kink", "center": center}, UNIT)
    rep = studies.convergence_study(K, UNIT, design="grid", schedule=GRID_SCHEDULE, integrands=[kink],
                                    references=[kink.reference()])
    assert rep.slopes["abs_error[0]"].slope <= -1.2, rep.slopes["abs_error[0]"]


# --------------------------------------------------------------------------
# 7: multi-fidelity
# --------------------------------------------------------------------------

_MF_SECONDS = []


@criterion(7, "multi-output models beat uni-output BQ on multi-fidelity problems")
@pytest.mark.slow
@pytest.mark.parametrize("function", ["step", "forrester", "allen_cahn"])
def test_multifidelity_orderings(function):
    t0 = time.perf_counter()
    report = studies.multifidelity_study(studies.MultiFidelityConfig(function=function))
    _MF_SECONDS.append(time.perf_counter() - t0)
    s = report.summary
    for seed, row in s["per_seed"].items():
        print(function, seed, row)
    assert s["majority_pass"], s["per_seed"]
    assert sum(_MF_SECONDS) < 180.0, _MF_SECONDS


# --------------------------------------------------------------------------
# 8: optimality of the BQ weights
# --------------------------------------------------------------------------


def _small_kernel(gen, D, kind):
    base = Matern(float(gen.choice([0.5, 1.5, 2.5])), 1.0, gen.uniform(0.1, 0.5))
    if kind == "separable":
        return Separable(_spd(gen, D), base)
    if kind == "lmc":
        return LMC(gen.normal(size=(2, D)), base, gen.uniform(0.05, 0.3, D))
    return ProcessConvolution(gen.uniform(0.5, 1.5, (2, D)), gen.uniform(0.05, 0.2, (2, D)),
                              gen.uniform(0.5, 1.5, 2), gen.uniform(0.05, 0.2, 2),
                              tuple(Matern(1.5, 0.3, 0.2) for _ in range(D)))


@criterion(8, "no weight perturbation beats the BQ worst-case error")
@settings(max_examples=20)
@given(st.integers(0, 10**6), st.integers(1, 3), st.sampled_from(["separable", "lmc", "pc"]))
def test_bq_weights_are_optimal(seed, D, kind):
    gen = Rng(seed).generator()
    K = _small_kernel(gen, D, kind)
    design = Design([_stratified(gen, int(gen.integers(1, 7)))[:, None] for _ in range(D)])
    model = posterior.fit(K, UNIT, design)
    W = model.weight_matrix
    best = [posterior.quadratic_wce(model, W, d) for d in range(D)]
    # 10 perturbations per problem, 20 problems: 200 in all
    for scale in np.logspace(-6, 0, 10):
        P = W + scale * gen.normal(size=W.shape)
        for d in range(D):
            assert posterior.quadratic_wce(model, P, d) >= best[d] - 1e-10


# --------------------------------------------------------------------------
# 9: likelihood gradient
# --------------------------------------------------------------------------


def _gradient_case(i):
    gen = Rng(9, (i,)).generator()
    D = 1 + i % 3
    n = int(gen.integers(3, 7))
    family = i % 5
    if family == 4:
        measure = UniformSphere()
        xs = [sample_measure(measure, n, Rng(9, (i, d))) for d in range(D)]
    else:
        xs = [_stratified(gen, n)[:, None] for _ in range(D)]
    base = {0: Matern(float(gen.choice([0.5, 1.5, 2.5])), gen.uniform(0.5, 2), gen.uniform(0.05, 0.3)),
            1: Matern(float(gen.uniform(0.6, 3.0)), gen.uniform(0.5, 2), gen.uniform(0.05, 0.3)),
            2: SquaredExponential(gen.uniform(0.5, 2), gen.uniform(0.05, 0.2)),
            3: SquaredExponential(gen.uniform(0.5, 2), gen.uniform(0.05, 0.2)),
            4: None}[family]
    shape = (i // 5) % 4
    if family == 4:
        # the squared-distance form has rank 4, so only a noise term keeps its Gram invertible
        base = SphereSobolev32(2 if shape >= 2 else 1)
    if shape == 0:
        K = Separable(_spd(gen, D), base)
    elif shape == 1:
        K = LMC(gen.normal(size=(int(gen.integers(1, 3)), D)), base, gen.uniform(0.1, 0.5, D))
    elif shape == 2:
        K = Sum((Separable(_spd(gen, D), base), Separable(np.eye(D), WhiteNoise(gen.uniform(0.05, 0.3)))))
    elif family == 4:
        K = Sum((Separable(_spd(gen, D), base), Separable(np.eye(D), WhiteNoise(0.1))))
    else:
        R = int(gen.integers(1, 3))
        K = ProcessConvolution(gen.uniform(0.8, 1.2, (R, D)), gen.uniform(0.02, 0.08, (R, D)),
                               gen.uniform(0.8, 1.2, R), gen.uniform(0.02, 0.08, R),
                               tuple(Matern(1.5, gen.uniform(0.1, 0.3), gen.uniform(0.05, 0.2)) for _ in range(D)))
    design = Design(xs)
    G = linalg.assemble_gram(K, design)
    L = np.linalg.cholesky(G + 1e-6 * np.trace(G) / len(G) * np.eye(len(G)))
    return K, Dataset(design, L @ gen.normal(size=len(G)))


@criterion(9, "likelihood gradient matches finite differences")
@pytest.mark.parametrize("case", range(50))
def test_likelihood_gradient(case):
    K, data = _gradient_case(case)
    hv = pack_hypers(K)
    g, analytic = hyper.grad_log_marginal(hv.schema, hv.theta, data)
    assert analytic
    h = 1e-4
    for i in range(len(g)):
        e = np.zeros(len(g))
        e[i] = h
        f = [hyper.log_marginal(hv.schema, hv.theta + c * e, data) for c in (-2, -1, 1, 2)]
        fd = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
        if abs(g[i]) < 1e-8 and abs(fd) < 1e-6:
            continue
        assert abs(g[i] - fd) < 1e-5 * max(abs(fd), 1e-3), (hv.schema.names[i], g[i], fd)


# --------------------------------------------------------------------------
# 10: Kronecker fast path
# --------------------------------------------------------------------------


def _kronecker_cases():
    gen = Rng(10).generator()
    x = _stratified(gen, 40)[:, None]
    sphere = sample_measure(UniformSphere(), 60, Rng(10, (1,)))
    yield UNIT, Separable(np.array([[1.0, 0.9], [0.9, 1.0]]), Matern(2.5, 1.5, 0.3)), x[:12]
    for D in (1, 2, 3, 5):
        yield UNIT, Separable(_spd(gen, D), Matern(1.5, 1.0, 0.1)), x
        yield UNIT, Separable(_spd(gen, D), SquaredExponential(1.0, 0.03)), x
        yield UniformSphere(), Separable(_spd(gen, D), SphereSobolev32(1)), sphere


@criterion(10, "Kronecker solve equals the dense solve")
def test_kronecker_matches_dense():
    for measure, K, x in _kronecker_cases():
        design = Design.shared_design(x, K.n_outputs)
        fast = posterior.fit(K, measure, design, kronecker="always")
        dense = posterior.fit(K, measure, design, kronecker="never")
        assert isinstance(fast.factor, linalg.KroneckerFactor)
        W = dense.weight_matrix
        assert np.abs(fast.weight_matrix - W).max() <= 1e-8 * np.abs(W).max()
        assert fast.factor.logdet() == pytest.approx(dense.factor.logdet(), rel=1e-8)
    # speed is reported, not gated
    gen = Rng(11).generator()
    K = Separable(_spd(gen, 5), Matern(1.5, 1.0, 0.02))
    design = Design.shared_design(gen.uniform(0, 1, (200, 1)), 5)
    rhs = gen.normal(size=1000)
    t = {}
    for mode in ("always", "never"):
        t0 = time.perf_counter()
        for _ in range(3):
            linalg.factorize_kernel(K, design, kronecker=mode).solve(rhs)
        t[mode] = time.perf_counter() - t0
    print(f"Kronecker speedup at N=200, D=5: {t['never'] / t['always']:.1f}x")
