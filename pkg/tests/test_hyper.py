import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mobq import hyper, linalg
from mobq.core import Dataset, Design, Rng
from mobq.errors import InvalidArgumentError, OptimizationFailedError
from mobq.kernels import LMC, Matern, ProcessConvolution, Separable, SquaredExponential, Sum, WhiteNoise, pack_hypers

LOG2PI = math.log(2 * math.pi)


def _stratified(gen, n, dim):
    # one point per stratum, kept away from the stratum edges so pairs never nearly coincide
    return (np.arange(n)[:, None] + 0.25 + 0.5 * gen.random((n, dim))) / n


def _data(gen, D, n=5, dim=1, shared=False):
    xs = [_stratified(gen, n, dim)] * D if shared else [_stratified(gen, n, dim) for _ in range(D)]
    design = Design(xs)
    return Dataset(design, gen.normal(size=design.total))


def test_zero_data():
    K = Separable(np.array([[1.0, 0.3], [0.3, 2.0]]), Matern(1.5, 1.0, 0.3))
    gen = Rng(0).generator()
    data = Dataset(_data(gen, 2).design, np.zeros(10))
    hv = pack_hypers(K)
    _, logdet = np.linalg.slogdet(linalg.assemble_gram(K, data.design))
    assert hyper.log_marginal(hv.schema, hv.theta, data) == pytest.approx(-0.5 * logdet - 5 * LOG2PI, rel=1e-12)


def test_single_point_is_a_gaussian_density():
    v, y = 2.3, 0.7
    K = Separable(np.eye(1), SquaredExponential(math.sqrt(v), 0.4))
    data = Dataset(Design([[[0.2]]]), [y])
    hv = pack_hypers(K)
    expect = -y * y / (2 * v) - 0.5 * math.log(v) - 0.5 * LOG2PI
    assert hyper.log_marginal(hv.schema, hv.theta, data) == pytest.approx(expect, rel=1e-14)


@given(st.integers(0, 10**6), st.integers(1, 3))
def test_matches_naive_dense_formula(seed, D):
    gen = Rng(seed).generator()
    K = LMC(gen.normal(size=(2, D)), Matern(2.5, 1.0, 0.1), gen.uniform(0.1, 1, D))
    data = _data(gen, D)
    G = linalg.assemble_gram(K, data.design)
    f = data.values
    naive = -0.5 * f @ np.linalg.inv(G) @ f - 0.5 * math.log(np.linalg.det(G)) - 0.5 * len(f) * LOG2PI
    hv = pack_hypers(K)
    assert hyper.log_marginal(hv.schema, hv.theta, data) == pytest.approx(naive, rel=1e-8, abs=1e-8)


def _random_kernel(gen, D, kind):
    base = [Matern(float(gen.choice([0.5, 1.5, 2.5])), gen.uniform(0.5, 2), gen.uniform(0.05, 0.3)),
            Matern(float(gen.uniform(0.6, 3.0)), gen.uniform(0.5, 2), gen.uniform(0.05, 0.3)),
            SquaredExponential(gen.uniform(0.5, 2), gen.uniform(0.05, 0.2))][int(gen.integers(3))]
    if kind == "separable":
        A = gen.normal(size=(D, D))
        return Separable(A @ A.T + 0.5 * np.eye(D), base)
    if kind == "lmc":
        return LMC(gen.normal(size=(int(gen.integers(1, 3)), D)), base, gen.uniform(0.1, 0.5, D))
    if kind == "sum":
        return Sum((Separable(np.eye(D), base), Separable(np.eye(D), Matern(0.5, 0.5, 0.1))))
    R = int(gen.integers(1, 3))
    # a small independent part per output keeps nearly collinear outputs well conditioned
    return ProcessConvolution(gen.uniform(0.8, 1.2, (R, D)), gen.uniform(0.02, 0.08, (R, D)),
                              gen.uniform(0.8, 1.2, R), gen.uniform(0.02, 0.08, R),
                              tuple(Matern(1.5, gen.uniform(0.1, 0.3), gen.uniform(0.05, 0.2)) for _ in range(D)))


def _prior_draw(gen, K, design):
    G = linalg.assemble_gram(K, design)
    L = np.linalg.cholesky(G + 1e-6 * np.trace(G) / len(G) * np.eye(len(G)))
    return Dataset(design, L @ gen.normal(size=len(G)))


def _fd(schema, theta, data, i, h=1e-4):
    e = np.zeros(len(theta))
    e[i] = h
    f = [hyper.log_marginal(schema, theta + c * e, data) for c in (-2, -1, 1, 2)]
    return (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.integers(1, 3), st.sampled_from(["separable", "lmc", "pc", "sum"]))
def test_gradient_matches_finite_differences(seed, D, kind):
    gen = Rng(seed).generator()
    K = _random_kernel(gen, D, kind)
    data = _prior_draw(gen, K, _data(gen, D, n=int(gen.integers(3, 7))).design)
    hv = pack_hypers(K)
    g, analytic = hyper.grad_log_marginal(hv.schema, hv.theta, data)
    assert analytic
    for i in range(len(g)):
        fd = _fd(hv.schema, hv.theta, data, i)
        if abs(g[i]) < 1e-8 and abs(fd) < 1e-6:
            continue
        assert abs(g[i] - fd) <= 1e-5 * max(abs(fd), 1e-3), (i, hv.schema.names[i], g[i], fd)


class _NoGrads(Separable):
    def gram_grads(self, design):
        raise NotImplementedError

    def with_theta(self, theta):
        k = super().with_theta(theta)
        return _NoGrads(k.B, k.base)


def test_finite_difference_fallback_is_flagged():
    gen = Rng(3).generator()
    data = _data(gen, 2, shared=True)
    K = _NoGrads(np.array([[1.0, 0.2], [0.2, 1.5]]), Matern(1.5, 1.0, 0.2))
    hv = pack_hypers(K)
    g, analytic = hyper.grad_log_marginal(hv.schema, hv.theta, data)
    ref, ok = hyper.grad_log_marginal(pack_hypers(Separable(K.B, K.base)).schema, hv.theta, data)
    assert not analytic and ok
    assert np.allclose(g, ref, rtol=1e-5, atol=1e-6)


def test_amplitude_gradient_vanishes_at_profile_maximum():
    gen = Rng(4).generator()
    x = gen.uniform(0, 1, (12, 1))
    f = np.sin(6 * x[:, 0])
    base = Matern(2.5, 1.0, 0.3)
    amp = math.sqrt(f @ np.linalg.solve(base(x, x), f) / len(f))
    hv = pack_hypers(Separable(np.eye(1), Matern(2.5, amp, 0.3)))
    g, _ = hyper.grad_log_marginal(hv.schema, hv.theta, Dataset(Design([x]), f))
    i = hv.schema.names.index("base.amplitude")
    assert abs(g[i]) < 1e-8


NOISE = 1e-2


def _se_draw(n=40, ell=0.2, seed=0):
    gen = Rng(seed).generator()
    x = np.sort(gen.uniform(0, 1, (n, 1)), axis=0)
    G = SquaredExponential(1.0, ell)(x, x) + NOISE**2 * np.eye(n)
    return Dataset(Design([x]), np.linalg.cholesky(G) @ gen.normal(size=n))


def _se_model(amp, ell, noise=NOISE):
    K = Sum((Separable(np.eye(1), SquaredExponential(amp, ell)), Separable(np.eye(1), WhiteNoise(noise))))
    return pack_hypers(K, fixed=("parts[0].B.", "parts[1].B."))


def _lengthscale(res):
    return res.kernel.parts[0].base.lengthscale


def test_recovers_se_lengthscale():
    data = _se_draw()
    truth = _se_model(1.0, 0.2)
    res = hyper.optimize(truth, data, config=hyper.OptimizerConfig(restarts=5, seed=1))
    assert 0.1 <= _lengthscale(res) <= 0.4
    assert res.lml >= hyper.log_marginal(truth.schema, truth.theta, data) - 1e-6
    assert linalg.factorize(linalg.assemble_gram(res.kernel, data.design)).jitter == 0.0
    g, _ = hyper.grad_log_marginal(res.hyper.schema, res.hyper.theta, data)
    assert np.linalg.norm(g[res.hyper.schema.free_mask]) < 1e-3


def test_more_restarts_never_lose():
    data = _se_draw(seed=2)
    start = _se_model(3.0, 0.02, 0.3)
    one = hyper.optimize(start, data, config=hyper.OptimizerConfig(restarts=1, seed=5))
    five = hyper.optimize(start, data, config=hyper.OptimizerConfig(restarts=5, seed=5))
    assert five.lml >= one.lml
    assert np.array_equal(five.restarts[0].theta, one.restarts[0].theta)


def test_same_seed_is_bit_identical():
    data = _se_draw(seed=3)
    K = LMC([[1.0]], SquaredExponential(1.0, 0.5), [0.1])
    cfg = hyper.OptimizerConfig(restarts=3, seed=9, max_iters=50)
    a = hyper.optimize(K, data, config=cfg)
    b = hyper.optimize(K, data, config=cfg)
    c = hyper.optimize(K, data, config=hyper.OptimizerConfig(restarts=3, seed=9, max_iters=50, threads=3))
    assert np.array_equal(a.hyper.theta, b.hyper.theta)
    assert np.array_equal(a.hyper.theta, c.hyper.theta)


def test_traces_never_decrease():
    gen = Rng(6).generator()
    data = _data(gen, 2, n=8)
    K = LMC(gen.normal(size=(2, 2)), Matern(2.5, 1.0, 0.3), [0.1, 0.1])
    res = hyper.optimize(K, data, config=hyper.OptimizerConfig(restarts=4, max_iters=60))
    for tr in res.trace:
        assert all(b >= a for a, b in zip(tr, tr[1:]))


@pytest.mark.parametrize("scale", [0.01, 30.0])
def test_scaling_data_keeps_the_lengthscale(scale):
    data = _se_draw(seed=7)
    K = _se_model(1.0, 0.3)
    cfg = hyper.OptimizerConfig(restarts=1, max_iters=1000, grad_tol=1e-9)
    a = hyper.optimize(K, data, config=cfg)
    s = _se_model(scale, 0.3, scale * NOISE)
    scaled = hyper.optimize(s, Dataset(data.design, scale * data.values), config=cfg)
    assert _lengthscale(scaled) == pytest.approx(_lengthscale(a), rel=1e-3)
    amp = lambda r: r.kernel.parts[0].base.amplitude  # noqa: E731
    assert amp(scaled) ** 2 == pytest.approx(scale**2 * amp(a) ** 2, rel=1e-3)
    assert scaled.lml == pytest.approx(a.lml - len(data.values) * math.log(scale), abs=1e-6)


def test_all_restarts_rejected():
    x = np.array([[0.3], [0.3]])
    data = Dataset(Design([x]), [1.0, -1.0])
    K = Separable(np.eye(1), SquaredExponential(1.0, 0.2))
    with pytest.raises(OptimizationFailedError):
        hyper.optimize(K, data, config=hyper.OptimizerConfig(restarts=2, max_iters=5), jitter_ladder=(0.0,))
    hv = pack_hypers(K)
    assert hyper.log_marginal(hv.schema, hv.theta, data, jitter_ladder=(0.0,)) == -math.inf


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        hyper.OptimizerConfig(restarts=0)
    with pytest.raises(InvalidArgumentError):
        hyper.OptimizerConfig.from_dict({"bogus": 1})
