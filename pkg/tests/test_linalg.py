import numpy as np
import pytest
from hypothesis import given, strategies as st

from mobq import linalg
from mobq.core import Design, Rng, equidistant_grid
from mobq.errors import InvalidArgumentError, NotPositiveDefiniteError
from mobq.kernels import LMC, Matern, ProcessConvolution, Separable, SquaredExponential, matrix_eval


def _spd(gen, D):
    A = gen.normal(size=(D, D))
    return A @ A.T + D * np.eye(D)


def test_separable_gram_is_kronecker():
    gen = Rng(0).generator()
    B, c = _spd(gen, 3), Matern(1.5, 1.2, 0.3)
    x = gen.uniform(0, 1, (7, 1))
    G = linalg.assemble_gram(Separable(B, c), Design.shared_design(x, 3))
    assert np.allclose(G, np.kron(B, c(x, x)), rtol=0, atol=1e-14)


def test_single_output_gram_is_scalar_gram():
    c = SquaredExponential(0.8, 0.4)
    x = np.linspace(0, 1, 6)[:, None]
    assert np.array_equal(linalg.assemble_gram(Separable(np.eye(1), c), Design([x])), c(x, x))


def test_disjoint_singletons():
    K = ProcessConvolution([[1.0, 0.6]], [[0.1, 0.3]], [1.0], [0.4])
    G = linalg.assemble_gram(K, Design([[[0.2]], [[0.7]]]))
    assert G.shape == (2, 2)
    assert G[0, 1] == pytest.approx(matrix_eval(K, [0.2], [0.7])[0, 1], rel=1e-15)


def test_identity_needs_no_jitter():
    f = linalg.factorize(np.eye(4))
    assert f.jitter == 0.0
    assert np.array_equal(f.chol, np.eye(4))


def test_duplicate_points_escalate_the_ladder():
    x = np.array([[0.1], [0.4], [0.4], [0.9]])
    f = linalg.factorize(SquaredExponential(1.0, 0.3)(x, x))
    assert f.jitter > 0


def test_negative_definite_raises():
    with pytest.raises(NotPositiveDefiniteError) as info:
        linalg.factorize(-np.eye(3))
    assert info.value.min_eigenvalue == pytest.approx(-1.0)


def test_asymmetric_rejected():
    with pytest.raises(InvalidArgumentError):
        linalg.factorize(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_solve_gram_column_gives_unit_vector():
    x = np.linspace(0, 1, 8)[:, None]
    G = Matern(2.5, 1.0, 0.2)(x, x)
    f = linalg.factorize(G)
    for j in range(8):
        e = np.zeros(8)
        e[j] = 1
        assert np.allclose(f.solve(G[:, j]), e, atol=1e-8)
    assert np.array_equal(f.solve(np.zeros(8)), np.zeros(8))


@given(st.integers(0, 10**6), st.integers(2, 30))
def test_solve_recovers_vector(seed, n):
    gen = Rng(seed).generator()
    Q, _ = np.linalg.qr(gen.normal(size=(n, n)))
    A = Q @ np.diag(np.logspace(0, 5, n)) @ Q.T
    v = gen.normal(size=n)
    got = linalg.factorize(0.5 * (A + A.T)).solve(A @ v)
    assert np.linalg.norm(got - v) <= 1e-7 * np.linalg.norm(v)


@given(st.integers(0, 10**6), st.integers(1, 5), st.integers(2, 25), st.sampled_from(["separable", "lmc"]))
def test_kronecker_matches_dense(seed, D, N, kind):
    gen = Rng(seed).generator()
    base = Matern(float(gen.choice([0.5, 1.5, 2.5])), gen.uniform(0.5, 2.0), gen.uniform(0.02, 0.1))
    K = Separable(_spd(gen, D), base) if kind == "separable" else LMC(gen.normal(size=(2, D)), base,
                                                                       gen.uniform(0.1, 1.0, D))
    design = Design.shared_design(gen.uniform(0, 1, (N, 1)), D)
    rhs = gen.normal(size=(N * D, 3))
    kf = linalg.factorize_kernel(K, design, kronecker="always")
    df = linalg.factorize_kernel(K, design, kronecker="never")
    assert isinstance(kf, linalg.KroneckerFactor) and isinstance(df, linalg.DenseFactor)
    a, b = kf.solve(rhs), df.solve(rhs)
    assert np.abs(a - b).max() <= 1e-8 * max(1.0, np.abs(b).max())
    assert kf.logdet() == pytest.approx(df.logdet(), rel=1e-10, abs=1e-9)
    assert np.allclose(kf.solve(rhs[:, 0]), a[:, 0])


def test_kronecker_spec_case():
    gen = Rng(11).generator()
    K = Separable(_spd(gen, 3), Matern(2.5, 1.0, 0.05))
    design = Design.shared_design(equidistant_grid(25, 0, 1), 3)
    rhs = gen.normal(size=75)
    a = linalg.factorize_kernel(K, design, kronecker="always").solve(rhs)
    b = linalg.factorize_kernel(K, design, kronecker="never").solve(rhs)
    assert np.abs(a - b).max() < 1e-8


def test_kronecker_dispatch_rules():
    x = np.linspace(0, 1, 5)[:, None]
    K = Separable(np.eye(2), Matern(1.5))
    assert isinstance(linalg.factorize_kernel(K, Design.shared_design(x, 2)), linalg.KroneckerFactor)
    assert isinstance(linalg.factorize_kernel(K, Design([x, x[:3]])), linalg.DenseFactor)
    with pytest.raises(InvalidArgumentError):
        linalg.factorize_kernel(K, Design([x, x[:3]]), kronecker="always")
    with pytest.raises(InvalidArgumentError):
        linalg.factorize_kernel(K, Design.shared_design(x, 2), kronecker="sometimes")


def test_kronecker_inverse_and_matrix():
    gen = Rng(4).generator()
    B = _spd(gen, 2)
    x = gen.uniform(0, 1, (4, 1))
    c = SquaredExponential(1.0, 0.1)(x, x)
    kf = linalg.factorize_kronecker(B, c)
    assert np.allclose(kf.matrix(), np.kron(B, c), atol=1e-13)
    assert np.allclose(kf.inverse() @ np.kron(B, c), np.eye(8), atol=1e-9)


def test_jitter_stays_small_on_experiment_like_designs():
    from mobq.core import UniformSphere, sample_measure
    from mobq.kernels import SphereSobolev32
    from mobq.testbeds import camera_covariance, camera_ring, DEFAULT_CAMERA_BASE, DEFAULT_CAMERA_STEP

    B = camera_covariance(camera_ring(DEFAULT_CAMERA_BASE, 5, DEFAULT_CAMERA_STEP))
    design = Design([sample_measure(UniformSphere(), 128, Rng(0, (128, d))) for d in range(5)])
    f = linalg.factorize_kernel(Separable(B, SphereSobolev32(1)), design)
    G = linalg.assemble_gram(Separable(B, SphereSobolev32(1)), design)
    assert f.jitter <= 1e-6 * np.trace(G) / len(G)
