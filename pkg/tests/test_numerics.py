import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distcbf.numerics import (
    DimensionError,
    NonFiniteError,
    SingularMatrixError,
    SymmetryError,
    finite_diff_grad,
    solve_linear,
    sym_eig,
)

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)


def sym_matrices(max_n=6):
    return st.integers(1, max_n).flatmap(
        lambda n: arrays(float, (n, n), elements=finite).map(lambda a: 0.5 * (a + a.T)))


def assert_eig_contract(m, eig):
    n = m.shape[0]
    scale = max(np.linalg.norm(m), 1.0)
    V, lam = eig.eigenvectors, eig.eigenvalues
    assert np.all(np.diff(lam) >= 0.0)
    for k in range(n):
        assert np.linalg.norm(m @ V[:, k] - lam[k] * V[:, k]) <= 1e-10 * scale
    assert np.max(np.abs(V.T @ V - np.eye(n))) <= 1e-10


def test_identity_spectrum():
    eig = sym_eig(np.eye(3))
    np.testing.assert_allclose(eig.eigenvalues, [1.0, 1.0, 1.0])


def test_diagonal_gives_canonical_basis():
    eig = sym_eig(np.diag([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(eig.eigenvalues, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(eig.eigenvectors, np.eye(3))


def test_random_reconstruction(rng):
    a = rng.normal(size=(6, 6))
    m = a + a.T
    eig = sym_eig(m)
    V, lam = eig.eigenvectors, eig.eigenvalues
    assert np.max(np.abs(m - V @ np.diag(lam) @ V.T)) <= 1e-10
    assert_eig_contract(m, eig)
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(m), atol=1e-12)


def test_sign_convention_first_nonzero_positive(rng):
    a = rng.normal(size=(5, 5))
    V = sym_eig(a + a.T).eigenvectors
    for k in range(5):
        col = V[:, k]
        assert col[np.flatnonzero(np.abs(col) > 1e-12)[0]] > 0.0


def test_warm_start_guess_gives_same_spectrum(rng):
    a = rng.normal(size=(5, 5))
    m = a + a.T
    cold = sym_eig(m)
    b = 1e-3 * rng.normal(size=(5, 5))
    warm = sym_eig(m + b + b.T, guess=cold.eigenvectors)
    assert_eig_contract(m + b + b.T, warm)
    np.testing.assert_allclose(warm.eigenvalues, np.linalg.eigvalsh(m + b + b.T), atol=1e-12)


@pytest.mark.parametrize("bad, err", [
    (np.ones((2, 3)), DimensionError),
    (np.array([[1.0, 2.0], [0.0, 1.0]]), SymmetryError),
    (np.array([[1.0, np.nan], [np.nan, 1.0]]), NonFiniteError),
    (np.ones(3), DimensionError),
])
def test_sym_eig_rejects(bad, err):
    with pytest.raises(err):
        sym_eig(bad)


@settings(max_examples=60, deadline=None)
@given(sym_matrices())
def test_trace_and_residual(m):
    eig = sym_eig(m)
    assert_eig_contract(m, eig)
    tr = np.trace(m)
    assert abs(eig.eigenvalues.sum() - tr) <= 1e-10 * max(1.0, np.abs(m).sum())


@settings(max_examples=60, deadline=None)
@given(sym_matrices(max_n=3))
def test_product_equals_determinant(m):
    lam = sym_eig(m).eigenvalues
    scale = max(1.0, np.linalg.norm(m)) ** m.shape[0]
    assert abs(np.prod(lam) - np.linalg.det(m)) <= 1e-10 * scale


@settings(max_examples=40, deadline=None)
@given(sym_matrices(), st.randoms(use_true_random=False))
def test_permutation_consistent(m, r):
    n = m.shape[0]
    perm = list(range(n))
    r.shuffle(perm)
    P = np.eye(n)[perm]
    a = sym_eig(m).eigenvalues
    b = sym_eig(P @ m @ P.T).eigenvalues
    assert np.max(np.abs(a - b)) <= 1e-10 * max(1.0, np.linalg.norm(m))


def test_fd_quadratic():
    g = finite_diff_grad(lambda x: 0.5 * x @ x, np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [1.0, 2.0], atol=1e-8)


def test_fd_constant():
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 3.0, np.array([0.3, -1.0, 2.0])), 0.0)


def test_fd_quadratic_form():
    S = np.diag([2.0, 0.25])
    g = finite_diff_grad(lambda x: x @ S @ x, np.array([1.0, 1.0]))
    np.testing.assert_allclose(g, [4.0, 0.5], atol=1e-8)


def test_fd_does_not_modify_input():
    x = np.array([1.0, 2.0])
    finite_diff_grad(lambda v: float(np.sin(v).sum()), x)
    np.testing.assert_array_equal(x, [1.0, 2.0])


def test_solve_identity_and_diagonal():
    np.testing.assert_allclose(solve_linear(np.eye(2), [3.0, 4.0]), [3.0, 4.0])
    np.testing.assert_allclose(solve_linear(np.diag([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0])


def test_solve_random_residual(rng):
    A = rng.normal(size=(8, 8)) + 8.0 * np.eye(8)
    b = rng.normal(size=8)
    x = solve_linear(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * (np.linalg.norm(A) * np.linalg.norm(x) + np.linalg.norm(b))


def test_solve_singular_and_ill_conditioned():
    with pytest.raises(SingularMatrixError):
        solve_linear(np.array([[1.0, 2.0], [2.0, 4.0]]), [1.0, 1.0])
    with pytest.raises(SingularMatrixError):
        solve_linear(np.diag([1.0, 1e-14]), [1.0, 1.0])


def test_solve_dimension_errors():
    with pytest.raises(DimensionError):
        solve_linear(np.ones((2, 3)), [1.0, 1.0])
    with pytest.raises(DimensionError):
        solve_linear(np.eye(2), [1.0, 1.0, 1.0])
