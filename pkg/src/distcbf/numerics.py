"""Small dense linear algebra used throughout the package.

Everything here works on plain ``numpy`` arrays.  Matrices are tiny (a few
dozen rows at most), so the emphasis is on predictable, deterministic results
rather than speed: the symmetric eigensolver is a cyclic Jacobi iteration and
eigenvectors get a fixed sign so repeated runs agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

SYMMETRY_TOL = 1e-12
COND_LIMIT = 1e12


class NumericsError(ValueError):
    """Base class for input-validation failures in this module."""


class DimensionError(NumericsError):
    pass


class SymmetryError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


class SingularMatrixError(NumericsError):
    pass


def as_vec(x, name: str = "vector") -> np.ndarray:
    """Return ``x`` as a finite 1-D float array or raise."""
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return v


def as_mat(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=float)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True)
class SymEig:
    """Eigen-decomposition of a symmetric matrix.

    ``eigenvalues`` ascend; ``eigenvectors[:, k]`` pairs with ``eigenvalues[k]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0

    def gap(self, k: int) -> float:
        """Distance from eigenvalue ``k`` to its nearest neighbour in the spectrum."""
        lam = self.eigenvalues
        gaps = []
        if k > 0:
            gaps.append(lam[k] - lam[k - 1])
        if k + 1 < lam.size:
            gaps.append(lam[k + 1] - lam[k])
        return float(min(gaps)) if gaps else math.inf


def check_symmetric(m: np.ndarray, tol: float = SYMMETRY_TOL) -> None:
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))))
    if float(np.max(np.abs(m - m.T))) > tol * scale:
        raise SymmetryError("matrix is not symmetric to within tolerance")


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    # first entry above the noise floor is made positive
    out = vecs.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0.0:
            out[:, k] = -col
    return out


def sym_eig(m, max_sweeps: int = 100, guess: np.ndarray | None = None) -> SymEig:
    """Full spectrum of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once and annihilates it with a
    plane rotation (Rutishauser's stable formulas).  Iteration stops once the
    off-diagonal mass is at round-off level relative to ``||M||_F``.

    ``guess`` is an optional orthogonal matrix of approximate eigenvectors,
    e.g. from the previous time step.  The iteration then starts from
    ``guess.T @ M @ guess``, which is already nearly diagonal.
    """
    a = as_mat(m)
    check_symmetric(a)
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if guess is not None:
        g = as_mat(guess, "guess")
        if g.shape != (n, n) or np.max(np.abs(g.T @ g - v)) > 1e-10:
            raise DimensionError("guess must be an orthogonal matrix of matching size")
        v = g.copy()
        a = g.T @ a @ g
        a = 0.5 * (a + a.T)
    scale = float(np.linalg.norm(a))
    sweeps = 0
    if n > 1 and scale > 0.0:
        target = (1e-15 * scale) ** 2 / 2.0
        for sweeps in range(1, max_sweeps + 1):
            off = float(np.sum(np.triu(a, 1) ** 2))
            if off <= target:
                sweeps -= 1
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    diff = a[q, q] - a[p, p]
                    g = 100.0 * abs(apq)
                    if abs(a[p, p]) + g == abs(a[p, p]) and abs(a[q, q]) + g == abs(a[q, q]):
                        # below round-off of both diagonal entries
                        a[p, q] = a[q, p] = 0.0
                        continue
                    if abs(diff) + g == abs(diff):
                        t = apq / diff
                    else:
                        theta = diff / (2.0 * apq)
                        t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    c = 1.0 / math.sqrt(t * t + 1.0)
                    s = t * c
                    colp = a[:, p].copy()
                    colq = a[:, q]
                    a[:, p] = c * colp - s * colq
                    a[:, q] = s * colp + c * colq
                    rowp = a[p, :].copy()
                    rowq = a[q, :]
                    a[p, :] = c * rowp - s * rowq
                    a[q, :] = s * rowp + c * rowq
                    a[p, q] = a[q, p] = 0.0
                    vp = v[:, p].copy()
                    vq = v[:, q]
                    v[:, p] = c * vp - s * vq
                    v[:, q] = s * vp + c * vq
        else:
            raise NumericsError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    lam = np.diag(a).copy()
    order = np.argsort(lam, kind="stable")
    return SymEig(lam[order], _canonical_signs(v[:, order]), sweeps)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar field (second-order accurate)."""
    x0 = np.asarray(x, dtype=float).copy()
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x0))
        flat[k] = orig - h
        fm = float(f(x0))
        flat[k] = orig
        g[k] = (fp - fm) / (2.0 * h)
    return grad


def solve_linear(a, b) -> np.ndarray:
    """Solve ``A x = b`` for square, well-conditioned ``A``.

    Raises :class:`SingularMatrixError` when the 1-norm condition estimate
    exceeds ``1e12`` or LAPACK reports an exactly singular factor.
    """
    am = as_mat(a)
    if am.shape[0] != am.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {am.shape}")
    bv = np.asarray(b, dtype=float)
    if bv.shape[0] != am.shape[0]:
        raise DimensionError(f"right-hand side has length {bv.shape[0]}, expected {am.shape[0]}")
    if not np.all(np.isfinite(bv)):
        raise NonFiniteError("right-hand side has non-finite entries")
    try:
        inv = np.linalg.inv(am)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("matrix is singular") from exc
    cond = np.linalg.norm(am, 1) * np.linalg.norm(inv, 1)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMatrixError(f"matrix is ill-conditioned (cond_1 ~ {cond:.3e})")
    return np.linalg.solve(am, bv)
