"""State-dependent communication graph.

Agents within range ``d_c`` of each other form an edge.  Two smooth weights
live on top of that edge set:

* the truncation weight ``exp(-1/(d_c - d))`` that fades pairwise constraint
  rows out as a link is about to break, and
* the adjacency weight of the connectivity Laplacian, which is one for
  coincident agents and vanishes at ``d_c - eps_c``.

``lambda2_with_grad`` returns the algebraic connectivity together with its
gradient with respect to every agent position.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import SymEig, sym_eig

DEGENERATE_GAP = 1e-8


class DegenerateSpectrumWarning(RuntimeWarning):
    """lambda_2 is (nearly) repeated, so its gradient is not well defined."""


@dataclass(frozen=True)
class CommParams:
    """Communication range, margin, adjacency normaliser and safety distance.

    Leaving ``sigma`` as ``None`` picks ``(d_c - eps_c)**4 / ln 2``, the
    largest value that keeps every adjacency weight at most one.
    """

    d_c: float
    eps_c: float
    d0: float
    sigma: float | None = None

    def __post_init__(self):
        if not (0.0 < self.eps_c < self.d_c):
            raise ValueError(f"need 0 < eps_c < d_c, got eps_c={self.eps_c}, d_c={self.d_c}")
        if not (0.0 < self.d0 < self.d_c):
            raise ValueError(f"need 0 < d0 < d_c, got d0={self.d0}, d_c={self.d_c}")
        if self.sigma is not None and not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def r_adj(self) -> float:
        """Radius beyond which the adjacency weight is zero."""
        return self.d_c - self.eps_c

    @property
    def sigma_value(self) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        return self.r_adj ** 4 / math.log(2.0)


@dataclass(frozen=True)
class EdgeSet:
    n_agents: int
    pairs: tuple[tuple[int, int], ...]
    neighbors: tuple[tuple[int, ...], ...]

    def has(self, i: int, j: int) -> bool:
        return j in self.neighbors[i]

    def directed(self) -> list[tuple[int, int]]:
        """All (sender, receiver) pairs ordered by sender then receiver."""
        return [(i, j) for i in range(self.n_agents) for j in self.neighbors[i]]

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n_agents, self.n_agents), dtype=bool)
        for i, j in self.pairs:
            m[i, j] = m[j, i] = True
        return m


@dataclass(frozen=True)
class ConnectivityInfo:
    laplacian: np.ndarray
    lambda2: float
    v2: np.ndarray
    grad: np.ndarray  # (N, dim): d lambda2 / d p_i
    eigengap: float
    eigenvectors: np.ndarray = field(repr=False, default=None)

    @property
    def degenerate(self) -> bool:
        return self.eigengap < DEGENERATE_GAP


def _positions(positions) -> np.ndarray:
    p = np.asarray(positions, dtype=float)
    if p.ndim != 2:
        raise ValueError(f"positions must be (N, dim), got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("positions contain non-finite values")
    return p


def pairwise_distances(positions) -> np.ndarray:
    p = _positions(positions)
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def truncation_weight(p_i, p_j, params: CommParams) -> float:
    """Smooth pair weight that is exactly zero once the agents are ``d_c`` apart."""
    d = float(np.linalg.norm(np.asarray(p_i, dtype=float) - np.asarray(p_j, dtype=float)))
    gap = params.d_c - d
    if gap <= 0.0:
        return 0.0
    return math.exp(-1.0 / gap)


def truncation_matrix(positions, params: CommParams) -> np.ndarray:
    """Truncation weights for all pairs; the diagonal is zero."""
    dist = pairwise_distances(positions)
    gap = params.d_c - dist
    out = np.zeros_like(dist)
    pos = gap > 0.0
    out[pos] = np.exp(-1.0 / gap[pos])
    np.fill_diagonal(out, 0.0)
    return out


def h_i_smoothing(v: float) -> float:
    """``exp(-1/v)`` for positive ``v`` and zero at ``v = 0``."""
    v = float(v)
    if v < 0.0 or not math.isfinite(v):
        raise ValueError(f"expected a finite non-negative value, got {v}")
    if v == 0.0:
        return 0.0
    return math.exp(-1.0 / v)


def adjacency_weight(p_i, p_j, params: CommParams) -> tuple[float, np.ndarray]:
    """Connectivity adjacency weight and its gradient with respect to ``p_i``."""
    pi = np.asarray(p_i, dtype=float)
    d = pi - np.asarray(p_j, dtype=float)
    d2 = float(d @ d)
    r2 = params.r_adj ** 2
    if d2 > r2:
        return 0.0, np.zeros_like(pi)
    sigma = params.sigma_value
    s = r2 - d2
    e = math.exp(s * s / sigma)
    # d/dp_i of s^2/sigma is 2 s (-2 d) / sigma
    return e - 1.0, e * (-4.0 * s / sigma) * d


def adjacency_matrix(positions, params: CommParams) -> tuple[np.ndarray, np.ndarray]:
    """All adjacency weights ``a[i, j]`` and gradients ``da[i, j] = d a_ij / d p_i``."""
    p = _positions(positions)
    diff = p[:, None, :] - p[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    r2 = params.r_adj ** 2
    s = np.where(d2 <= r2, r2 - d2, 0.0)
    inside = d2 <= r2
    np.fill_diagonal(inside, False)
    sigma = params.sigma_value
    e = np.exp(s * s / sigma)
    a = np.where(inside, e - 1.0, 0.0)
    coef = np.where(inside, e * (-4.0 * s / sigma), 0.0)
    return a, coef[:, :, None] * diff


def neighbors(positions, params_or_dc) -> EdgeSet:
    """Pairs strictly closer than ``d_c``."""
    d_c = params_or_dc.d_c if isinstance(params_or_dc, CommParams) else float(params_or_dc)
    dist = pairwise_distances(positions)
    n = dist.shape[0]
    close = dist < d_c
    pairs = tuple((i, j) for i in range(n) for j in range(i + 1, n) if close[i, j])
    nbrs = tuple(tuple(j for j in range(n) if j != i and close[i, j]) for i in range(n))
    return EdgeSet(n, pairs, nbrs)


def laplacian_from_weights(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    lap = -a.copy()
    np.fill_diagonal(lap, 0.0)
    np.fill_diagonal(lap, -lap.sum(axis=1))
    return lap


def weighted_laplacian(positions, params: CommParams) -> np.ndarray:
    a, _ = adjacency_matrix(positions, params)
    return laplacian_from_weights(a)


def _second_eigenpair(lap: np.ndarray, guess: np.ndarray | None = None) -> tuple[SymEig, float]:
    eig = sym_eig(lap, guess=guess)
    lam = eig.eigenvalues
    n = lam.size
    if n < 2:
        return eig, math.inf
    gaps = [lam[1] - lam[0]]
    if n > 2:
        gaps.append(lam[2] - lam[1])
    return eig, float(min(gaps))


def lambda2_with_grad(positions, params: CommParams, guess: np.ndarray | None = None,
                      warn: bool = True) -> ConnectivityInfo:
    """Algebraic connectivity of the weighted graph and its position gradient.

    The gradient uses ``sum_j da_ij/dp_i * (v_i - v_j)**2`` with ``v`` the unit
    Fiedler vector.  It is only meaningful when lambda_2 is simple; when the
    eigengap drops below ``1e-8`` a :class:`DegenerateSpectrumWarning` is issued
    and ``degenerate`` is set on the result.  ``guess`` may hold the
    eigenvectors from a nearby configuration to speed up the eigensolver.
    """
    p = _positions(positions)
    a, da = adjacency_matrix(p, params)
    lap = laplacian_from_weights(a)
    eig, gap = _second_eigenpair(lap, guess)
    if p.shape[0] < 2:
        return ConnectivityInfo(lap, 0.0, np.zeros(p.shape[0]), np.zeros_like(p), gap, eig.eigenvectors)
    v2 = eig.eigenvectors[:, 1].copy()
    if eig.eigenvalues[1] - eig.eigenvalues[0] < DEGENERATE_GAP:
        # zero is a repeated eigenvalue: take the combination orthogonal to the ones vector
        q = eig.eigenvectors[:, :2]
        c = q.sum(axis=0)
        if np.linalg.norm(c) > 1e-12:
            v2 = q @ np.array([c[1], -c[0]])
            v2 /= np.linalg.norm(v2)
            nz = np.flatnonzero(np.abs(v2) > 1e-12)
            if v2[nz[0]] < 0.0:
                v2 = -v2
    sq = (v2[:, None] - v2[None, :]) ** 2
    grad = np.einsum("ij,ijk->ik", sq, da)
    info = ConnectivityInfo(lap, float(eig.eigenvalues[1]), v2, grad, gap, eig.eigenvectors)
    if warn and info.degenerate:
        warnings.warn(f"lambda_2 eigengap {gap:.2e} is below {DEGENERATE_GAP:g}; gradient unreliable",
                      DegenerateSpectrumWarning, stacklevel=2)
    return info


def binary_lambda2(positions, d_c: float) -> float:
    """lambda_2 of the unit-weight graph with an edge for every pair closer than ``d_c``."""
    dist = pairwise_distances(positions)
    close = dist < d_c
    np.fill_diagonal(close, False)
    if close.shape[0] < 2:
        return 0.0
    return _binary_lambda2_cached(close.shape[0], np.packbits(close).tobytes())


@functools.lru_cache(maxsize=4096)
def _binary_lambda2_cached(n: int, packed: bytes) -> float:
    # the value only depends on the edge pattern, which changes rarely along a run
    close = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), count=n * n).reshape(n, n)
    return float(sym_eig(laplacian_from_weights(close.astype(float))).eigenvalues[1])
