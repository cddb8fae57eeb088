"""Random problem instances for the kernel-regime checks.

Kernels use Haar-random eigenvectors with eigenvalues drawn from a bounded
interval, so conditioning is controlled and long-run iterations converge in
a predictable number of steps.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .dynamics import DynamicsProblem, problem_from_map
from .operators import masked_fourier


def haar_orthogonal(n: int, rng: nx.RngStream) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def random_psd(n: int, rng: nx.RngStream, rank: int | None = None, eig_range=(0.5, 1.5)) -> np.ndarray:
    """``U diag(lam) U^T`` with Haar ``U`` and ``rank`` eigenvalues in ``eig_range``."""
    rank = n if rank is None else rank
    u = haar_orthogonal(n, rng)[:, :rank]
    lam = rng.uniform(*eig_range, size=rank)
    w = (u * lam) @ u.T
    return 0.5 * (w + w.T)


def gram_psd(n: int, rng: nx.RngStream, rank: int | None = None) -> np.ndarray:
    """``G G^T`` with Gaussian ``G`` of ``rank`` columns (wider spectrum than :func:`random_psd`)."""
    g = rng.normal(size=(n, n if rank is None else rank)) / np.sqrt(n)
    return g @ g.T


def orthonormal_rows(p: int, q: int, rng: nx.RngStream) -> np.ndarray:
    return haar_orthogonal(q, rng)[:p]


def with_half_step(a: np.ndarray, w: np.ndarray, x: np.ndarray, sigma: float = 0.0) -> DynamicsProblem:
    """Problem with ``eta = 1 / (2 ||B||)``."""
    probe = DynamicsProblem(a, w, x, sigma)
    return DynamicsProblem(a, w, x, sigma, eta=0.5 / probe.b_norm)


def random_fourier_problem(q: int, rng: nx.RngStream, sigma: float = 0.0, rank: int | None = None,
                           eta: float | None = None) -> DynamicsProblem:
    """Single-coil masked-Fourier problem (half the frequencies) on the real embedding."""
    mask = np.zeros(q, dtype=bool)
    mask[rng.choice(q, q // 2, replace=False)] = True
    w = gram_psd(2 * q, rng, rank)
    x = rng.normal(size=q) + 1j * rng.normal(size=q)
    return problem_from_map(masked_fourier(mask), w, x, sigma, eta)


def exact_recovery_instance(q: int, rng: nx.RngStream, p: int | None = None) -> DynamicsProblem:
    """``rank(W) = q/4``, ``x`` in ``R(W)`` and generic ``A`` so ``N(A) ∩ R(W) = {0}``."""
    p = q // 2 if p is None else p
    r = q // 4
    u = haar_orthogonal(q, rng)[:, :r]
    w = (u * rng.uniform(0.5, 1.5, size=r)) @ u.T
    x = u @ rng.normal(size=r)
    return DynamicsProblem(orthonormal_rows(p, q, rng), 0.5 * (w + w.T), x, eta=None)


def singular_general_instance(q: int, p: int, rank: int, rng: nx.RngStream) -> DynamicsProblem:
    """Singular ``W`` with ``x`` orthogonal to ``N(A) ∩ R(W)`` and a component in ``N(W)``."""
    a = orthonormal_rows(p, q, rng)
    w = random_psd(q, rng, rank)
    x = rng.normal(size=q)
    inter = nx.intersection_projector(nx.null_basis(a), nx.range_basis(w))
    return DynamicsProblem(a, w, x - inter @ x)
