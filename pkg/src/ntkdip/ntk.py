"""Neural tangent kernels of the generators.

The empirical kernel is ``J J^T`` with ``J`` the exact Jacobian of the flat
network output with respect to all weights (one row per output coordinate,
each from a backward pass). For the two-layer decoder ``ReLU(U C) v`` with
Gaussian ``C`` the expected kernel has the closed form

    E[W]_ij = 1/2 (1 - angle(u_i, u_j) / pi) * (U U^T)_ij

(the probability that two pre-activations are both positive, times the
inner product of the rows), using ``sum_l v_l^2 = 1``.
"""

from __future__ import annotations

import csv
from functools import cached_property

import numpy as np

from . import numerics as nx
from .generators import GeneratorNet, TwoLayerDecoder, decoder_last_layer
from .operators import signed_frequencies

MAX_NTK_OUTPUT = 256


class DegenerateRowError(ValueError):
    pass


class KernelMatrix:
    """Symmetric PSD kernel with lazily cached descending eigen-decomposition."""

    def __init__(self, data, sym_tol: float = 1e-10, psd_tol: float = 1e-9):
        m = np.array(data, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise nx.SizeError("kernel must be square")
        scale = max(1.0, float(np.abs(m).max(initial=0.0)))
        if np.abs(m - m.T).max(initial=0.0) > sym_tol * scale:
            raise ValueError("kernel is not symmetric")
        self.data = 0.5 * (m + m.T)
        self._psd_tol = psd_tol * scale
        if self.eigvals.size and self.eigvals[-1] < -self._psd_tol:
            raise nx.NotPSDError(f"kernel has eigenvalue {self.eigvals[-1]:.3e}")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @cached_property
    def _eig(self):
        vals, vecs = np.linalg.eigh(self.data)
        return vals[::-1].copy(), vecs[:, ::-1].copy()

    @property
    def eigvals(self) -> np.ndarray:
        return self._eig[0]

    @property
    def eigvecs(self) -> np.ndarray:
        return self._eig[1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def to_csv(self, path) -> None:
        save_kernel_csv(path, self)


def jacobian(net: GeneratorNet, net_input, params=None) -> np.ndarray:
    """Exact ``(out_size, n_params)`` Jacobian, one backward pass per output."""
    if net.out_size > MAX_NTK_OUTPUT:
        raise nx.SizeError(f"network output {net.out_size} exceeds {MAX_NTK_OUTPUT}")
    x = np.asarray(net_input, dtype=np.float64).ravel() if not isinstance(net_input, nx.ComplexSignal) \
        else net_input.stacked()
    eye = np.eye(net.out_size)
    return np.stack([net.backward(x, e, params).weights for e in eye])


def empirical_ntk(net: GeneratorNet, net_input, params=None) -> KernelMatrix:
    j = jacobian(net, net_input, params)
    return KernelMatrix(j @ j.T)


def _row_cosines(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms == 0):
        raise DegenerateRowError("U has a zero row")
    cos = (u @ u.T) / np.outer(norms, norms)
    return np.clip(cos, -1.0, 1.0)


def angular_factor(u) -> np.ndarray:
    """``1/2 (1 - arccos(cos angle(u_i, u_j)) / pi)``; diagonal is exactly 1/2."""
    cos = _row_cosines(u)
    out = 0.5 * (1.0 - np.arccos(cos) / np.pi)
    np.fill_diagonal(out, 0.5)
    return out


def expected_decoder_ntk(u) -> KernelMatrix:
    u = np.asarray(u, dtype=np.float64)
    return KernelMatrix(angular_factor(u) * (u @ u.T))


def monte_carlo_decoder_ntk(u, k: int, trials: int, rng: nx.RngStream, columns=None) -> KernelMatrix:
    """Average of ``sum_l v_l^2 s'(U c_l) s'(U c_l)^T * U U^T`` over Gaussian ``C``.

    ``columns`` may supply the ``(trials, n, k)`` draws explicitly.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[0]
    v2 = decoder_last_layer(k) ** 2
    uut = u @ u.T
    acc = np.zeros((n, n))
    for t in range(trials):
        c = rng.normal(size=(n, k)) if columns is None else np.asarray(columns[t])
        act = (u @ c > 0).astype(np.float64)
        acc += (act * v2) @ act.T
    return KernelMatrix(acc / trials * uut)


def empirical_decoder_ntk_mean(n: int, k: int, trials: int, rng: nx.RngStream, u=None,
                               omega: float = 1.0) -> KernelMatrix:
    """Mean empirical NTK of ``TwoLayerDecoder(n, k)`` over ``trials`` weight draws."""
    net = TwoLayerDecoder(n, k, rng=rng.spawn(0), u=u)
    z = net.identity_input()
    acc = np.zeros((n, n))
    for t in range(trials):
        c = rng.normal(0.0, np.sqrt(omega), size=net.n_params)
        acc += empirical_ntk(net, z, c).data
    return KernelMatrix(acc / trials)


def fourier_coherence(kernel, n_top: int | None = None) -> float:
    """Mean Fourier concentration of the top eigenvectors of a real kernel.

    Real eigenvectors put their energy on a ``+f / -f`` pair, so the
    concentration of one eigenvector is the largest unitary-DFT energy held by
    a single pair. Averaged over the top ``n_top`` (default ``dim // 4``)
    eigenvectors; 1 means every one is a pure sinusoid.
    """
    km = kernel if isinstance(kernel, KernelMatrix) else KernelMatrix(kernel)
    q = km.dim
    n_top = max(1, q // 4) if n_top is None else n_top
    power = np.abs(np.fft.fft(km.eigvecs[:, :n_top], axis=0, norm="ortho")) ** 2
    f = np.abs(signed_frequencies(q))
    pair = np.zeros((q // 2 + 1, n_top))
    np.add.at(pair, f, power)
    return float(np.mean(pair.max(axis=0) / power.sum(axis=0)))


def save_kernel_csv(path, kernel) -> None:
    m = np.asarray(kernel, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in m:
            w.writerow([repr(float(v)) for v in row])


def load_kernel_csv(path) -> KernelMatrix:
    with open(path, newline="") as fh:
        return KernelMatrix([[float(v) for v in row] for row in csv.reader(fh) if row])
