"""Dense linear algebra, unitary FFT and seeded random streams.

All matrices are plain ``float64`` numpy arrays. Rank decisions (pseudo-inverse,
projectors, singular/non-singular classification) go through
:func:`rank_cutoff` so every module agrees on what "numerically zero" means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SizeError(ValueError):
    """Raised when an input has an unsupported size."""


class NotPSDError(ValueError):
    """Raised when a matrix that must be positive semidefinite is not."""


# ---------------------------------------------------------------------------
# Complex signals
# ---------------------------------------------------------------------------


class ComplexSignal:
    """Complex vector stored as one stacked real buffer ``[re; im]``.

    ``re`` and ``im`` are views into the buffer, so :meth:`stacked` (the real
    embedding used by the kernel-regime analysis) never copies.
    """

    __slots__ = ("_buf",)

    def __init__(self, re, im=None):
        re = np.asarray(re, dtype=np.float64).ravel()
        im = np.zeros_like(re) if im is None else np.asarray(im, dtype=np.float64).ravel()
        if re.shape != im.shape:
            raise ValueError(f"re/im length mismatch: {re.size} vs {im.size}")
        buf = np.concatenate([re, im])
        if not np.all(np.isfinite(buf)):
            raise ValueError("ComplexSignal entries must be finite")
        self._buf = buf

    @classmethod
    def from_complex(cls, z) -> "ComplexSignal":
        z = np.asarray(z, dtype=np.complex128).ravel()
        return cls(z.real, z.imag)

    @classmethod
    def from_stacked(cls, v) -> "ComplexSignal":
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size % 2:
            raise ValueError("stacked vector must have even length")
        n = v.size // 2
        return cls(v[:n], v[n:])

    def __len__(self) -> int:
        return self._buf.size // 2

    @property
    def re(self) -> np.ndarray:
        return self._buf[: len(self)]

    @property
    def im(self) -> np.ndarray:
        return self._buf[len(self):]

    def stacked(self) -> np.ndarray:
        return self._buf

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def __array__(self, dtype=None, copy=None):
        out = self.to_complex()
        return out if dtype is None else out.astype(dtype)

    def __eq__(self, other) -> bool:
        return isinstance(other, ComplexSignal) and np.array_equal(self._buf, other._buf)

    def __repr__(self) -> str:
        return f"ComplexSignal(len={len(self)})"


def as_complex(x) -> np.ndarray:
    """Coerce a ComplexSignal or array-like into a 1-D complex128 array."""
    if isinstance(x, ComplexSignal):
        return x.to_complex()
    return np.asarray(x, dtype=np.complex128).ravel()


def stack_real(z) -> np.ndarray:
    """Real embedding ``[Re z; Im z]`` of a complex vector."""
    if isinstance(z, ComplexSignal):
        return z.stacked()
    z = as_complex(z)
    return np.concatenate([z.real, z.imag])


def unstack_real(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    n = v.size // 2
    return v[:n] + 1j * v[n:]


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


@dataclass
class RngStream:
    """Seeded, explicitly passed random stream.

    ``(seed, stream_id)`` fully determines the draw sequence; PCG64 is
    bit-reproducible across platforms.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ss = np.random.SeedSequence([int(self.seed) & 0xFFFFFFFFFFFFFFFF, int(self.stream_id)])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, stream_id: int) -> "RngStream":
        """Independent stream sharing this seed."""
        return RngStream(self.seed, stream_id)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self._gen.permutation(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------


def _check_pow2(n: int) -> None:
    if n < 1 or n & (n - 1):
        raise SizeError(f"FFT length must be a power of two, got {n}")


def fft(signal) -> np.ndarray:
    """Unitary DFT (scale ``1/sqrt(n)``) of a power-of-two length signal."""
    z = as_complex(signal)
    _check_pow2(z.size)
    return np.fft.fft(z, norm="ortho")


def ifft(signal) -> np.ndarray:
    z = as_complex(signal)
    _check_pow2(z.size)
    return np.fft.ifft(z, norm="ortho")


def dft_matrix(n: int) -> np.ndarray:
    """Dense unitary DFT matrix, ``dft_matrix(n) @ v == fft(v)``."""
    _check_pow2(n)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


# ---------------------------------------------------------------------------
# Pseudo-inverse, rank, projectors
# ---------------------------------------------------------------------------


def rank_cutoff(s: np.ndarray, shape: tuple[int, int]) -> float:
    """Singular values at or below this are treated as zero."""
    if s.size == 0:
        return 0.0
    return max(shape) * np.finfo(np.float64).eps * float(s.max())


def numerical_rank(m) -> int:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > rank_cutoff(s, m.shape)))


def pinv(m) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD with the shared rank cutoff."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if not np.all(np.isfinite(m)):
        raise ValueError("pinv: matrix has non-finite entries")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    keep = s > rank_cutoff(s, m.shape)
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


def range_basis(m) -> np.ndarray:
    """Orthonormal basis (columns) of the column space of ``m``."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    r = int(np.sum(s > rank_cutoff(s, m.shape)))
    return u[:, :r]


def null_basis(m) -> np.ndarray:
    """Orthonormal basis (columns) of the null space of ``m``."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    _, s, vt = np.linalg.svd(m, full_matrices=True)
    r = int(np.sum(s > rank_cutoff(s, m.shape)))
    return vt[r:].T


def projector_onto_range(m) -> np.ndarray:
    b = range_basis(m)
    return b @ b.T


def projector_onto_null(m) -> np.ndarray:
    b = null_basis(m)
    return b @ b.T


def intersection_projector(basis_a: np.ndarray, basis_b: np.ndarray) -> np.ndarray:
    """Projector onto span(basis_a) ∩ span(basis_b) for orthonormal bases."""
    n = basis_a.shape[0]
    if basis_a.shape[1] == 0 or basis_b.shape[1] == 0:
        return np.zeros((n, n))
    # v = Qa c lies in span(Qb) iff (I - Pb) Qa c = 0
    resid = basis_a - basis_b @ (basis_b.T @ basis_a)
    _, s, vt = np.linalg.svd(resid, full_matrices=True)
    # tolerance relative to the unit scale of orthonormal columns
    tol = max(resid.shape) * np.finfo(np.float64).eps * 1e3
    r = int(np.sum(s > tol))
    c = vt[r:].T
    q = basis_a @ c
    return q @ q.T


def psd_sqrt(m, sym_tol: float = 1e-10, neg_tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(S, S_pinv)`` with ``S`` the PSD square root of ``m``.

    ``S_pinv`` is the pseudo-inverse of ``S`` (the ``W^{-1/2}`` used in the
    change of variables for the kernel dynamics).
    """
    m = np.asarray(m, dtype=np.float64)
    scale = max(1.0, float(np.abs(m).max())) if m.size else 1.0
    if np.abs(m - m.T).max(initial=0.0) > sym_tol * scale:
        raise NotPSDError("psd_sqrt: matrix is not symmetric")
    lam, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if lam.size and lam.min() < -neg_tol * scale:
        raise NotPSDError(f"psd_sqrt: negative eigenvalue {lam.min():.3e}")
    lam = np.clip(lam, 0.0, None)
    # round-off eigenvalues (~eps) would otherwise become ~sqrt(eps) in the root
    keep = lam > rank_cutoff(lam, m.shape)
    root = np.where(keep, np.sqrt(lam), 0.0)
    s = (vecs * root) @ vecs.T
    inv_root = np.zeros_like(root)
    inv_root[keep] = 1.0 / root[keep]
    s_pinv = (vecs * inv_root) @ vecs.T
    return s, s_pinv


def spectral_norm(m) -> float:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    return float(np.linalg.norm(m, 2)) if m.size else 0.0


def pairwise_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Order-fixed tree reduction; reproducible regardless of how values were produced."""
    a = np.asarray(values, dtype=np.float64)
    a = np.moveaxis(a, axis, 0)
    while a.shape[0] > 1:
        if a.shape[0] % 2:
            a = np.concatenate([a, np.zeros_like(a[:1])], axis=0)
        a = a[0::2] + a[1::2]
    return a[0] if a.shape[0] else np.zeros(a.shape[1:])
