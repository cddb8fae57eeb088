"""Forward operators for subsampled-Fourier MRI and inpainting.

A :class:`LinearMap` maps a complex image of length ``q`` to measurements.
Single-coil Fourier sampling is a coil composite with one identity map, so
the same code path serves the single- and multi-coil cases.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ComplexSignal, RngStream, SizeError, as_complex, fft, ifft

KINDS = ("masked-fourier", "coil-composite", "inpainting-mask", "dense")
MAX_DENSE_Q = 64


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LinearMap:
    """Immutable forward operator ``A``.

    For ``masked-fourier`` and ``coil-composite`` the measurements are the
    concatenation over coils of ``M F S_c v``; ``inpainting-mask`` keeps the
    masked pixels; ``dense`` wraps an explicit complex matrix.
    """

    kind: str
    q: int
    mask: np.ndarray | None = None
    coil_maps: np.ndarray | None = None  # (n_coils, q) complex diagonals
    dense: np.ndarray | None = None
    _idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind == "dense":
            if self.dense is None or self.dense.shape[1] != self.q:
                raise DimensionError("dense map needs a (p, q) matrix")
            object.__setattr__(self, "dense", np.array(self.dense, dtype=np.complex128))
            object.__setattr__(self, "_idx", np.arange(0))
            return
        mask = np.asarray(self.mask).astype(bool).ravel()
        if mask.size != self.q:
            raise DimensionError(f"mask length {mask.size} != q={self.q}")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "_idx", np.flatnonzero(mask))
        if self.kind == "inpainting-mask":
            return
        maps = np.ones((1, self.q), dtype=np.complex128) if self.coil_maps is None else self.coil_maps
        maps = np.atleast_2d(np.asarray(maps, dtype=np.complex128))
        if maps.shape[1] != self.q:
            raise DimensionError("coil map length must equal q")
        if self.kind == "coil-composite":
            norm = np.sum(np.abs(maps) ** 2, axis=0)
            if np.abs(norm - 1.0).max() > 1e-10:
                raise ValueError("coil maps must satisfy sum_c |S_c|^2 = 1")
        object.__setattr__(self, "coil_maps", maps)

    @property
    def n_coils(self) -> int:
        return 1 if self.coil_maps is None else self.coil_maps.shape[0]

    @property
    def p(self) -> int:
        """Measurements per coil."""
        if self.kind == "dense":
            return self.dense.shape[0]
        return self._idx.size

    @property
    def out_dim(self) -> int:
        return self.p * (self.n_coils if self.kind in ("masked-fourier", "coil-composite") else 1)

    @property
    def is_fourier(self) -> bool:
        return self.kind in ("masked-fourier", "coil-composite")

    def _check(self, v, n, what):
        v = as_complex(v)
        if v.size != n:
            raise DimensionError(f"{what}: expected length {n}, got {v.size}")
        return v

    def apply(self, v) -> np.ndarray:
        v = self._check(v, self.q, "apply")
        if self.kind == "dense":
            return self.dense @ v
        if self.kind == "inpainting-mask":
            return v[self._idx]
        k = np.fft.fft(self.coil_maps * v[None, :], axis=1, norm="ortho")
        return k[:, self._idx].ravel()

    def adjoint(self, w) -> np.ndarray:
        w = self._check(w, self.out_dim, "adjoint")
        if self.kind == "dense":
            return self.dense.conj().T @ w
        out = np.zeros((self.n_coils, self.q), dtype=np.complex128)
        out[:, self._idx] = w.reshape(self.n_coils, -1) if self.is_fourier else w
        if self.kind == "inpainting-mask":
            return out[0]
        img = np.fft.ifft(out, axis=1, norm="ortho")
        return np.sum(np.conj(self.coil_maps) * img, axis=0)

    def normal(self, v) -> np.ndarray:
        """``A^H A v``."""
        return self.adjoint(self.apply(v))

    def full_kspace(self, v) -> np.ndarray:
        """Fully sampled coil k-space ``F S_c v``, shape ``(n_coils, q)``."""
        v = self._check(v, self.q, "full_kspace")
        if self.kind == "inpainting-mask":
            return v[None, :].copy()
        if self.kind == "dense":
            raise ValueError("dense maps have no k-space")
        return np.fft.fft(self.coil_maps * v[None, :], axis=1, norm="ortho")

    def to_matrix(self) -> np.ndarray:
        """Dense complex matrix (columns are images of the unit vectors)."""
        if self.q > MAX_DENSE_Q:
            raise SizeError(f"refusing to materialize q={self.q} > {MAX_DENSE_Q}")
        eye = np.eye(self.q, dtype=np.complex128)
        return np.stack([self.apply(e) for e in eye], axis=1)


def masked_fourier(mask, coil_maps=None) -> LinearMap:
    mask = np.asarray(mask)
    fft_len = mask.size
    if fft_len & (fft_len - 1):
        raise SizeError("Fourier operators need power-of-two length")
    kind = "masked-fourier" if coil_maps is None else "coil-composite"
    return LinearMap(kind, fft_len, mask=mask, coil_maps=coil_maps)


def inpainting(mask) -> LinearMap:
    mask = np.asarray(mask)
    return LinearMap("inpainting-mask", mask.size, mask=mask)


def dense_map(matrix) -> LinearMap:
    matrix = np.atleast_2d(np.asarray(matrix))
    return LinearMap("dense", matrix.shape[1], dense=matrix)


def apply(map_: LinearMap, v) -> np.ndarray:
    return map_.apply(v)


def adjoint(map_: LinearMap, w) -> np.ndarray:
    return map_.adjoint(w)


def materialize_real(map_: LinearMap) -> np.ndarray:
    """Real ``2p x 2q`` matrix acting on stacked ``[v_R; v_I]``.

    Equal to ``[[A_R, -A_I], [A_I, A_R]]`` for the complex matrix ``A``; for a
    single-coil map this is ``M~ F~`` with ``F~`` orthogonal.
    """
    a = map_.to_matrix()
    return np.block([[a.real, -a.imag], [a.imag, a.real]])


def real_fourier_embedding(q: int) -> np.ndarray:
    """``F~ = [[F_R, -F_I], [F_I, F_R]]`` for the unitary DFT of length q."""
    return materialize_real(masked_fourier(np.ones(q)))


def data_correction(map_: LinearMap, y, xhat) -> np.ndarray:
    """Replace sampled k-space of ``xhat`` by the measurements ``y``.

    ``y_new_c = M^T y_c + (I - M^T M) F S_c xhat``, then
    ``x_corrected = sum_c S_c^H F^H y_new_c``. For inpainting the Fourier
    transform is the identity.
    """
    if map_.kind == "dense":
        raise ValueError("data correction needs a sampling-mask operator")
    xhat = as_complex(xhat)
    y = as_complex(y)
    if xhat.size != map_.q:
        raise DimensionError(f"xhat length {xhat.size} != q={map_.q}")
    if y.size != map_.out_dim:
        raise DimensionError(f"y length {y.size} != {map_.out_dim}")
    if map_.kind == "inpainting-mask":
        out = xhat.copy()
        out[map_._idx] = y
        return out
    k = map_.full_kspace(xhat)
    k[:, map_._idx] = y.reshape(map_.n_coils, -1)
    img = np.fft.ifft(k, axis=1, norm="ortho")
    return np.sum(np.conj(map_.coil_maps) * img, axis=0)


# ---------------------------------------------------------------------------
# Masks and coil maps
# ---------------------------------------------------------------------------


def signed_frequencies(q: int) -> np.ndarray:
    """Integer frequency of each FFT bin (``0, 1, ..., -1``)."""
    return np.rint(np.fft.fftfreq(q) * q).astype(int)


def variable_density_mask(q: int, acceleration: int, rng: RngStream,
                          center_lines: int = 4, exponent: float = 3.0) -> np.ndarray:
    """1-D random Cartesian mask with inverse-polynomial sampling density.

    The ``center_lines`` lowest frequencies are always kept; the rest are drawn
    without replacement with probability proportional to ``(1 + |f|)^-exponent``.
    """
    if q < 2 or q & (q - 1):
        raise SizeError("mask length must be a power of two")
    p = q // acceleration
    if p < 1 or p > q:
        raise ValueError(f"acceleration {acceleration} invalid for q={q}")
    freqs = signed_frequencies(q)
    center_lines = min(center_lines, p)
    order = np.argsort(np.abs(freqs) + 0.1 * (freqs < 0), kind="stable")
    mask = np.zeros(q, dtype=bool)
    mask[order[:center_lines]] = True
    rest = np.flatnonzero(~mask)
    n_more = p - center_lines
    if n_more > 0:
        w = (1.0 + np.abs(freqs[rest])) ** (-exponent)
        picked = rng.choice(rest, size=n_more, replace=False, p=w / w.sum())
        mask[picked] = True
    return mask


def random_inpainting_mask(q: int, keep_fraction: float, rng: RngStream) -> np.ndarray:
    p = max(1, int(round(keep_fraction * q)))
    mask = np.zeros(q, dtype=bool)
    mask[rng.choice(q, size=p, replace=False)] = True
    return mask


def gaussian_coil_maps(q: int, n_coils: int, rng: RngStream, width: float = 0.35) -> np.ndarray:
    """Smooth complex Gaussian-bump sensitivities normalized to ``sum |S_c|^2 = 1``."""
    pos = np.arange(q) / q
    centers = (np.arange(n_coils) + 0.5) / n_coils
    maps = np.empty((n_coils, q), dtype=np.complex128)
    for c in range(n_coils):
        d = np.minimum(np.abs(pos - centers[c]), 1 - np.abs(pos - centers[c]))
        mag = np.exp(-0.5 * (d / width) ** 2) + 0.05
        phase = rng.uniform(-np.pi, np.pi) + rng.normal(0, 0.5) * np.sin(2 * np.pi * pos)
        maps[c] = mag * np.exp(1j * phase)
    return maps / np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))[None, :]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def save_mask(path, mask) -> None:
    Path(path).write_text("".join(f"{int(b)}\n" for b in np.asarray(mask).astype(bool)))


def load_mask(path) -> np.ndarray:
    vals = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 0 or 1, got {line!r}")
        vals.append(line == "1")
    return np.array(vals, dtype=bool)


def save_signal(path, signal) -> None:
    z = as_complex(signal)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "re", "im"])
        for i, v in enumerate(z):
            w.writerow([i, repr(float(v.real)), repr(float(v.imag))])


def load_signal(path) -> ComplexSignal:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["index"]))
    idx = [int(r["index"]) for r in rows]
    if idx != list(range(len(rows))):
        raise ValueError(f"{path}: indices must be 0..n-1")
    return ComplexSignal([float(r["re"]) for r in rows], [float(r["im"]) for r in rows])


__all__ = [
    "LinearMap", "DimensionError", "masked_fourier", "inpainting", "dense_map", "apply",
    "adjoint", "materialize_real", "real_fourier_embedding", "data_correction",
    "variable_density_mask", "random_inpainting_mask", "gaussian_coil_maps",
    "signed_frequencies", "save_mask", "load_mask", "save_signal", "load_signal",
    "fft", "ifft",
]
