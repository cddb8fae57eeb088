"""Reconstruction metrics: PSNR, frequency-band NMSE, bias/variance ensembles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, as_complex, pairwise_sum
from .operators import LinearMap, signed_frequencies

PSNR_CAP = 300.0


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class BandMasks:
    low: np.ndarray
    mid: np.ndarray
    high: np.ndarray

    def __iter__(self):
        return iter((self.low, self.mid, self.high))


def band_masks(q: int, low_cut: float = 0.1, mid_cut: float = 0.4) -> BandMasks:
    """Low/mid/high masks over FFT bins by ``|f| / f_Nyquist``.

    low: ``<= low_cut``, mid: ``(low_cut, mid_cut]``, high: ``(mid_cut, 1]``.
    """
    r = np.abs(signed_frequencies(q)) / (q / 2)
    low = r <= low_cut
    mid = (r > low_cut) & (r <= mid_cut)
    return BandMasks(low, mid, ~(low | mid))


def psnr(recon, truth) -> float:
    """PSNR in dB on magnitudes: ``20 log10(max|truth| / rmse(|recon| - |truth|))``.

    A perfect reconstruction returns the sentinel ``PSNR_CAP``.
    """
    r = np.abs(as_complex(recon))
    t = np.abs(as_complex(truth))
    if r.size != t.size:
        raise ValueError("psnr: length mismatch")
    peak = t.max()
    if peak == 0:
        raise UndefinedMetricError("psnr undefined for all-zero truth")
    rmse = np.sqrt(np.mean((r - t) ** 2))
    if rmse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 20 * np.log10(peak / rmse)))


def band_nmse(recon, truth_kspace, map_: LinearMap, bands: BandMasks) -> tuple:
    """Per-band normalized k-space error against fully sampled truth.

    ``truth_kspace`` is the coil k-space, shape ``(n_coils, q)`` (or a
    single length-q vector). Bands without truth energy give ``None``.
    """
    truth = np.atleast_2d(np.asarray(truth_kspace, dtype=np.complex128))
    rec = map_.full_kspace(recon)
    if rec.shape != truth.shape:
        raise ValueError(f"k-space shape mismatch {rec.shape} vs {truth.shape}")
    out = []
    for band in bands:
        den = np.sum(np.abs(truth[:, band]) ** 2)
        if den == 0:
            out.append(None)
            continue
        out.append(float(np.sum(np.abs(rec[:, band] - truth[:, band]) ** 2) / den))
    return tuple(out)


@dataclass(frozen=True)
class BiasVariance:
    bias2: float
    variance: float
    stderr: float

    @property
    def mse(self) -> float:
        return self.bias2 + self.variance


def empirical_bias_variance(problem, t: int, trials: int, rng: RngStream) -> BiasVariance:
    """Monte-Carlo bias^2 and variance of the kernel-regime iterate ``z_t``.

    Each trial draws measurement noise ``n ~ N(0, sigma^2 I)`` and evaluates
    the closed form. ``stderr`` is the standard error of the per-draw squared
    error mean, the linearization of the MSE estimator.
    """
    from .dynamics import closed_form_batch

    if trials < 2:
        raise ValueError("need at least two trials")
    x = problem.x
    if problem.sigma == 0:
        # every draw is the same deterministic iterate
        z0 = closed_form_batch(problem, np.zeros((1, problem.p)), t)[0]
        return BiasVariance(float(np.sum((z0 - x) ** 2)), 0.0, 0.0)
    noise = rng.normal(0.0, problem.sigma, size=(trials, problem.p))
    z = closed_form_batch(problem, noise, t)
    mean = pairwise_sum(z) / trials
    bias2 = float(np.sum((mean - x) ** 2))
    dev = np.sum((z - mean) ** 2, axis=1)
    variance = float(pairwise_sum(dev) / (trials - 1))
    sq_err = np.sum((z - x) ** 2, axis=1)
    stderr = float(np.std(sq_err, ddof=1) / np.sqrt(trials))
    return BiasVariance(bias2, variance, stderr)
