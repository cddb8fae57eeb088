"""Deep-image-prior training: vanilla, reference-guided and self-guided.

All three minimize a data-fidelity term ``||A f(input) - y||^2`` with Adam.
Self-guided DIP additionally optimizes the input ``z`` and averages the
network over random input perturbations,

    ||A E[f(z + eta)] - y||^2 + alpha ||E[f(z + eta)] - z||^2,

with ``eta ~ U(0, m)`` per entry and ``m = noise_scale_frac * max|z|``. The
expectation is estimated inside both norms with ``eta_draws`` samples.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .generators import AdamState, GeneratorNet, adam_step
from .metrics import BandMasks, band_nmse, psnr
from .operators import LinearMap, data_correction

log = logging.getLogger(__name__)

VARIANTS = ("vanilla", "reference-guided", "self-guided")

# stream ids carved out of DipConfig.seed
_INPUT_STREAM = 1
_ETA_STREAM = 2
_FINAL_STREAM = 3
_EVAL_STREAM = 4


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; ``report`` holds the rows logged so far."""

    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


@dataclass
class DipConfig:
    variant: str = "vanilla"
    iters: int = 1000
    theta_lr: float = 3e-4
    input_lr: float = 1e-1
    alpha: float = 1.0
    eta_draws: int = 4
    noise_scale_frac: float = 0.5
    seed: int = 0
    eval_every: int = 1
    final_draws: int = 64
    eval_draws: int = 16
    track_input: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.iters <= 0:
            raise ValueError("iters must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.eta_draws < 1:
            raise ValueError("eta_draws must be >= 1")
        if self.eval_draws < 1 or self.final_draws < 1:
            raise ValueError("eval_draws and final_draws must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def stream(self, stream_id: int) -> nx.RngStream:
        return nx.RngStream(self.seed, stream_id)


ROW_FIELDS = ("iter", "loss", "data_fidelity", "regularizer", "psnr", "nmse_low", "nmse_mid", "nmse_high")


@dataclass
class RunReport:
    config: DipConfig
    rows: list = field(default_factory=list)
    final_recon: np.ndarray | None = None
    corrected_recon: np.ndarray | None = None
    best_recon: np.ndarray | None = None
    best_psnr: float | None = None
    best_iter: int | None = None
    final_psnr: float | None = None
    corrected_psnr: float | None = None
    input_trace: list = field(default_factory=list)
    final_input: np.ndarray | None = None
    final_weights: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROW_FIELDS)
            for r in self.rows:
                w.writerow(["" if r[k] is None else (r[k] if k == "iter" else repr(float(r[k])))
                            for k in ROW_FIELDS])

    def summary(self) -> dict:
        return {
            "schema": 1,
            "variant": self.config.variant,
            "iters": self.config.iters,
            "best_psnr": self.best_psnr,
            "best_iter": self.best_iter,
            "final_psnr": self.final_psnr,
            "corrected_psnr": self.corrected_psnr,
            "final_loss": self.rows[-1]["loss"] if self.rows else None,
            "warnings": list(self.warnings),
            "config": asdict(self.config),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def input_drift_variance(report: RunReport, start: int, stop: int) -> float:
    """Summed per-entry temporal variance of the tracked input over ``[start, stop]``."""
    snaps = np.array([z for it, z in report.input_trace if start <= it <= stop])
    if len(snaps) < 2:
        raise ValueError("need at least two tracked inputs in the window")
    return float(np.sum(np.var(snaps, axis=0)))


class _Logger:
    def __init__(self, report, map_, truth, bands):
        self.report = report
        self.map = map_
        self.truth = None if truth is None else nx.as_complex(truth)
        self.bands = bands
        self.truth_k = None if (truth is None or bands is None) else map_.full_kspace(self.truth)

    def log(self, it, fid, reg, alpha, recon):
        if callable(recon):
            recon = recon()
        loss = fid + alpha * reg
        row = {"iter": it, "loss": loss, "data_fidelity": fid, "regularizer": reg,
               "psnr": None, "nmse_low": None, "nmse_mid": None, "nmse_high": None}
        if self.truth is not None:
            row["psnr"] = psnr(recon, self.truth)
            rep = self.report
            if rep.best_psnr is None or row["psnr"] > rep.best_psnr:
                rep.best_psnr, rep.best_iter, rep.best_recon = row["psnr"], it, recon.copy()
        if self.truth_k is not None:
            row["nmse_low"], row["nmse_mid"], row["nmse_high"] = band_nmse(recon, self.truth_k, self.map, self.bands)
        self.report.rows.append(row)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}", self.report)


def _check_variant(cfg: DipConfig, variant: str) -> None:
    if cfg.variant != variant:
        raise ValueError(f"config variant is {cfg.variant!r}, expected {variant!r}")


def _fit_fixed_input(net: GeneratorNet, map_: LinearMap, y, net_input, cfg: DipConfig,
                     truth=None, bands: BandMasks | None = None) -> RunReport:
    y = nx.as_complex(y)
    x_in = np.asarray(net_input, dtype=np.float64).ravel()
    params = net.weights.copy()
    opt = AdamState(lr=cfg.theta_lr)
    report = RunReport(cfg)
    logger = _Logger(report, map_, truth, bands)
    for it in range(cfg.iters + 1):
        out = net.forward(x_in, params)
        recon = net.output_complex(out)
        resid = map_.apply(recon) - y
        fid = float(np.vdot(resid, resid).real)
        if it % cfg.eval_every == 0 or it == cfg.iters:
            logger.log(it, fid, 0.0, 0.0, recon)
        elif not np.isfinite(fid):
            logger.log(it, fid, 0.0, 0.0, recon)
        if it == cfg.iters:
            break
        grad = net.backward(x_in, 2.0 * map_.adjoint(resid), params)
        params = adam_step(opt, params, grad)
    report.final_recon = recon
    report.final_weights = params
    report.final_input = x_in
    report.final_psnr = report.rows[-1]["psnr"]
    return report


def train_vanilla(net: GeneratorNet, map_: LinearMap, y, cfg: DipConfig, truth=None,
                  bands: BandMasks | None = None, net_input=None) -> RunReport:
    """Fit ``||A f_theta(z) - y||^2`` over theta with a fixed random input.

    The input is drawn once as N(0, 1) from the config's input stream unless
    ``net_input`` is given.
    """
    _check_variant(cfg, "vanilla")
    if net_input is None:
        net_input = cfg.stream(_INPUT_STREAM).normal(size=net.in_size)
    return _fit_fixed_input(net, map_, y, net_input, cfg, truth, bands)


def train_reference_guided(net: GeneratorNet, map_: LinearMap, y, reference, cfg: DipConfig,
                           truth=None, bands: BandMasks | None = None) -> RunReport:
    """Vanilla DIP with the input fixed to a reference image (stacked re/im)."""
    _check_variant(cfg, "reference-guided")
    ref = nx.stack_real(reference) if np.iscomplexobj(reference) or isinstance(reference, nx.ComplexSignal) \
        else np.asarray(reference, dtype=np.float64).ravel()
    if ref.size != net.in_size:
        raise ValueError(f"reference has {ref.size} real entries, network expects {net.in_size}")
    return _fit_fixed_input(net, map_, y, ref, cfg, truth, bands)


def perturbation_scale(z_stacked: np.ndarray, frac: float) -> float:
    """``frac * max|z|`` with ``|z|`` the complex magnitude of a stacked vector."""
    return frac * float(np.abs(nx.unstack_real(z_stacked)).max())


def self_guided_average(net: GeneratorNet, z: np.ndarray, etas: np.ndarray, params=None) -> np.ndarray:
    """Monte-Carlo estimate of ``E[f(z + eta)]`` over the rows of ``etas``."""
    outs = [net.forward(z + e, params) for e in etas]
    return nx.pairwise_sum(np.array(outs)) / len(outs)


def train_self_guided(net: GeneratorNet, map_: LinearMap, y, cfg: DipConfig, truth=None,
                      bands: BandMasks | None = None, z0=None) -> RunReport:
    """Joint Adam optimization of weights and input.

    ``z`` starts at the adjoint (zero-filled) reconstruction ``A^H y`` unless
    ``z0`` is given. The network must take a stacked ``[re; im]`` image of
    length ``2q`` and produce a two-channel output. Per iteration, the
    ``eta_draws`` perturbations are drawn before any parameter update.

    Logged losses are the training estimates. Logged PSNR and band NMSE use a
    separate ``eval_draws`` average from its own stream, so that the
    best-iterate PSNR is not a maximum over 4-draw estimator noise.
    """
    _check_variant(cfg, "self-guided")
    y = nx.as_complex(y)
    if net.in_size != 2 * map_.q or net.out_size != 2 * map_.q:
        raise ValueError("self-guided DIP needs an image-to-image network with 2q inputs and outputs")
    report = RunReport(cfg)
    if cfg.alpha == 0:
        msg = "alpha = 0: the input update is unregularized and known to be unstable"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        report.warnings.append(msg)
    z = nx.stack_real(map_.adjoint(y) if z0 is None else z0).copy()
    params = net.weights.copy()
    opt_theta = AdamState(lr=cfg.theta_lr)
    opt_z = AdamState(lr=cfg.input_lr)
    eta_rng = cfg.stream(_ETA_STREAM)
    eval_rng = cfg.stream(_EVAL_STREAM)
    logger = _Logger(report, map_, truth, bands)
    d = cfg.eta_draws
    for it in range(cfg.iters):
        m = perturbation_scale(z, cfg.noise_scale_frac)
        etas = eta_rng.uniform(0.0, m, size=(d, z.size)) if m > 0 else np.zeros((d, z.size))
        mean_out = self_guided_average(net, z, etas, params)
        recon = net.output_complex(mean_out)
        resid = map_.apply(recon) - y
        fid = float(np.vdot(resid, resid).real)
        gap = mean_out - z
        reg = float(gap @ gap)
        if cfg.track_input:
            report.input_trace.append((it, z.copy()))
        if it % cfg.eval_every == 0 or not np.isfinite(fid + reg):
            def eval_recon(z=z, params=params, m=m):
                e = eval_rng.uniform(0.0, m, size=(cfg.eval_draws, z.size)) if m > 0 else np.zeros((1, z.size))
                return net.output_complex(self_guided_average(net, z, e, params))
            logger.log(it, fid, reg, cfg.alpha, eval_recon if truth is not None else recon)
        cot = nx.stack_real(2.0 * map_.adjoint(resid)) + 2.0 * cfg.alpha * gap
        g_theta = np.zeros_like(params)
        g_z = -2.0 * cfg.alpha * gap
        for e in etas:
            gr = net.backward(z + e, cot / d, params, input_grad=True)
            g_theta += gr.weights
            g_z += gr.input
        params = adam_step(opt_theta, params, g_theta)
        z = adam_step(opt_z, z, g_z)

    etas = cfg.stream(_FINAL_STREAM).uniform(0.0, perturbation_scale(z, cfg.noise_scale_frac),
                                             size=(cfg.final_draws, z.size))
    final = self_guided_average(net, z, etas, params)
    recon = net.output_complex(final)
    resid = map_.apply(recon) - y
    gap = final - z
    if cfg.track_input:
        report.input_trace.append((cfg.iters, z.copy()))
    logger.log(cfg.iters, float(np.vdot(resid, resid).real), float(gap @ gap), cfg.alpha, recon)
    report.final_recon = recon
    report.final_input = z
    report.final_weights = params
    report.final_psnr = report.rows[-1]["psnr"]
    return report


def finalize_with_correction(map_: LinearMap, y, report: RunReport, truth=None) -> RunReport:
    """Attach the measurement-consistent version of ``final_recon``."""
    if report.final_recon is None:
        raise ValueError("report has no final reconstruction")
    report.corrected_recon = data_correction(map_, y, report.final_recon)
    if truth is not None:
        report.corrected_psnr = psnr(report.corrected_recon, truth)
    return report
