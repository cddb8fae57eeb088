"""Kernel-regime DIP dynamics and their closed-form predictions.

With the tangent kernel ``W`` frozen, gradient descent on ``||A z - y||^2``
reduces to the linear recursion

    z_{t+1} = z_t + eta W (A^T y - A^T A z_t),   z_0 = 0.

Everything here works on real matrices; complex operators enter through their
stacked real embedding (:func:`ntkdip.operators.materialize_real`). Large
powers of the (non-symmetric) iteration matrix ``I - eta W A^T A`` are formed
through its similarity to the symmetric ``B = W^{1/2} A^T A W^{1/2}``:

    I - (I - eta W A^T A)^t = W^{1/2} V diag(s_t) V^T W^{1/2} A^T A,
    s_t(lam) = eta * sum_{k<t} (1 - eta lam)^k,

with ``B = V diag(lam) V^T``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import numerics as nx
from .operators import LinearMap, materialize_real, real_fourier_embedding


class DivergenceError(ValueError):
    """Step size violates ``eta < 2 / ||B||``."""


class RankError(ValueError):
    """Forward operator is not full row rank."""


@dataclass(frozen=True, eq=False)
class DynamicsProblem:
    """Real linear inverse problem with a fixed kernel.

    ``sigma`` is the standard deviation of each real measurement component.
    For a complex operator with circular noise of variance ``s^2`` pass
    ``sigma = s / sqrt(2)``.
    """

    a: np.ndarray
    w: np.ndarray
    x: np.ndarray
    sigma: float = 0.0
    eta: float | None = None

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        w = np.asarray(self.w, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64).ravel()
        if w.shape != (a.shape[1], a.shape[1]) or x.size != a.shape[1]:
            raise ValueError(f"inconsistent dims: A {a.shape}, W {w.shape}, x {x.size}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "w", 0.5 * (w + w.T))
        object.__setattr__(self, "x", x)
        if self.eta is None:
            object.__setattr__(self, "eta", 1.0 / self.b_norm)
        if not 0 < self.eta < 2.0 / self.b_norm:
            raise DivergenceError(f"eta={self.eta:.4g} must lie in (0, 2/||B||) = (0, {2 / self.b_norm:.4g})")

    @property
    def p(self) -> int:
        return self.a.shape[0]

    @property
    def q(self) -> int:
        return self.a.shape[1]

    @cached_property
    def _roots(self):
        return nx.psd_sqrt(self.w)

    @property
    def w_half(self) -> np.ndarray:
        return self._roots[0]

    @property
    def w_half_pinv(self) -> np.ndarray:
        return self._roots[1]

    @cached_property
    def ata(self) -> np.ndarray:
        return self.a.T @ self.a

    @cached_property
    def b(self) -> np.ndarray:
        s = self.w_half
        b = s @ self.ata @ s
        return 0.5 * (b + b.T)

    @cached_property
    def b_norm(self) -> float:
        return nx.spectral_norm(self.b)

    @cached_property
    def b_eig(self):
        lam, v = np.linalg.eigh(self.b)
        return np.clip(lam, 0.0, None), v

    @cached_property
    def iteration_matrix(self) -> np.ndarray:
        """``I - eta W A^T A``."""
        return np.eye(self.q) - self.eta * self.w @ self.ata

    @cached_property
    def a_pinv(self) -> np.ndarray:
        return nx.pinv(self.a)

    @property
    def full_row_rank(self) -> bool:
        return nx.numerical_rank(self.a) == self.p

    @property
    def w_rank(self) -> int:
        return nx.numerical_rank(self.w)

    def measure(self, noise=None) -> np.ndarray:
        y = self.a @ self.x
        return y if noise is None else y + np.asarray(noise, dtype=np.float64)

    def condition_number(self) -> float:
        lam = np.linalg.eigvalsh(self.w)
        nz = lam[lam > nx.rank_cutoff(np.abs(lam), self.w.shape)]
        return float(nz.max() / nz.min()) if nz.size else np.inf


def problem_from_map(map_: LinearMap, w, x, sigma: float = 0.0, eta: float | None = None) -> DynamicsProblem:
    """Build a problem on the real embedding of a complex operator.

    ``x`` is complex (length q); ``w`` acts on the stacked ``2q`` vector and
    ``sigma`` is the circular complex noise level.
    """
    return DynamicsProblem(materialize_real(map_), w, nx.stack_real(x), sigma / np.sqrt(2.0), eta)


# ---------------------------------------------------------------------------
# Iteration and closed form
# ---------------------------------------------------------------------------


def iterate_kernel_regime(p: DynamicsProblem, noise, t: int) -> np.ndarray:
    """``z_t`` by running the recursion ``t`` times from ``z_0 = 0``."""
    y = p.measure(noise)
    drive = p.eta * p.w @ (p.a.T @ y)
    m = p.iteration_matrix
    z = np.zeros(p.q)
    for _ in range(int(t)):
        z = m @ z + drive
    return z


def iterate_until(p: DynamicsProblem, noise=None, max_iter: int = 100_000, tol: float = 1e-12):
    """Run the recursion until ``||z_{t+1} - z_t|| <= tol`` or ``max_iter``.

    Returns ``(z, iterations)``.
    """
    y = p.measure(noise)
    drive = p.eta * p.w @ (p.a.T @ y)
    m = p.iteration_matrix
    z = np.zeros(p.q)
    for it in range(1, max_iter + 1):
        z_new = m @ z + drive
        if it % 64 == 0 and np.linalg.norm(z_new - z) <= tol:
            return z_new, it
        z = z_new
    return z, max_iter


def _partial_geometric(lam: np.ndarray, eta: float, t: int) -> np.ndarray:
    """``eta * sum_{k<t} (1 - eta lam)^k``, stable for tiny ``eta lam``."""
    e = eta * lam
    out = np.full_like(lam, float(t) * eta)
    small = (e > 1e-300) & (e < 0.5)
    big = e >= 0.5
    # 1 - (1-e)^t = -expm1(t log1p(-e)) avoids cancellation for small e
    out[small] = -np.expm1(t * np.log1p(-e[small])) / lam[small]
    out[big] = (1.0 - (1.0 - e[big]) ** t) / lam[big]
    return out


def transfer_matrix(p: DynamicsProblem, t: int, method: str = "auto") -> np.ndarray:
    """``R_t = I - (I - eta W A^T A)^t``.

    ``method="power"`` uses repeated squaring of the iteration matrix;
    ``"eigen"`` uses the symmetric similarity to ``B`` and is stable for
    large ``t``. ``"auto"`` picks power for ``t <= 256``.
    """
    t = int(t)
    if t < 0:
        raise ValueError("t must be non-negative")
    if method == "auto":
        method = "power" if t <= 256 else "eigen"
    if method == "power":
        return np.eye(p.q) - np.linalg.matrix_power(p.iteration_matrix, t)
    if method == "eigen":
        lam, v = p.b_eig
        s = _partial_geometric(lam, p.eta, t)
        return p.w_half @ (v * s) @ v.T @ p.w_half @ p.ata
    raise ValueError(f"unknown method {method!r}")


def closed_form_zt(p: DynamicsProblem, noise, t: int, method: str = "auto") -> np.ndarray:
    """``z_t = (I - (I - eta W A^T A)^t)(x + A^+ n)``; needs full-row-rank ``A``."""
    if not p.full_row_rank:
        raise RankError("closed form requires a full-row-rank forward operator")
    target = p.x + (0 if noise is None else p.a_pinv @ np.asarray(noise, dtype=np.float64))
    return transfer_matrix(p, t, method) @ target


def closed_form_batch(p: DynamicsProblem, noise: np.ndarray, t: int) -> np.ndarray:
    """Closed form for a stack of noise draws, shape ``(trials, p)`` -> ``(trials, q)``."""
    if not p.full_row_rank:
        raise RankError("closed form requires a full-row-rank forward operator")
    r = transfer_matrix(p, t)
    targets = p.x[None, :] + np.asarray(noise) @ p.a_pinv.T
    return targets @ r.T


# ---------------------------------------------------------------------------
# Theorem-level predictions
# ---------------------------------------------------------------------------


@dataclass
class TheoremPrediction:
    case: str
    limit_error: np.ndarray | None = None
    ts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    mse_curve: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bias_curve: np.ndarray = field(default_factory=lambda: np.zeros(0))
    var_curve: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # singular cases only
    null_range_formula: np.ndarray | None = None
    precondition_ok: bool = True
    intersection_residual: float = 0.0
    strong_condition_residual: float = 0.0


def predict_limit(p: DynamicsProblem, tol: float = 1e-8) -> TheoremPrediction:
    """Limit of ``z_t - x`` as ``t -> inf`` for noise-free measurements.

    * non-singular ``W``: ``-W^{1/2} P_{N(B)} W^{-1/2} x`` (lies in ``N(A)``);
    * singular ``W``: the exact limit
      ``-W^{1/2} P_{N(B) ∩ R(W)} W^{-1/2} x - P_{N(W)} x
      + W^{1/2} (A W^{1/2})^+ A P_{N(W)} x``.

    ``null_range_formula`` holds the shorter expression without the first
    term. It equals the limit whenever ``P_{N(B) ∩ R(W)} W^{-1/2} x = 0``;
    that is implied by ``N(A) ∩ R(W) = {0}`` but not by
    ``P_{N(A) ∩ R(W)} x = 0`` alone. ``precondition_ok`` records the latter
    condition, ``strong_condition_residual`` the former.
    """
    s, s_pinv = p.w_half, p.w_half_pinv
    x = p.x
    xnorm = max(np.linalg.norm(x), np.finfo(float).tiny)
    null_b = nx.null_basis(p.b)
    if p.w_rank == p.q:
        err = -s @ (null_b @ (null_b.T @ (s_pinv @ x)))
        return TheoremPrediction("nonsingular", limit_error=err)

    range_w = nx.range_basis(p.w)
    null_a = nx.null_basis(p.a)
    p_na_rw = nx.intersection_projector(null_a, range_w)
    p_nb_rw = nx.intersection_projector(null_b, range_w)
    x_perp = x - range_w @ (range_w.T @ x)
    short = -x_perp + s @ nx.pinv(p.a @ s) @ (p.a @ x_perp)
    err = -s @ (p_nb_rw @ (s_pinv @ x)) + short
    inter = float(np.linalg.norm(p_na_rw @ x) / xnorm)
    strong = float(np.linalg.norm(p_nb_rw @ (s_pinv @ x)) / xnorm)
    ok = inter <= tol
    exact = ok and np.linalg.norm(x_perp) <= tol * xnorm
    return TheoremPrediction(
        "singular-exact" if exact else "singular-general",
        limit_error=err, null_range_formula=short, precondition_ok=ok,
        intersection_residual=inter, strong_condition_residual=strong,
    )


def theorem2_mse(p: DynamicsProblem, t_max: int | None = None, ts=None) -> TheoremPrediction:
    """Bias, variance and MSE of ``z_t`` under Gaussian measurement noise.

    bias_t = ||(I - eta W A^T A)^t x||^2,  var_t = sigma^2 ||Q_t||_F^2,
    Q_t = (I - (I - eta W A^T A)^t) A^+.
    """
    if not p.full_row_rank:
        raise RankError("MSE prediction requires a full-row-rank forward operator")
    if ts is None:
        if t_max is None:
            raise ValueError("give t_max or ts")
        ts = np.arange(int(t_max) + 1)
    ts = np.asarray(ts, dtype=int)
    bias = np.empty(ts.size)
    var = np.empty(ts.size)
    for i, t in enumerate(ts):
        r = transfer_matrix(p, int(t), "eigen")
        bias[i] = np.sum((p.x - r @ p.x) ** 2)
        q_t = r @ p.a_pinv
        var[i] = p.sigma ** 2 * np.sum(q_t * q_t)
    case = "nonsingular" if p.w_rank == p.q else "singular-general"
    return TheoremPrediction(case, ts=ts, mse_curve=bias + var, bias_curve=bias, var_curve=var)


def corollary1_mse(lambdas, mask, fx, sigma: float, eta: float, t: int) -> float:
    """Per-frequency MSE for a Fourier-diagonal kernel with single-coil sampling.

    ``sum_i (1 - eta lam_i m_i)^{2t} |(F x)_i|^2 + sigma^2 (1 - (1 - eta lam_i m_i)^t)^2``
    """
    return float(np.sum(corollary1_terms(lambdas, mask, fx, sigma, eta, t)))


def corollary1_terms(lambdas, mask, fx, sigma: float, eta: float, t: int) -> np.ndarray:
    """Per-frequency bias and variance terms, shape ``(2, q)``."""
    lam = np.asarray(lambdas, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    fx = nx.as_complex(fx)
    if not lam.size == m.size == fx.size:
        raise ValueError("lambdas, mask and fx must have equal length")
    decay = (1.0 - eta * lam * m) ** int(t)
    return np.stack([decay ** 2 * np.abs(fx) ** 2, sigma ** 2 * (1.0 - decay) ** 2])


def fourier_diagonal_kernel(lambdas) -> np.ndarray:
    """Real ``2q x 2q`` kernel ``F~^T diag(L, L) F~`` (a circulant in complex form)."""
    lam = np.asarray(lambdas, dtype=np.float64)
    f = real_fourier_embedding(lam.size)
    return f.T @ (np.concatenate([lam, lam])[:, None] * f)


# ---------------------------------------------------------------------------
# Appendix identities
# ---------------------------------------------------------------------------


def projection_limit(pa: np.ndarray, pb: np.ndarray, n: int = 200) -> np.ndarray:
    """``(P_a P_b P_a)^n``; tends to the projector onto the intersection."""
    return np.linalg.matrix_power(pa @ pb @ pa, n)


def appendix_residuals(p: DynamicsProblem, t: int, n_limit: int = 200) -> dict:
    """Relative residuals of the identities behind the singular-kernel limit.

    ``geometric``: eta sum_{k<t} (I - eta B)^k g = B^+ (I - (I - eta B)^t) g with
    ``g = W^{1/2} A^T A P_{N(W)} x`` (direct summation vs pseudo-inverse form).
    ``split``: W^{1/2} (I - eta B)^t W^{-1/2} = W^{1/2} P_B (I - eta B)^t P_B W^{-1/2}
    + W^{1/2} (P_B⊥ P_W P_B⊥)^t W^{-1/2}.
    ``limit``: (P_B⊥ P_W P_B⊥)^n against the projector onto N(B) ∩ R(W).
    """
    t = int(t)
    q = p.q
    eye = np.eye(q)
    s, s_pinv = p.w_half, p.w_half_pinv
    b = p.b
    step = eye - p.eta * b
    p_w = nx.projector_onto_range(p.w)
    p_b = nx.projector_onto_range(b)
    p_bperp = eye - p_b
    x_perp = p.x - p_w @ p.x
    g = s @ p.ata @ x_perp

    acc = np.zeros(q)
    term = g.copy()
    for _ in range(t):
        acc += term
        term = step @ term
    lhs = p.eta * acc
    step_t = np.linalg.matrix_power(step, t)
    rhs = nx.pinv(b) @ (eye - step_t) @ g
    scale = p.eta * t * np.linalg.norm(g)
    geometric = float(np.linalg.norm(lhs - rhs) / scale) if scale > 0 else float(np.linalg.norm(lhs - rhs))

    lhs2 = s @ step_t @ s_pinv
    rhs2 = s @ p_b @ step_t @ p_b @ s_pinv + s @ np.linalg.matrix_power(p_bperp @ p_w @ p_bperp, t) @ s_pinv
    scale2 = max(nx.spectral_norm(s) * nx.spectral_norm(s_pinv), 1.0)
    split = float(np.abs(lhs2 - rhs2).max() / scale2)

    inter = nx.intersection_projector(nx.null_basis(b), nx.range_basis(p.w))
    limit = float(np.abs(projection_limit(p_bperp, p_w, n_limit) - inter).max())
    return {"geometric": geometric, "split": split, "limit": limit}


def verify_appendix_identities(p: DynamicsProblem, t: int) -> float:
    """Largest residual from :func:`appendix_residuals`."""
    return max(appendix_residuals(p, t).values())


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

CURVE_COLUMNS = ("t", "bias", "variance", "mse", "empirical_mse", "stderr")


def write_curves_csv(path, pred: TheoremPrediction, empirical=None, stderr=None) -> None:
    """Write ``t, bias, variance, mse, empirical_mse, stderr`` rows.

    Empirical columns are left blank where not supplied.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for i, t in enumerate(pred.ts):
            emp = "" if empirical is None else repr(float(empirical[i]))
            se = "" if stderr is None else repr(float(stderr[i]))
            w.writerow([int(t), repr(float(pred.bias_curve[i])), repr(float(pred.var_curve[i])),
                        repr(float(pred.mse_curve[i])), emp, se])
