"""Active row-wise estimation of a low-rank matrix from linear measurements.

Each measurement of row ``i`` is a pair ``(psi, <theta_i, psi>)``.  Rounds
alternate between a rank-r zero-loss fit on the still-unknown rows,
verification of every fitted row on fresh measurements, and shrinking the
unknown set to the rows that failed verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .errors import ContractViolation, DegenerateInputError, FitFailure, NonTerminationError
from .instances import LinearMDPSpec
from .mdp import TabularMDP, sample_paths

FIT_TOL = 1e-10
VERIFY_TOL = 1e-18


# ------------------------------------------------------------------ oracles


def sphere_sampler(scale: float = 1.0) -> Callable[[np.random.Generator, int, int], np.ndarray]:
    """Uniform directions on the sphere of radius ``scale`` (``scale <= 1``)."""
    if not 0 < scale <= 1:
        raise ContractViolation("sphere radius must lie in (0, 1]")

    def draw(g: np.random.Generator, n: int, d: int) -> np.ndarray:
        x = g.standard_normal((n, d))
        return scale * x / np.linalg.norm(x, axis=1, keepdims=True)

    return draw


def signed_basis_sampler(scale: float = 1.0):
    """``scale * (+-e_i)`` with ``i`` and the sign uniform."""

    def draw(g: np.random.Generator, n: int, d: int) -> np.ndarray:
        out = np.zeros((n, d))
        out[np.arange(n), g.integers(0, d, size=n)] = scale * g.choice([-1.0, 1.0], size=n)
        return out

    return draw


class SyntheticOracle:
    """Measurements with ``psi`` drawn i.i.d. from ``sampler``."""

    def __init__(self, theta: np.ndarray, sampler, rng: np.random.Generator):
        self.theta = np.asarray(theta, dtype=float)
        self.sampler = sampler
        self.rng = rng
        self.queries = 0

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def draw(self, rows: np.ndarray, k: int):
        rows = np.asarray(rows, dtype=int)
        psi = self.sampler(self.rng, rows.size * k, self.dim).reshape(rows.size, k, self.dim)
        self.queries += rows.size * k
        return psi, np.einsum("mkd,md->mk", psi, self.theta[rows])


class RolloutOracle:
    """Measurements from rolling a fixed policy and reading ``psi(S_h, A_h)``.

    ``row`` indexes a user; the users share dynamics so only the reward
    vector ``theta[row]`` depends on it.
    """

    def __init__(self, mdp: TabularMDP, spec: LinearMDPSpec, theta: np.ndarray, kernels: np.ndarray,
                 h: int, rng: np.random.Generator):
        self.mdp, self.spec = mdp, spec
        self.theta = np.asarray(theta, dtype=float)
        self.kernels = np.asarray(kernels, dtype=float)
        self.h = h
        self.rng = rng
        self.queries = 0

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def draw(self, rows: np.ndarray, k: int):
        rows = np.asarray(rows, dtype=int)
        n = rows.size * k
        states, actions = sample_paths(self.mdp, self.kernels, n, self.rng)
        A = self.mdp.num_actions
        psi = self.spec.psi[states[:, self.h] * A + actions[:, self.h]].reshape(rows.size, k, self.dim)
        self.queries += n
        return psi, np.einsum("mkd,md->mk", psi, self.theta[rows])


# ------------------------------------------------------------ schedule/fit


def kt_schedule(unknown_count: int, d: int, r: int, zeta: float, xi: float, delta: float, N: int,
                C: float) -> int:
    """Per-row sample budget for one round.

    ``ceil([C (r m + d r) log(d / (zeta xi)) + C log(log N / delta)] / (zeta^2 xi^2 m))``
    with ``m`` the number of unknown rows.  ``log N`` is floored at 1 so a
    single-row problem still gets a finite budget.
    """
    if unknown_count < 1 or min(d, r, N) < 1 or zeta <= 0 or xi <= 0 or not 0 < delta < 1 or C < 0:
        raise ContractViolation("kt_schedule needs positive sizes, zeta, xi and delta in (0, 1)")
    zx2 = (zeta * xi) ** 2
    total = (C * (r * unknown_count + d * r) / zx2 * math.log(d / (zeta * xi))
             + C * math.log(max(math.log(N), 1.0) / delta) / zx2)
    return int(math.ceil(total / unknown_count - 1e-12))


@dataclass
class FitResult:
    theta: np.ndarray  # (m, d) rows of the fit
    loss: float
    restarts_used: int


def _loss(theta: np.ndarray, psi: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((np.einsum("mkd,md->mk", psi, theta) - y) ** 2))


def _row_coefficients(Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row least squares ``U_i = argmin ||Z_i u - y_i||``."""
    G = np.einsum("mkr,mks->mrs", Z, Z)
    b = np.einsum("mkr,mk->mr", Z, y)
    try:
        return np.linalg.solve(G, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return (np.linalg.pinv(G, rcond=1e-14) @ b[..., None])[..., 0]


def fit_rank_r_zero_loss(psi: np.ndarray, y: np.ndarray, r: int, restarts: int = 5, max_iters: int = 400,
                         tol: float = FIT_TOL, seed: int = 0) -> FitResult:
    """Rank-r matrix whose rows reproduce the measurements ``y[i, k] = <theta_i, psi[i, k]>``.

    Variable projection: for a column basis ``V`` (d x r) each row's
    coefficients ``U_i`` are a small least-squares solve, so the residual is
    a function of ``V`` alone and Levenberg-Marquardt minimizes it.  The first
    start is spectral, later ones random orthonormal.  ``max_iters`` bounds
    the Jacobian evaluations of each start.  Raises :class:`FitFailure` if no
    start drives the mean squared measurement error to ``tol``.
    """
    from scipy.optimize import least_squares

    psi = np.asarray(psi, dtype=float)
    y = np.asarray(y, dtype=float)
    m, K, d = psi.shape
    if K == 0 or m == 0:
        raise DegenerateInputError("every row needs at least one measurement")
    if not np.any(y):
        return FitResult(np.zeros((m, d)), 0.0, 0)
    r = min(r, d)
    g = rngmod.stream(seed, "rowwise", "fit")

    def residual(flat):
        Z = psi @ flat.reshape(d, r)
        return (np.einsum("mkr,mr->mk", Z, _row_coefficients(Z, y)) - y).ravel()

    sums = np.einsum("mk,mkd->md", y, psi)
    second = np.einsum("mkd,mke->de", psi, psi) / (m * K)
    best = None
    for attempt in range(restarts):
        if attempt == 0:
            rough = np.linalg.lstsq(second, (sums / K).T, rcond=None)[0].T
            V = np.linalg.svd(rough, full_matrices=False)[2][:r].T
        else:
            V = np.linalg.qr(g.standard_normal((d, r)))[0]
        if m * K > d * r:
            sol = least_squares(residual, V.ravel(), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                                max_nfev=max_iters * (d * r + 1))
            V = sol.x.reshape(d, r)
        else:
            # fewer equations than basis entries: the trust-region solver handles the wide Jacobian
            sol = least_squares(residual, V.ravel(), method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                                max_nfev=max_iters)
            V = sol.x.reshape(d, r)
        U = _row_coefficients(psi @ V, y)
        theta = U @ V.T
        loss = _loss(theta, psi, y)
        if best is None or loss < best.loss:
            best = FitResult(theta, loss, attempt + 1)
        if loss <= tol:
            break
    if best.loss > tol:
        raise FitFailure(f"rank-{r} fit stalled at loss {best.loss:.3g} > {tol:g}", best.loss, best)
    return best


def verify_rows(candidate: np.ndarray, oracle, rows: np.ndarray, K: int, tol: float = VERIFY_TOL):
    """Check fitted rows on ``K`` fresh measurements each.

    A row is verified iff its summed squared error is at most ``tol * K``.
    Returns ``(verified_rows, rejected_rows, errors)``.
    """
    if K < 1:
        raise ContractViolation("verification needs at least one fresh sample per row")
    rows = np.asarray(rows, dtype=int)
    psi, y = oracle.draw(rows, K)
    err = np.sum((np.einsum("mkd,md->mk", psi, candidate) - y) ** 2, axis=1)
    ok = err <= tol * K
    return rows[ok], rows[~ok], err


# ---------------------------------------------------------------- estimator


@dataclass(frozen=True)
class RowwiseConfig:
    zeta: float
    xi: float
    delta: float = 0.1
    C: float = 0.25
    restarts: int = 5
    max_iters: int = 400
    fit_tol: float = FIT_TOL
    verify_tol: float = VERIFY_TOL
    seed: int = 0


@dataclass
class EstimatorState:
    t: int = 0
    unknown: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    recovered: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    total_samples: int = 0
    history: list = field(default_factory=list)  # per-round dicts


def max_rounds(N: int) -> int:
    return 2 * math.ceil(math.log2(max(N, 2))) + 2


def run_estimator(oracle, N: int, d: int, r: int, cfg: RowwiseConfig):
    """Recover all ``N`` rows; returns ``(theta_hat, state, total_samples)``."""
    if r < 1 or 2 * r > min(N, d):
        raise ContractViolation(f"rank {r} violates r <= min(N, d)/2")
    theta_hat = np.zeros((N, d))
    state = EstimatorState(unknown=np.arange(N), recovered=np.zeros(N, dtype=bool))
    cap = max_rounds(N)
    while state.unknown.size:
        if state.t >= cap:
            shrink = [h["rejected"] / max(h["unknown_rows"], 1) for h in state.history]
            raise NonTerminationError(f"row-wise estimator hit the round cap {cap}",
                                      {"shrink_factors": shrink, "unknown": state.unknown.size})
        state.t += 1
        rows = state.unknown
        K = kt_schedule(rows.size, d, r, cfg.zeta, cfg.xi, cfg.delta, N, cfg.C)
        if K < 1:
            raise DegenerateInputError("sample budget K_t is zero; nothing to fit")
        psi, y = oracle.draw(rows, K)
        try:
            fit = fit_rank_r_zero_loss(psi, y, r, cfg.restarts, cfg.max_iters, cfg.fit_tol,
                                       seed=cfg.seed * 1000 + state.t)
            stalled = False
        except FitFailure as exc:
            # a stalled fit can still be right on many rows; verification sorts them out
            fit, stalled = exc.best, True
        ok, bad, _ = verify_rows(fit.theta, oracle, rows, K, cfg.verify_tol)
        pos = {row: i for i, row in enumerate(rows)}
        for row in ok:
            theta_hat[row] = fit.theta[pos[row]]
        state.recovered[ok] = True
        state.total_samples += 2 * rows.size * K
        state.history.append({"t": state.t, "unknown_rows": int(rows.size), "K_t": K, "fit_loss": fit.loss,
                              "fit_stalled": stalled, "verified": int(ok.size), "rejected": int(bad.size),
                              "cumulative_samples": state.total_samples})
        state.unknown = np.sort(bad)
    return theta_hat, state, state.total_samples


# ------------------------------------------------------------- diagnostics


def direction_set(d: int, M: int = 512, seed: int = 0) -> np.ndarray:
    """Unit directions: all signed coordinate axes plus ``M`` scrambled Halton points.

    Halton points in the unit cube are pushed through the normal quantile
    function and normalized, giving well-spread directions on the sphere.
    """
    from scipy.stats import norm, qmc

    axes = np.vstack([np.eye(d), -np.eye(d)])
    if M <= 0:
        return axes
    pts = qmc.Halton(d, scramble=True, seed=seed).random(M)
    z = norm.ppf(np.clip(pts, 1e-12, 1 - 1e-12))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return np.vstack([axes, z])


def measure_dist_constants(sampler, d: int, trials: int = 20000, rng: np.random.Generator | None = None,
                           directions: np.ndarray | None = None) -> tuple[float, float]:
    """Empirical ``(zeta, xi)`` of a direction distribution.

    ``zeta = sqrt(d) min_x mean |<psi, x>|`` over the direction set and
    ``xi = 1 / sqrt(d lambda_max(mean psi psi^T))``.
    """
    if trials < 1000:
        raise ContractViolation("use at least 1000 trials")
    g = rng if rng is not None else rngmod.stream(0, "rowwise", "measure")
    psi = sampler(g, trials, d)
    return dist_constants(psi, np.ones(len(psi)) / len(psi), directions)


def dist_constants(psi: np.ndarray, weights: np.ndarray, directions: np.ndarray | None = None):
    """``(zeta, xi)`` for a weighted point cloud of ``psi`` vectors."""
    d = psi.shape[1]
    X = direction_set(d) if directions is None else directions
    zeta = math.sqrt(d) * float(np.min(np.abs(psi @ X.T).T @ weights))
    lam = float(np.linalg.eigvalsh((psi * weights[:, None]).T @ psi)[-1])
    xi = math.inf if lam <= 0 else 1.0 / math.sqrt(d * lam)
    return zeta, xi
