"""Blind joint near-field localization and signal detection.

Specializes the matrix-factorization engine to the near-field model: the
mixing matrix is constrained to the steering manifold (columns re-projected
each iteration through a damped Gauss-Newton location refinement) and the
signal matrix gets a row-shared Gauss-Gamma sparsity prior so that spurious
location candidates are driven to zero and pruned.

Because every mixing column is a unit-modulus steering vector, the
whitened sensing operator is so close to a scaled identity that the
Onsager-corrected message variances lose their meaning; the posterior
messages are therefore computed in closed form (the matrices involved are
at most u_max x u_max), which keeps the exact per-row variances the
location refinement and the sparsity prior rely on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mf_engine
from .errors import ConfigurationError
from .mf_engine import MatrixGaussianBelief
from .nearfield import (
    ArrayGeometry,
    differential_demodulate,
    steering_jacobian,
    steering_matrix,
    steering_vector,
)
from .priors import GaussGammaState, gauss_gamma_rowshared_denoise

THETA_MARGIN = 1e-6
D_MIN_HARD = 1e-6

# Initialization: a second candidate per spectrum peak is placed along the
# same angle at the most steering-decorrelated distance; these bounds keep
# the partner useful without spawning a near-duplicate column.
PARTNER_CORR_GOOD = 0.9
PARTNER_CORR_MAX = 0.97
PEAK_CORR_TOL = 0.85

# Repair moves on the residual spectrum.
SPLIT_ENERGY_MIN = 1.4  # a row must look like a two-user mixture to be split
RELOC_ENERGY_MAX = 0.1  # a row must be nearly dead to be relocated
SPLIT_FACTORS = (0.7, 1.4)

# A pair of rows with nearly collinear steering but distinct symbol streams
# is two co-located users; the on/off prior misreads their arbitrary
# least-squares energy split, so their row precisions are pinned while the
# pair stays live.
PAIR_STEER_MIN = 0.9
PAIR_ROW_MAX = 0.5
PAIR_ENERGY_MIN = 0.3
PAIR_ENERGY_SUM = (1.2, 2.5)

# Final consolidation thresholds (looser than the in-loop merge).
FINAL_STEER_TOL = 0.6
FINAL_ROW_TOL = 0.6
FINAL_ENERGY_FLOOR = 0.05


@dataclass
class CandidateSet:
    """Location hypotheses with activity flags."""

    d: np.ndarray
    theta: np.ndarray
    active: np.ndarray

    @property
    def z_live(self) -> int:
        return int(np.count_nonzero(self.active))

    @property
    def live_indices(self) -> np.ndarray:
        return np.where(self.active)[0]

    def live_locations(self):
        idx = self.live_indices
        return list(zip(self.d[idx], self.theta[idx]))


@dataclass(frozen=True)
class JnflsdConfig:
    u_max: int = 12
    coarse_grid: tuple[int, int] = (64, 128)  # (n_d, n_theta)
    spectrum_threshold: float = 0.3
    prune_threshold: float = 1e-3
    merge_corr_tol: float = 0.7  # steering correlation for the in-loop merge
    merge_row_tol: float = 0.8  # symbol-row correlation for the in-loop merge
    max_iter: int = 100
    tol: float = 1e-6
    refine_damping: float = 0.5
    damped_iterations: int = 5
    warmup_iterations: int = 5
    epsilon_cap: float = 1.0
    revive_interval: int = 10  # 0 disables residual-driven repair
    revive_threshold: float = 4.0
    protect_iterations: int = 8
    d_range: tuple[float, float] = (5.0, 70.0)
    theta_range_deg: tuple[float, float] = (30.0, 150.0)
    modulation_order: int = 4

    def __post_init__(self):
        if self.u_max < 1:
            raise ConfigurationError("u_max must be >= 1")
        if not 0 < self.spectrum_threshold < 1 or not 0 < self.prune_threshold < 1:
            raise ConfigurationError("thresholds must be in (0, 1)")
        if not 0 < self.refine_damping <= 1:
            raise ConfigurationError("refine_damping must be in (0, 1]")


@dataclass
class JnflsdResult:
    locations: list[tuple[float, float]]  # (d, theta) per live row
    X_hat: np.ndarray
    bits: np.ndarray
    erasures: np.ndarray
    gamma: np.ndarray
    diagnostics: dict


def spectrum_grid(config: JnflsdConfig):
    n_d, n_t = config.coarse_grid
    d = np.linspace(config.d_range[0], config.d_range[1], n_d)
    t = np.deg2rad(np.linspace(config.theta_range_deg[0], config.theta_range_deg[1], n_t))
    return d, t


def spatial_power_spectrum(Y, geom: ArrayGeometry, grid):
    """Beamforming power a^H Y Y^H a on a (distance, angle) grid.

    Evaluated as ||Y^H a||^2 when the frame is short, or via the R x R
    covariance when that is cheaper.  Returns an (n_d, n_theta) real array.
    """
    d_vals, t_vals = grid
    if len(d_vals) == 0 or len(t_vals) == 0:
        raise ConfigurationError("grid must be nonempty")
    dd, tt = np.meshgrid(d_vals, t_vals, indexing="ij")
    A = steering_matrix(geom, dd.ravel(), tt.ravel())
    R_ant, L = Y.shape
    if L <= R_ant:
        S = np.sum(np.abs(Y.conj().T @ A) ** 2, axis=0)
    else:
        S = np.einsum("rp,rs,sp->p", A.conj(), Y @ Y.conj().T, A).real
    return S.reshape(len(d_vals), len(t_vals))


def _local_maxima(S):
    """Indices of strict-or-equal local maxima over the 8-neighborhood."""
    P = np.pad(S, 1, mode="constant", constant_values=-np.inf)
    center = P[1:-1, 1:-1]
    mask = np.ones_like(S, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == dj == 0:
                continue
            mask &= center >= P[1 + di : P.shape[0] - 1 + di, 1 + dj : P.shape[1] - 1 + dj]
    return mask


def initialize_candidates(spectrum, grid, config: JnflsdConfig, geom: ArrayGeometry):
    """Seed location candidates from the peaks of the spatial spectrum.

    Local maxima above spectrum_threshold * max are accepted strongest first,
    skipping any peak whose steering vector is nearly collinear with an
    already-accepted one.  Each accepted peak then gets at most one partner
    candidate along the same angle at a steering-decorrelated distance: a
    single broad near-field peak routinely hides two users at the same angle,
    and the partner gives the factorization a second column to pull apart.
    If nothing clears the threshold the top u_max grid points are used.
    Returns (CandidateSet, A0).
    """
    d_vals, t_vals = grid
    peak = spectrum.max()
    mask = _local_maxima(spectrum) & (spectrum >= config.spectrum_threshold * peak)
    ij = np.argwhere(mask)
    order = np.argsort(-spectrum[mask])
    ij = ij[order]

    R_ant = geom.n_antennas
    points: list[tuple[float, float]] = []
    if len(ij) == 0:
        flat = np.argsort(-spectrum.ravel())[: config.u_max]
        for f in flat:
            i, j = np.unravel_index(f, spectrum.shape)
            points.append((float(d_vals[i]), float(t_vals[j])))
    else:
        accepted_cols: list[np.ndarray] = []
        for i, j in ij:
            d0, t0 = float(d_vals[i]), float(t_vals[j])
            a0 = steering_vector(geom, d0, t0)
            if any(
                abs(a0.conj() @ a1) / R_ant > PEAK_CORR_TOL for a1 in accepted_cols
            ):
                continue
            points.append((d0, t0))
            accepted_cols.append(a0)
            if len(points) >= config.u_max:
                break
        partners: list[tuple[float, float]] = []
        for (d0, t0), a0 in zip(list(points), accepted_cols):
            if len(points) + len(partners) >= config.u_max:
                break
            j = int(np.argmin(np.abs(t_vals - t0)))
            best = fallback = None
            for i, d1 in enumerate(d_vals):
                c = abs(a0.conj() @ steering_vector(geom, float(d1), t0)) / R_ant
                if c < PARTNER_CORR_GOOD and (best is None or spectrum[i, j] > best[0]):
                    best = (spectrum[i, j], float(d1))
                if fallback is None or c < fallback[0]:
                    fallback = (c, float(d1))
            if best is not None:
                partners.append((best[1], t0))
            elif fallback is not None and fallback[0] < PARTNER_CORR_MAX:
                partners.append((fallback[1], t0))
        points.extend(partners[: config.u_max - len(points)])

    d = np.array([max(p[0], D_MIN_HARD) for p in points])
    t = np.clip(np.array([p[1] for p in points]), THETA_MARGIN, math.pi - THETA_MARGIN)
    cands = CandidateSet(d=d, theta=t, active=np.ones(len(points), dtype=bool))
    A0 = steering_matrix(geom, d, t)
    return cands, A0


def refine_location(q_col, sigma2, d_prev, theta_prev, geom: ArrayGeometry,
                    damping: float = 1.0, diagnostics: dict | None = None,
                    d_bounds: tuple[float, float] | None = None,
                    theta_bounds: tuple[float, float] | None = None):
    """One damped Gauss-Newton location update from a noisy steering estimate.

    Linearizes the steering vector at the previous location, solves the
    2-parameter least-squares problem for the (real) increment, and returns
    the clipped new location together with the 2x2 parameter covariance
    V_c = sigma2 * (E^H E)^{-1}.  When search bounds are given, the updated
    location is clamped into the box; beyond the Rayleigh distance the
    distance derivative nearly vanishes, so unbounded steps can run away.
    """
    if sigma2 <= 0:
        raise ConfigurationError("sigma2 must be positive")
    e_d, e_t = steering_jacobian(geom, d_prev, theta_prev)
    E = np.stack([e_d, e_t], axis=1)
    xi = np.asarray(q_col) - steering_vector(geom, d_prev, theta_prev)
    G = E.conj().T @ E
    if abs(np.linalg.det(G)) < 1e-12 * max(np.trace(G).real ** 2, 1e-300):
        G = G + 1e-10 * np.trace(G).real * np.eye(2)
        if diagnostics is not None:
            diagnostics.setdefault("regularized_refinements", 0)
            diagnostics["regularized_refinements"] += 1
    c_hat = np.linalg.solve(G, E.conj().T @ xi).real
    V_c = sigma2 * np.linalg.inv(G)
    d_lo, d_hi = d_bounds if d_bounds is not None else (D_MIN_HARD, np.inf)
    t_lo, t_hi = (
        theta_bounds
        if theta_bounds is not None
        else (THETA_MARGIN, math.pi - THETA_MARGIN)
    )
    d_new = float(np.clip(d_prev + damping * c_hat[0], max(d_lo, D_MIN_HARD), d_hi))
    theta_new = float(
        np.clip(
            theta_prev + damping * c_hat[1],
            max(t_lo, THETA_MARGIN),
            min(t_hi, math.pi - THETA_MARGIN),
        )
    )
    return d_new, theta_new, V_c


def _gauss_newton_refine(q_col, d0, t0, geom: ArrayGeometry,
                         d_bounds, theta_bounds, max_steps: int = 8):
    """Iterated Gauss-Newton fit of a location to a noisy steering estimate.

    Each step re-linearizes at the current location and backtracks the step
    length until the fit residual ||q - a(d, theta)||^2 decreases; near the
    Rayleigh distance the raw Newton step routinely overshoots the almost
    flat distance direction, and backtracking is what keeps it honest.
    Returns (d, theta, G) with G = E^H E at the final location.
    """
    q_col = np.asarray(q_col)

    def cost(d, t):
        return float(np.linalg.norm(q_col - steering_vector(geom, d, t)) ** 2)

    d, t = d0, t0
    f = cost(d, t)
    for _ in range(max_steps):
        e_d, e_t = steering_jacobian(geom, d, t)
        E = np.stack([e_d, e_t], axis=1)
        G = E.conj().T @ E
        rhs = E.conj().T @ (q_col - steering_vector(geom, d, t))
        c = np.linalg.solve(G + 1e-9 * np.trace(G).real * np.eye(2), rhs).real
        step = 1.0
        improved = False
        for _try in range(8):
            d1 = float(np.clip(d + step * c[0], *d_bounds))
            t1 = float(np.clip(t + step * c[1], *theta_bounds))
            f1 = cost(d1, t1)
            if f1 < f - 1e-12:
                d, t, f = d1, t1, f1
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    e_d, e_t = steering_jacobian(geom, d, t)
    E = np.stack([e_d, e_t], axis=1)
    return d, t, E.conj().T @ E


@dataclass
class ManifoldDenoiseResult:
    A_hat: np.ndarray  # R x Z_live, columns on the steering manifold
    Xi_entries: np.ndarray  # R x Z_live per-entry variances
    Xi_avg: np.ndarray  # R x R average linearized covariance
    candidates: CandidateSet


def manifold_denoise_A(Q_A, V_Q_A, candidates: CandidateSet, geom: ArrayGeometry,
                       damping: float = 1.0, diagnostics: dict | None = None,
                       d_bounds: tuple[float, float] | None = None,
                       theta_bounds: tuple[float, float] | None = None):
    """Project the pseudo-observed mixing matrix back onto the steering manifold.

    Q_A columns (one per live candidate) are treated as noisy steering vectors
    with scalar noise variance mean(V_Q_A); each candidate location is refined
    by an iterated Gauss-Newton fit and the columns are rebuilt as exact
    steering vectors.  The per-entry variances come from pushing the 2x2
    location covariance V_c = sigma2 (E^H E)^{-1} through the Jacobian.
    """
    Q_A = np.asarray(Q_A)
    idx = candidates.live_indices
    if Q_A.shape[1] != len(idx):
        raise ConfigurationError("Q_A column count must equal live candidate count")
    sigma2 = float(np.mean(V_Q_A))
    if sigma2 <= 0:
        raise ConfigurationError("V_Q_A must have positive mean")
    R_ant = geom.n_antennas
    Z = len(idx)
    db = d_bounds if d_bounds is not None else (D_MIN_HARD, np.inf)
    tb = (
        theta_bounds
        if theta_bounds is not None
        else (THETA_MARGIN, math.pi - THETA_MARGIN)
    )
    Xi_avg = np.zeros((R_ant, R_ant), dtype=complex)
    Xi_entries = np.empty((R_ant, Z))
    for col, z in enumerate(idx):
        d_new, t_new, G = _gauss_newton_refine(
            Q_A[:, col], candidates.d[z], candidates.theta[z], geom, db, tb
        )
        candidates.d[z] = d_new
        candidates.theta[z] = t_new
        V_c = sigma2 * np.linalg.inv(G + 1e-9 * np.trace(G).real * np.eye(2)).real
        e_d, e_t = steering_jacobian(geom, d_new, t_new)
        E = np.stack([e_d, e_t], axis=1)
        cov = E @ V_c @ E.conj().T
        Xi_avg += cov
        Xi_entries[:, col] = np.maximum(np.diag(cov).real, 0.0)
    Xi_avg /= Z
    A_hat = steering_matrix(geom, candidates.d[idx], candidates.theta[idx])
    return ManifoldDenoiseResult(A_hat, Xi_entries, Xi_avg, candidates)


def prune_candidates(candidates: CandidateSet, gamma_row, X_hat, Xi_X,
                     config: JnflsdConfig, protected=None):
    """Deactivate candidates whose signal rows carry negligible energy.

    Row energy is mean_l(|X_hat|^2 + Xi_X); rows below prune_threshold times
    the strongest live row are deactivated (never below one live row).
    ``protected`` rows are exempt.  Returns (candidates, keep_mask) with
    keep_mask over the current live rows.
    """
    energy = np.mean(np.abs(X_hat) ** 2 + Xi_X, axis=1)
    keep = energy >= config.prune_threshold * energy.max()
    if protected is not None:
        keep |= np.asarray(protected, dtype=bool)
    if not keep.any():
        keep[np.argmax(energy)] = True
    idx = candidates.live_indices
    candidates.active[idx[~keep]] = False
    return candidates, keep


def merge_candidates(candidates: CandidateSet, X_hat, Xi_X, geom: ArrayGeometry,
                     steer_tol: float = 0.7, row_tol: float = 0.8,
                     protected=None):
    """Fold duplicate candidates into their strongest representative.

    Two live rows are duplicates only when both tests agree: their steering
    vectors are correlated (|a_i^H a_j| / R above steer_tol) *and* their
    symbol rows are correlated above row_tol.  Steering correlation alone
    cannot be trusted here -- two genuinely co-located users can exceed any
    usable threshold -- but duplicates carry the same symbol stream while
    distinct users are statistically orthogonal, so the row test separates
    the cases cleanly.  The weaker row's (phase-aligned) symbol estimate is
    folded into the survivor so no signal energy is dropped.  Modifies X_hat
    in place; returns (candidates, keep_mask) over the live rows.
    """
    idx = candidates.live_indices
    A = steering_matrix(geom, candidates.d[idx], candidates.theta[idx])
    R_ant = geom.n_antennas
    corr = np.abs(A.conj().T @ A) / R_ant
    norms = np.linalg.norm(X_hat, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    row_corr = np.abs(X_hat.conj() @ X_hat.T) / np.outer(norms, norms)
    energy = np.mean(np.abs(X_hat) ** 2 + Xi_X, axis=1)
    prot = (
        np.asarray(protected, dtype=bool)
        if protected is not None
        else np.zeros(len(idx), dtype=bool)
    )
    order = np.argsort(-energy)  # strongest first
    keep = np.ones(len(idx), dtype=bool)
    for a_pos, a in enumerate(order):
        if not keep[a]:
            continue
        for b in order[a_pos + 1 :]:
            if (
                keep[b]
                and not prot[a]
                and not prot[b]
                and corr[a, b] > steer_tol
                and row_corr[a, b] > row_tol
            ):
                keep[b] = False
                X_hat[a] += (A[:, a].conj() @ A[:, b] / R_ant) * X_hat[b]
    candidates.active[idx[~keep]] = False
    return candidates, keep


def _freeze_mask(A_hat, X_hat, R_ant):
    """Rows whose precision the sparsity prior must not touch this iteration.

    Flags both members of any near-collinear pair with distinct symbol rows
    that jointly carries about two users' worth of energy; see the module
    constants for the gates.
    """
    Z = A_hat.shape[1]
    if Z < 2:
        return np.zeros(Z, dtype=bool)
    sc = np.abs(A_hat.conj().T @ A_hat) / R_ant
    np.fill_diagonal(sc, 0.0)
    norms = np.linalg.norm(X_hat, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    rc = np.abs(X_hat.conj() @ X_hat.T) / np.outer(norms, norms)
    en = np.mean(np.abs(X_hat) ** 2, axis=1)
    pair_sum = np.add.outer(en, en)
    ok = (
        (sc > PAIR_STEER_MIN)
        & (rc < PAIR_ROW_MAX)
        & (np.minimum.outer(en, en) > PAIR_ENERGY_MIN)
        & (pair_sum > PAIR_ENERGY_SUM[0])
        & (pair_sum < PAIR_ENERGY_SUM[1])
    )
    return np.any(ok, axis=1)


def run_jnflsd(Y, geom: ArrayGeometry, config: JnflsdConfig = JnflsdConfig(),
               init_candidates: CandidateSet | None = None,
               refine: bool = True) -> JnflsdResult:
    """Full blind localization-and-detection loop.

    Initializes candidates from the spatial power spectrum (unless
    init_candidates is given), then alternates: closed-form posterior update
    of X under the row-shared sparsity prior, steering-manifold update of A
    with Gauss-Newton location refinement, noise refit, candidate pruning and
    duplicate merging.  Every revive_interval iterations the residual
    spectrum is scanned for unexplained energy; a peak aligned with a
    mixture-looking row splits that row into two distances, a peak aligned
    with a dead row relocates it, and an unaligned peak revives a fresh
    candidate.  ``refine=False`` freezes the candidate locations (useful for
    genie-style comparisons) and disables the structural moves.
    """
    Y = np.asarray(Y, dtype=complex)
    if not np.all(np.isfinite(Y)):
        raise ConfigurationError("Y contains non-finite entries")
    R_ant, L = Y.shape
    if R_ant != geom.n_antennas:
        raise ConfigurationError("Y row count does not match the array geometry")

    theta_bounds = tuple(np.deg2rad(config.theta_range_deg))
    diagnostics: dict = {
        "trace": {"C": [], "lambda": [], "rel_change": [], "z_live": []}
    }
    grid = spectrum_grid(config)
    if init_candidates is None:
        S = spatial_power_spectrum(Y, geom, grid)
        cands, A_hat = initialize_candidates(S, grid, config, geom)
    else:
        cands = init_candidates
        idx = cands.live_indices
        A_hat = steering_matrix(geom, cands.d[idx], cands.theta[idx])
    Z = cands.z_live

    V_A = np.zeros(Z)
    X_hat = np.zeros((Z, L), dtype=complex)
    Xi_row = np.ones(Z)
    lam = mf_engine.initial_noise_precision(Y)
    gg = GaussGammaState(gamma=np.ones(Z), epsilon=0.0, eta=0.0)
    protect = np.zeros(Z, dtype=int)

    structural = config.revive_interval > 0 and refine
    repair_horizon = config.max_iter - 2 * max(config.revive_interval, 1)
    prod_prev = A_hat @ X_hat
    best = None
    diverged = False

    def pin_gamma(gg, mask):
        g = gg.gamma.copy()
        g[mask] = 1.0
        return GaussGammaState(g, gg.epsilon, gg.eta)

    for it in range(config.max_iter):
        Z = cands.z_live
        try:
            # X half-step: exact Gaussian posterior given the mixing belief.
            W = A_hat.conj().T @ A_hat + R_ant * np.diag(V_A)
            Wi = np.linalg.inv(W)
            Q = Wi @ (A_hat.conj().T @ Y)
            VQ = (
                np.maximum(np.diag(Wi).real, 1e-12)[:, None] / lam
            ) * np.ones((1, L))
            if it < config.warmup_iterations:
                gg = GaussGammaState(np.ones(Z), 0.0, 0.0)
            else:
                frozen = _freeze_mask(A_hat, X_hat, R_ant)
                frozen |= protect > 0
                if frozen.any():
                    gg = pin_gamma(gg, frozen)
            X_hat, Xi, gg = gauss_gamma_rowshared_denoise(Q, VQ, gg)
            if it < config.warmup_iterations:
                gg = GaussGammaState(np.ones(Z), 0.0, 0.0)
            elif (protect > 0).any():
                gg = pin_gamma(gg, protect > 0)
            gg = GaussGammaState(
                gg.gamma, min(gg.epsilon, config.epsilon_cap), gg.eta
            )
            Xi_row = np.mean(Xi, axis=1)

            # A half-step: exact Gaussian posterior given the signal belief.
            WA = X_hat @ X_hat.conj().T + L * np.diag(Xi_row)
            WAi = np.linalg.inv(WA)
            Qa = (WAi @ (X_hat @ Y.conj().T)).conj().T
            VQa = np.maximum(np.diag(WAi).real, 1e-12) / lam
            if refine:
                res = manifold_denoise_A(
                    Qa, VQa, cands, geom, diagnostics=diagnostics,
                    d_bounds=config.d_range, theta_bounds=theta_bounds,
                )
                A_hat = res.A_hat
                V_A = np.minimum(res.Xi_entries.mean(axis=0), 1.0)
            else:
                idx = cands.live_indices
                A_hat = steering_matrix(geom, cands.d[idx], cands.theta[idx])
                V_A = np.zeros(Z)

            qA = MatrixGaussianBelief(A_hat, np.eye(R_ant), np.diag(V_A))
            qX = MatrixGaussianBelief(X_hat, np.diag(Xi_row), np.eye(L))
            lam = mf_engine.update_noise_precision(Y, qA, qX)
        except (FloatingPointError, np.linalg.LinAlgError):
            diverged = True
            break

        prod = A_hat @ X_hat
        if not (np.all(np.isfinite(prod)) and np.isfinite(lam)):
            diverged = True
            break
        best = (
            cands.live_locations(),
            X_hat.copy(),
            Xi_row.copy(),
            gg.gamma.copy(),
            A_hat.copy(),
        )
        C = mf_engine.residual_statistic(Y, qA, qX)
        ref = np.linalg.norm(prod_prev)
        rel = np.linalg.norm(prod - prod_prev) / ref if ref > 0 else np.inf
        tr = diagnostics["trace"]
        tr["C"].append(C)
        tr["lambda"].append(lam)
        tr["rel_change"].append(rel)
        tr["z_live"].append(Z)

        # Structure maintenance: prune dead rows, fold duplicates.
        cands, keep = prune_candidates(
            cands, gg.gamma, X_hat, Xi, config, protected=protect > 0
        )
        if not keep.all():
            X_hat, Xi_row, V_A, A_hat, gg, protect = _shrink(
                keep, X_hat, Xi_row, V_A, A_hat, gg, protect
            )
        if refine and it >= 2 and cands.z_live > 1:
            cands, keep = merge_candidates(
                cands, X_hat, Xi_row[:, None], geom,
                steer_tol=config.merge_corr_tol, row_tol=config.merge_row_tol,
                protected=protect > 0,
            )
            if not keep.all():
                X_hat, Xi_row, V_A, A_hat, gg, protect = _shrink(
                    keep, X_hat, Xi_row, V_A, A_hat, gg, protect
                )
        protect = np.maximum(protect - 1, 0)

        acted = False
        if (
            structural
            and it >= config.warmup_iterations
            and (it + 1) % config.revive_interval == 0
            and it < repair_horizon
            and cands.z_live < config.u_max
        ):
            acted, X_hat, Xi_row, V_A, A_hat, gg, protect = _residual_repair(
                Y, geom, grid, config, cands,
                X_hat, Xi_row, V_A, A_hat, gg, protect, lam,
            )
        prod_prev = A_hat @ X_hat
        if (
            rel <= config.tol
            and not acted
            and it >= config.warmup_iterations + config.revive_interval
            and not (protect > 0).any()
        ):
            break

    if best is None:
        raise RuntimeError("no finite iteration completed")
    locations, X_hat, Xi_row, gamma, A_hat = best
    diagnostics["diverged"] = diverged
    diagnostics["iterations"] = len(diagnostics["trace"]["C"])

    if refine and len(locations) > 1:
        locations, X_hat, gamma = _consolidate(
            locations, X_hat, gamma, A_hat, R_ant
        )

    energy = np.mean(np.abs(X_hat) ** 2, axis=1)
    order = np.argsort(-energy)
    X_out = X_hat[order]
    gamma_out = gamma[order]
    bits_rows, erasure_rows = [], []
    for row in X_out:
        b, e = differential_demodulate(row, config.modulation_order)
        bits_rows.append(b)
        erasure_rows.append(e)
    return JnflsdResult(
        locations=[
            (float(locations[z][0]), float(locations[z][1])) for z in order
        ],
        X_hat=X_out,
        bits=np.array(bits_rows),
        erasures=np.array(erasure_rows),
        gamma=gamma_out,
        diagnostics=diagnostics,
    )


def _shrink(keep, X_hat, Xi_row, V_A, A_hat, gg, protect):
    gg = GaussGammaState(gamma=gg.gamma[keep], epsilon=gg.epsilon, eta=gg.eta)
    return X_hat[keep], Xi_row[keep], V_A[keep], A_hat[:, keep], gg, protect[keep]


def _residual_repair(Y, geom, grid, config, cands,
                     X_hat, Xi_row, V_A, A_hat, gg, protect, lam):
    """Split, relocate or revive one candidate from the residual spectrum.

    Fires only when the residual holds clearly more than noise-floor energy
    at its strongest grid point.  A peak steering-aligned with a live row is
    a sign that the row is covering two users (split it across two distances)
    or that it wandered off (relocate it if nearly dead); otherwise a user
    was lost entirely and a fresh candidate is revived at the peak.  Newly
    placed rows are protected from pruning/merging for a few iterations.
    """
    R_ant, L = Y.shape
    resid = Y - A_hat @ X_hat
    S_res = spatial_power_spectrum(resid, geom, grid)
    floor = R_ant * L / lam
    if S_res.max() <= config.revive_threshold * floor:
        return False, X_hat, Xi_row, V_A, A_hat, gg, protect
    i, j = np.unravel_index(np.argmax(S_res), S_res.shape)
    d_new, t_new = float(grid[0][i]), float(grid[1][j])
    a_new = steering_vector(geom, d_new, t_new)
    align = np.abs(A_hat.conj().T @ a_new) / R_ant
    z = int(np.argmax(align)) if align.size else -1
    aligned = align.size > 0 and align[z] > 0.8 and protect[z] == 0
    energy_z = float(np.mean(np.abs(X_hat[z]) ** 2) + Xi_row[z]) if aligned else 0.0
    idx = cands.live_indices

    def append(cands, d, t):
        cands.d = np.append(cands.d, d)
        cands.theta = np.append(cands.theta, t)
        cands.active = np.append(cands.active, True)

    if aligned and energy_z > SPLIT_ENERGY_MIN:
        g = idx[z]
        d0, t0 = cands.d[g], cands.theta[g]
        d_lo = float(np.clip(SPLIT_FACTORS[0] * d0, *config.d_range))
        d_hi = float(np.clip(SPLIT_FACTORS[1] * d0, *config.d_range))
        cands.d[g] = d_lo
        A_hat[:, z] = steering_vector(geom, d_lo, t0)
        protect[z] = config.protect_iterations
        append(cands, d_hi, t0)
        A_hat = np.column_stack([A_hat, steering_vector(geom, d_hi, t0)])
        V_A = np.append(V_A, V_A[z])
        X_hat = np.vstack([X_hat, 0.5 * X_hat[z][None, :]])
        X_hat[z] *= 0.5
        Xi_row = np.append(Xi_row, Xi_row[z])
        gg = GaussGammaState(np.append(gg.gamma, gg.gamma[z]), gg.epsilon, gg.eta)
        protect = np.append(protect, config.protect_iterations)
    elif aligned and energy_z < RELOC_ENERGY_MAX:
        g = idx[z]
        cands.d[g], cands.theta[g] = d_new, t_new
        A_hat[:, z] = a_new
        X_hat[z] = 0.0
        gamma = gg.gamma.copy()
        gamma[z] = 1.0
        gg = GaussGammaState(gamma, gg.epsilon, gg.eta)
        protect[z] = config.protect_iterations
    elif aligned:
        return False, X_hat, Xi_row, V_A, A_hat, gg, protect
    else:
        append(cands, d_new, t_new)
        A_hat = np.column_stack([A_hat, a_new])
        V_A = np.append(V_A, 0.0)
        X_hat = np.vstack([X_hat, np.zeros((1, L), dtype=complex)])
        Xi_row = np.append(Xi_row, 1.0)
        gg = GaussGammaState(np.append(gg.gamma, 1.0), gg.epsilon, gg.eta)
        protect = np.append(protect, config.protect_iterations)
    return True, X_hat, Xi_row, V_A, A_hat, gg, protect


def _consolidate(locations, X_hat, gamma, A_hat, R_ant):
    """Final duplicate sweep with looser thresholds plus an energy floor."""
    Z = len(locations)
    sc = np.abs(A_hat.conj().T @ A_hat) / R_ant
    norms = np.linalg.norm(X_hat, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    rc = np.abs(X_hat.conj() @ X_hat.T) / np.outer(norms, norms)
    energy = np.mean(np.abs(X_hat) ** 2, axis=1)
    order = np.argsort(-energy)
    keep = np.ones(Z, dtype=bool)
    for a_pos, a in enumerate(order):
        if not keep[a]:
            continue
        for b in order[a_pos + 1 :]:
            if keep[b] and sc[a, b] > FINAL_STEER_TOL and rc[a, b] > FINAL_ROW_TOL:
                keep[b] = False
    keep &= energy > FINAL_ENERGY_FLOOR * energy.max()
    if not keep.any():
        keep[np.argmax(energy)] = True
    locations = [loc for loc, k in zip(locations, keep) if k]
    return locations, X_hat[keep], gamma[keep]


def save_result(result: JnflsdResult, path: str | Path, trace_csv: str | Path | None = None):
    """Write a result as structured text, optionally with a per-iteration CSV."""
    path = Path(path)
    payload = {
        "format": "uampmf-jnflsd-result-v1",
        "locations": [
            {"d": d, "theta_deg": math.degrees(t)} for d, t in result.locations
        ],
        "gamma": [float(g) for g in result.gamma],
        "bits": result.bits.tolist(),
        "erasures": result.erasures.astype(int).tolist(),
        "iterations": result.diagnostics.get("iterations"),
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
    if trace_csv is not None:
        tr = result.diagnostics["trace"]
        with open(trace_csv, "w") as f:
            f.write("# uampmf-jnflsd-trace-v1\n")
            f.write("iteration,C,lambda,rel_change,z_live\n")
            for i in range(len(tr["C"])):
                f.write(
                    f"{i},{tr['C'][i]:.17g},{tr['lambda'][i]:.17g},"
                    f"{tr['rel_change'][i]:.17g},{tr['z_live'][i]}\n"
                )
