"""Variational matrix-factorization loop with unitary-AMP inner steps.

Alternates three updates on the model Y = A X + W: a posterior update of X
given the current belief on A, a posterior update of A given X, and a noise
precision refit.  Each matrix update whitens the variational message via a
Hermitian EVD and then runs one AMP half-step with a pluggable separable
denoiser, so arbitrary element-wise priors can be imposed on either factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateModelError, NumericalDecompositionError
from .uamp import SeparableDenoiser

VAR_FLOOR = 1e-12
VAR_CEIL = 1e12


@dataclass
class MatrixGaussianBelief:
    """Mean matrix with separable row/column covariance factors."""

    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray

    @property
    def shape(self):
        return self.mean.shape


@dataclass(frozen=True)
class PseudoModel:
    """Whitened observation model R = Phi * target + white noise."""

    R: np.ndarray
    Phi: np.ndarray
    noise_precision: float


@dataclass(frozen=True)
class EngineConfig:
    max_iter: int = 300
    tol: float = 1e-6
    restarts: int = 1
    variance_floor: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class EngineState:
    """All mutable quantities of one factorization run."""

    qA: MatrixGaussianBelief
    qX: MatrixGaussianBelief
    lambda_hat: float
    Xi_X: np.ndarray  # N x L element variances of X
    Xi_A: np.ndarray  # M x N element variances of A
    S_X: np.ndarray  # N x L AMP residual memory (whitened X model)
    S_A: np.ndarray  # N x M AMP residual memory (whitened A^H model)


def _whiten(W, stat, variance_floor):
    """EVD-based whitening of source matrix W: returns (R, Phi).

    Phi = D^{1/2} C^H and R = D^{-1/2} C^H stat, so that Phi^H Phi = W and
    Phi^H R = stat.  Eigenvalues are clamped at variance_floor times the
    largest before the inverse square root.
    """
    herm_err = np.linalg.norm(W - W.conj().T)
    if herm_err > 1e-8 * max(np.linalg.norm(W), 1e-300):
        raise NumericalDecompositionError("whitening source is not Hermitian")
    if not np.any(W):
        raise DegenerateModelError("whitening source matrix is all zero")
    Wh = (W + W.conj().T) / 2
    try:
        d, C = np.linalg.eigh(Wh)
    except np.linalg.LinAlgError as e:
        raise NumericalDecompositionError(f"EVD failed: {e}") from e
    d = np.maximum(d, variance_floor * d[-1])
    Ch = C.conj().T
    Phi = np.sqrt(d)[:, None] * Ch
    R = (1.0 / np.sqrt(d))[:, None] * (Ch @ stat)
    return R, Phi


def build_x_pseudo_model(
    qA: MatrixGaussianBelief, Y: np.ndarray, lambda_hat: float,
    variance_floor: float = VAR_FLOOR,
) -> PseudoModel:
    """Whitened message model for the X update.

    The whitening source is A_hat^H A_hat + M * V_A (row covariance of A is
    the identity by convention, so its trace is M).
    """
    A_hat = qA.mean
    M = A_hat.shape[0]
    W = A_hat.conj().T @ A_hat + M * qA.col_cov
    R, Phi = _whiten(W, A_hat.conj().T @ Y, variance_floor)
    return PseudoModel(R=R, Phi=Phi, noise_precision=lambda_hat)


def build_a_pseudo_model(
    qX: MatrixGaussianBelief, Y: np.ndarray, lambda_hat: float,
    variance_floor: float = VAR_FLOOR,
) -> PseudoModel:
    """Whitened message model for the A update, acting on A^H row-wise.

    The whitening source is X_hat X_hat^H + L * U_X (column covariance of X is
    the identity, trace L).
    """
    X_hat = qX.mean
    L = X_hat.shape[1]
    W = X_hat @ X_hat.conj().T + L * qX.row_cov
    R, Phi = _whiten(W, X_hat @ Y.conj().T, variance_floor)
    return PseudoModel(R=R, Phi=Phi, noise_precision=lambda_hat)


def _amp_halfstep(pm: PseudoModel, mean_in, Xi, S):
    """One AMP step on a whitened model; returns (Q, V_Q, S_new)."""
    absPhi2 = np.abs(pm.Phi) ** 2
    VP = absPhi2 @ Xi
    P = pm.Phi @ mean_in - VP * S
    VS = 1.0 / (VP + 1.0 / pm.noise_precision)
    S_new = VS * (pm.R - P)
    VQ = np.clip(1.0 / np.maximum(absPhi2.T @ VS, 1.0 / VAR_CEIL), VAR_FLOOR, VAR_CEIL)
    Q = mean_in + VQ * (pm.Phi.conj().T @ S_new)
    return Q, VQ, S_new


def x_amp_halfstep(pm: PseudoModel, state: EngineState):
    """Produce the element-wise pseudo observations (Q_X, V_QX) for X."""
    Q, VQ, state.S_X = _amp_halfstep(pm, state.qX.mean, state.Xi_X, state.S_X)
    return Q, VQ


def finish_x_update(state: EngineState, X_hat, Xi):
    """Install denoised X: row-average the variances into U_X (V_X = I)."""
    N, L = X_hat.shape
    row_means = np.mean(Xi, axis=1)
    state.Xi_X = np.repeat(row_means[:, None], L, axis=1)
    state.qX = MatrixGaussianBelief(
        mean=X_hat, row_cov=np.diag(row_means), col_cov=np.eye(L)
    )


INNER_MAX = 500
INNER_TOL = 1e-12
INNER_DAMP = 0.5


def _jacobi_denoise(pm: PseudoModel, mean0, denoiser, transpose: bool):
    """Damped Jacobi fixed-point combining the Gaussian message with a prior.

    Solves the correlated pseudo model R = Phi * target + noise by iterating
    elementwise extrinsics q = mean + D^{-1}(Phi^H R - W mean) with scalar
    variances 1/(lambda * W_nn); for a conjugate Gaussian denoiser the fixed
    point is the exact correlated posterior.  A single AMP half-step with the
    Onsager memory carried across model rebuilds has spurious fixed points at
    small inner dimension, so the message is resolved in full here instead.
    The pluggable denoiser sees (q, tau) in the natural orientation of the
    estimated factor; `transpose` flips between the X (N x L) and A^H models.
    """
    lam = pm.noise_precision
    W = pm.Phi.conj().T @ pm.Phi
    stat = pm.Phi.conj().T @ pm.R
    D = np.maximum(np.diag(W).real, VAR_FLOOR)
    # Relaxation bounded by the spectral radius of D^{-1/2} W D^{-1/2}
    # keeps the iteration contractive for any positive definite W.
    scaled = W / np.sqrt(np.outer(D, D))
    rho = float(np.linalg.eigvalsh((scaled + scaled.conj().T) / 2)[-1])
    damp = min(INNER_DAMP, 1.0 / max(rho, 1.0))
    mean = mean0.copy()
    tau = np.broadcast_to((1.0 / (lam * D))[:, None], mean.shape)
    Xi = np.broadcast_to(tau, mean.shape).copy()
    for _ in range(INNER_MAX):
        q = mean + (stat - W @ mean) / D[:, None]
        if transpose:
            new, Xi_t = denoiser(q.conj().T, tau.T)
            new, Xi = new.conj().T, Xi_t.T
        else:
            new, Xi = denoiser(q, tau)
        new = (1.0 - damp) * mean + damp * new
        delta = np.linalg.norm(new - mean)
        mean = new
        if delta <= INNER_TOL * max(np.linalg.norm(mean), 1e-300):
            break
    return mean, Xi


def update_x_posterior(pm: PseudoModel, state: EngineState, denoiser: SeparableDenoiser):
    X_hat, Xi = _jacobi_denoise(pm, state.qX.mean, denoiser, transpose=False)
    finish_x_update(state, X_hat, Xi)
    return state


def a_amp_halfstep(pm: PseudoModel, state: EngineState):
    """Pseudo observations for A, returned in A orientation (M x N)."""
    Q, VQ, state.S_A = _amp_halfstep(
        pm, state.qA.mean.conj().T, state.Xi_A.T, state.S_A
    )
    return Q.conj().T, VQ.T


def finish_a_update(state: EngineState, A_hat, Xi):
    """Install denoised A: column-average the variances into V_A (U_A = I)."""
    M, N = A_hat.shape
    col_means = np.mean(Xi, axis=0)
    state.Xi_A = np.repeat(col_means[None, :], M, axis=0)
    state.qA = MatrixGaussianBelief(
        mean=A_hat, row_cov=np.eye(M), col_cov=np.diag(col_means)
    )


def update_a_posterior(pm: PseudoModel, state: EngineState, denoiser: SeparableDenoiser):
    Ah_hat, Xi_t = _jacobi_denoise(pm, state.qA.mean.conj().T, denoiser, transpose=True)
    finish_a_update(state, Ah_hat.conj().T, Xi_t.T)
    return state


def update_noise_precision(Y, qA: MatrixGaussianBelief, qX: MatrixGaussianBelief,
                           floor: float = 1e-30) -> float:
    """Refit the noise precision from the residual and belief covariances."""
    A_hat, X_hat = qA.mean, qX.mean
    M, L = Y.shape
    V_A, U_X = qA.col_cov, qX.row_cov
    C = (
        np.linalg.norm(Y - A_hat @ X_hat) ** 2
        + M * np.trace(X_hat @ X_hat.conj().T @ V_A).real
        + L * np.trace(U_X @ A_hat.conj().T @ A_hat).real
        + M * L * np.trace(U_X @ V_A).real
    )
    return M * L / max(C, floor)


def residual_statistic(Y, qA, qX) -> float:
    """The scalar C whose inverse (times ML) is the noise precision."""
    M, L = Y.shape
    return M * L / update_noise_precision(Y, qA, qX)


def initial_noise_precision(Y) -> float:
    """Crude noise-floor estimate: average of the smallest 10% eigenvalues
    of Y Y^H / L."""
    M, L = Y.shape
    ev = np.sort(np.linalg.svd(Y, compute_uv=False) ** 2 / L)
    k = max(1, int(0.1 * min(M, L)))
    floor = float(np.mean(ev[:k]))
    return 1.0 / max(floor, 1e-12)


def _init_state(A0, X0, M, N, L, trusted: bool = False) -> EngineState:
    # A caller-supplied starting point is treated as exact (zero belief
    # variance), so a noiseless run initialized at a solution stays there.
    v = 0.0 if trusted else 1.0
    return EngineState(
        qA=MatrixGaussianBelief(mean=A0, row_cov=np.eye(M), col_cov=v * np.eye(N)),
        qX=MatrixGaussianBelief(mean=X0, row_cov=v * np.eye(N), col_cov=np.eye(L)),
        lambda_hat=1.0,
        Xi_X=np.full((N, L), v),
        Xi_A=np.full((M, N), v),
        S_X=np.zeros((N, L), dtype=complex),
        S_A=np.zeros((N, M), dtype=complex),
    )


def run_uamp_mf(
    Y: np.ndarray,
    denoiser_a: SeparableDenoiser,
    denoiser_x: SeparableDenoiser,
    config: EngineConfig = EngineConfig(),
    n_components: int | None = None,
    init: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Full factorization loop with optional restarts.

    Returns (qA, qX, lambda_hat, diagnostics).  With restarts > 1 the initial
    A is perturbed by entry-wise unit-modulus random phases and the run with
    the smallest final residual statistic C is kept.  If a run produces
    non-finite values, the best previous finite state is returned with the
    diagnostics flagged.
    """
    Y = np.asarray(Y, dtype=complex)
    if not np.all(np.isfinite(Y)):
        raise ValueError("Y contains non-finite entries")
    M, L = Y.shape
    if init is not None:
        A0, X0 = np.asarray(init[0], dtype=complex), np.asarray(init[1], dtype=complex)
        N = A0.shape[1]
    else:
        if n_components is None:
            raise ValueError("n_components required when init is not given")
        N = n_components
        A0 = np.ones((M, N), dtype=complex)
        X0 = np.zeros((N, L), dtype=complex)

    rng = np.random.default_rng(config.seed)
    lam0 = initial_noise_precision(Y)

    best = None
    for restart in range(config.restarts):
        if restart == 0:
            A_init = A0
        else:
            A_init = A0 * np.exp(2j * np.pi * rng.uniform(size=A0.shape))
        state = _init_state(A_init.copy(), X0.copy(), M, N, L, trusted=init is not None)
        state.lambda_hat = lam0
        trace = {"C": [], "lambda": [], "rel_change": []}
        diverged = False
        prod_prev = state.qA.mean @ state.qX.mean
        snapshot = None
        for _ in range(config.max_iter):
            try:
                pm_x = build_x_pseudo_model(
                    state.qA, Y, state.lambda_hat, config.variance_floor
                )
                update_x_posterior(pm_x, state, denoiser_x)
                pm_a = build_a_pseudo_model(
                    state.qX, Y, state.lambda_hat, config.variance_floor
                )
                update_a_posterior(pm_a, state, denoiser_a)
                state.lambda_hat = update_noise_precision(Y, state.qA, state.qX)
            except (FloatingPointError, np.linalg.LinAlgError):
                diverged = True
                break
            prod = state.qA.mean @ state.qX.mean
            if not (np.all(np.isfinite(prod)) and np.isfinite(state.lambda_hat)):
                diverged = True
                break
            snapshot = (state.qA, state.qX, state.lambda_hat)
            C = residual_statistic(Y, state.qA, state.qX)
            trace["C"].append(C)
            trace["lambda"].append(state.lambda_hat)
            ref = np.linalg.norm(prod_prev)
            rel = np.linalg.norm(prod - prod_prev) / ref if ref > 0 else np.inf
            trace["rel_change"].append(rel)
            prod_prev = prod
            if rel <= config.tol:
                break
        if snapshot is None:
            continue
        qA, qX, lam = snapshot
        C_final = residual_statistic(Y, qA, qX)
        diag = {"trace": trace, "diverged": diverged, "restart": restart,
                "iterations": len(trace["C"]), "C": C_final}
        if best is None or C_final < best[3]["C"]:
            best = (qA, qX, lam, diag)
    if best is None:
        raise RuntimeError("all restarts diverged before completing an iteration")
    return best
