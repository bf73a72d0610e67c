"""Unitary AMP for the linear model y = A x + w.

The solver first rotates the model by the left singular vectors of A, then
runs AMP on the rotated model with a pluggable separable denoiser.  Two
variants are provided: v1 keeps a per-entry variance vector, v2 collapses the
variances to scalars by averaging.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    DegenerateVarianceError,
    DivergenceError,
    NumericalDecompositionError,
)

# A separable denoiser maps element-wise pseudo observations and their
# variances to posterior means and variances: (q, tau_q) -> (mean, var).
SeparableDenoiser = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]

VAR_FLOOR = 1e-12
VAR_CEIL = 1e12


def _clip_var(v):
    return np.clip(v, VAR_FLOOR, VAR_CEIL)


@dataclass(frozen=True)
class LinearModel:
    """Noisy linear observation y = A x + w with noise precision beta."""

    A: np.ndarray
    y: np.ndarray
    beta: float

    def __post_init__(self):
        if self.A.ndim != 2 or self.y.shape != (self.A.shape[0],):
            raise ValueError("dimension mismatch between A and y")
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError("beta must be finite and positive")


@dataclass(frozen=True)
class UnitaryTransformedModel:
    """Rotated model r = Phi x + omega with Phi = Lambda V from the SVD of A."""

    r: np.ndarray
    Phi: np.ndarray
    lambda_vec: np.ndarray  # squared singular values, padded to length M


@dataclass
class UampState:
    x_hat: np.ndarray
    tau_x: np.ndarray | float
    s: np.ndarray
    iteration: int


def unitary_transform(model: LinearModel) -> UnitaryTransformedModel:
    """Rotate the model by U^H from the SVD A = U diag(sv) V."""
    if not np.all(np.isfinite(model.A)):
        raise NumericalDecompositionError("A contains non-finite entries")
    try:
        U, sv, Vh = np.linalg.svd(model.A, full_matrices=True)
    except np.linalg.LinAlgError as e:
        raise NumericalDecompositionError(f"SVD failed: {e}") from e
    M, N = model.A.shape
    k = min(M, N)
    Phi = (sv[:, None] * Vh[:k]) if k else np.zeros((0, N))
    if M > k:
        Phi = np.vstack([Phi, np.zeros((M - k, N), dtype=Phi.dtype)])
    lam = np.zeros(M)
    lam[:k] = sv**2
    r = U.conj().T @ model.y
    return UnitaryTransformedModel(r=r, Phi=Phi, lambda_vec=lam)


def gaussian_denoiser(mean0: complex = 0.0, var0: float = 1.0) -> SeparableDenoiser:
    """Element-wise MMSE denoiser for a circular Gaussian prior CN(mean0, var0).

    var0 = 0 gives a point mass at mean0; var0 = inf is a flat-prior
    passthrough.
    """
    if var0 < 0:
        raise ValueError("var0 must be nonnegative")

    def denoise(q, tau_q):
        q = np.asarray(q)
        tau_q = np.asarray(tau_q, dtype=float)
        if np.isinf(var0):
            return q.copy(), np.broadcast_to(tau_q, q.shape).copy()
        denom = var0 + tau_q
        if np.any(denom == 0):
            raise DegenerateVarianceError("var0 + tau_q = 0")
        mean = (q * var0 + mean0 * tau_q) / denom
        var = np.broadcast_to(var0 * tau_q / denom, q.shape).copy()
        return mean, var

    return denoise


def uamp_solve(
    model: LinearModel,
    denoiser: SeparableDenoiser,
    variant: str = "v1",
    max_iter: int = 200,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray | float, int]:
    """Run UAMP on a linear model; returns (x_hat, tau_x, iterations).

    The denoiser returns posterior means and variances, so the variance
    recursion uses tau_x = posterior variance (equal to tau_q * g' for an MMSE
    denoiser).  Stops when the relative change of x_hat drops below tol.
    """
    if variant not in ("v1", "v2"):
        raise ValueError("variant must be 'v1' or 'v2'")
    if tol <= 0:
        raise ValueError("tol must be positive")
    tm = unitary_transform(model)
    M, N = tm.Phi.shape
    absPhi2 = np.abs(tm.Phi) ** 2
    lam = tm.lambda_vec
    inv_beta = 1.0 / model.beta

    x = np.zeros(N, dtype=complex)
    tau_x = np.ones(N) if variant == "v1" else 1.0
    s = np.zeros(M, dtype=complex)
    state = UampState(x_hat=x, tau_x=tau_x, s=s, iteration=0)

    for it in range(1, max_iter + 1):
        if variant == "v1":
            tau_p = absPhi2 @ state.tau_x
        else:
            tau_p = state.tau_x * lam
        p = tm.Phi @ state.x_hat - tau_p * state.s
        tau_s = 1.0 / (tau_p + inv_beta)
        s = tau_s * (tm.r - p)
        if variant == "v1":
            tau_q = _clip_var(1.0 / np.maximum(absPhi2.T @ tau_s, 1.0 / VAR_CEIL))
        else:
            tau_q = _clip_var(N / max(lam @ tau_s, 1.0 / VAR_CEIL))
        q = state.x_hat + tau_q * (tm.Phi.conj().T @ s)
        x_new, var = denoiser(q, tau_q if variant == "v1" else np.full(N, tau_q))
        tau_new = _clip_var(var) if variant == "v1" else float(_clip_var(np.mean(var)))

        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(s))):
            raise DivergenceError("UAMP produced non-finite values", last_state=state)
        delta = np.linalg.norm(x_new - state.x_hat)
        ref = np.linalg.norm(state.x_hat)
        state = UampState(x_hat=x_new, tau_x=tau_new, s=s, iteration=it)
        if delta == 0.0 or (ref > 0 and delta / ref <= tol):
            break
    return state.x_hat, state.tau_x, state.iteration
