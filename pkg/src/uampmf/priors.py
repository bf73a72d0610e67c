"""Separable-prior denoisers and their hyper-parameter updates.

The sparsity-inducing prior is a hierarchical Gauss-Gamma: zero-mean complex
Gaussian with Gamma-distributed precision per element (or one shared precision
per row for common-support recovery).  A Bernoulli-Gaussian (spike-and-slab)
denoiser is included for testing sparse recovery with known statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

GAMMA_FLOOR = 1e-12
GAMMA_CEIL = 1e12
ENERGY_FLOOR = 1e-30


@dataclass(frozen=True)
class GaussGammaState:
    """Precision estimates and Gamma hyper-parameters (shape, scale)."""

    gamma: np.ndarray
    epsilon: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        if self.epsilon < 0 or self.eta < 0:
            raise ValueError("epsilon and eta must be nonnegative")


def gauss_gamma_denoise(Q, V_Q, state: GaussGammaState):
    """Element-wise Gauss-Gamma posterior plus precision re-estimation.

    Returns (X_hat, Xi, new_state) with
      Xi    = V_Q / (1 + gamma*V_Q)
      X_hat = Q   / (1 + gamma*V_Q)
      gamma <- (1 + eps) / (eta + Xi + |X_hat|^2), clipped for hygiene.
    """
    Q = np.asarray(Q)
    V_Q = np.asarray(V_Q, dtype=float)
    denom = 1.0 + state.gamma * V_Q
    Xi = V_Q / denom
    X_hat = Q / denom
    gamma = (1.0 + state.epsilon) / (state.eta + Xi + np.abs(X_hat) ** 2)
    gamma = np.clip(gamma, GAMMA_FLOOR, GAMMA_CEIL)
    return X_hat, Xi, replace(state, gamma=gamma)


def gauss_gamma_rowshared_denoise(Q, V_Q, state: GaussGammaState):
    """Common-support variant: one precision per row, with shape self-tuning.

    The element posterior uses Gamma = gamma * 1^T.  The row precisions are
    then refit from the mean row energy, and the shape parameter from the
    spread of the precisions:
      gamma_z = (eps + 1) / mean_l(|x_hat|^2 + xi)
      eps     = sqrt(log(mean gamma) - mean(log gamma))
    The sqrt argument is nonnegative by Jensen's inequality; tiny negative
    round-off is clamped to zero.
    """
    Q = np.asarray(Q)
    V_Q = np.asarray(V_Q, dtype=float)
    gamma_row = np.asarray(state.gamma, dtype=float).reshape(-1)
    if gamma_row.shape[0] != Q.shape[0]:
        raise ValueError("need one gamma per row")
    denom = 1.0 + gamma_row[:, None] * V_Q
    Xi = V_Q / denom
    X_hat = Q / denom
    energy = np.maximum(
        np.mean(np.abs(X_hat) ** 2 + Xi, axis=1), ENERGY_FLOOR
    )
    gamma_new = np.clip((state.epsilon + 1.0) / energy, GAMMA_FLOOR, GAMMA_CEIL)
    arg = np.log(np.mean(gamma_new)) - np.mean(np.log(gamma_new))
    assert arg >= -1e-12
    eps_new = float(np.sqrt(max(arg, 0.0)))
    return X_hat, Xi, replace(state, gamma=gamma_new, epsilon=eps_new)


def bernoulli_gaussian_denoise(Q, V_Q, sparsity_rate: float, signal_var: float):
    """Spike-and-slab posterior mean/variance for CN slabs.

    Prior per element: (1 - rho) * delta(x) + rho * CN(x; 0, v).  Returns
    (X_hat, Xi).
    """
    if not 0.0 < sparsity_rate <= 1.0:
        raise ValueError("sparsity_rate must be in (0, 1]")
    if signal_var <= 0:
        raise ValueError("signal_var must be positive")
    Q = np.asarray(Q)
    V_Q = np.maximum(np.asarray(V_Q, dtype=float), GAMMA_FLOOR)
    v = signal_var
    q2 = np.abs(Q) ** 2
    # Log evidence of the two mixture components under CN(q; 0, var + tau).
    log_on = -np.log(np.pi * (v + V_Q)) - q2 / (v + V_Q)
    log_off = -np.log(np.pi * V_Q) - q2 / V_Q
    if sparsity_rate == 1.0:
        pi_on = np.ones_like(V_Q)
    else:
        delta = (
            np.log(sparsity_rate) + log_on
            - (np.log1p(-sparsity_rate) + log_off)
        )
        pi_on = 1.0 / (1.0 + np.exp(-np.clip(delta, -700, 700)))
    m1 = Q * v / (v + V_Q)
    v1 = v * V_Q / (v + V_Q)
    X_hat = pi_on * m1
    Xi = pi_on * (v1 + np.abs(m1) ** 2) - np.abs(X_hat) ** 2
    return X_hat, np.maximum(Xi, 0.0)


def bernoulli_gaussian_denoiser(sparsity_rate: float, signal_var: float):
    """Bind the spike-and-slab parameters into a SeparableDenoiser callable."""

    def denoise(q, tau_q):
        return bernoulli_gaussian_denoise(q, tau_q, sparsity_rate, signal_var)

    return denoise
