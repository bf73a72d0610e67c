"""Acceptance gate: one test per release criterion.

Each test prints a single PASS/FAIL line (written past the capture plugin so
it always appears in the run log) and then asserts.  The Monte-Carlo
criteria are fully deterministic: fixed seeds, fixed trial counts.
"""

import math
import sys
import time

import numpy as np

from uampmf import mf_engine
from uampmf.campaign import CampaignConfig, run_campaign
from uampmf.jnflsd import JnflsdConfig, run_jnflsd
from uampmf.metrics import compute_metrics, genie_bound, match_users
from uampmf.mf_engine import MatrixGaussianBelief
from uampmf.nearfield import (
    ArrayGeometry,
    generate_scene,
    steering_jacobian,
    steering_vector,
)
from uampmf.priors import bernoulli_gaussian_denoiser
from uampmf.uamp import LinearModel, uamp_solve


CRITERION_LINES: list[str] = []


def report(n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    CRITERION_LINES.append(line)
    sys.__stderr__.write(line + "\n")
    assert ok, line


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def test_criterion_1_message_oracles():
    """Closed-form posterior messages match explicit-inverse / Kronecker
    oracles on small random instances."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        M = int(rng.integers(2, 6))
        N = int(rng.integers(1, 6))
        L = int(rng.integers(1, 6))
        A_hat = crandn(rng, M, N)
        X_hat = crandn(rng, N, L)
        Y = crandn(rng, M, L)
        V_A = np.diag(rng.uniform(0.1, 1.0, N))
        U_X = np.diag(rng.uniform(0.1, 1.0, N))
        lam = float(rng.uniform(0.5, 5.0))
        qA = MatrixGaussianBelief(A_hat, np.eye(M), V_A)
        qX = MatrixGaussianBelief(X_hat, U_X, np.eye(L))

        # Signal-message oracle: the whitened model must reproduce the
        # explicit-inverse posterior mean and covariance of X.
        pm = mf_engine.build_x_pseudo_model(qA, Y, lam)
        W = pm.Phi.conj().T @ pm.Phi
        mean = np.linalg.solve(W, pm.Phi.conj().T @ pm.R)
        W_oracle = A_hat.conj().T @ A_hat + M * V_A
        cov = np.linalg.inv(W) / lam
        # Kronecker form of the same posterior, built independently.
        big = np.kron(np.eye(L), W_oracle)
        mean_kron = np.linalg.solve(big, (A_hat.conj().T @ Y).reshape(-1, order="F"))
        cov_kron = np.linalg.inv(big)[:N, :N] / lam
        worst = max(
            worst,
            np.linalg.norm(W - W_oracle) / np.linalg.norm(W_oracle),
            np.linalg.norm(mean.reshape(-1, order="F") - mean_kron)
            / max(np.linalg.norm(mean_kron), 1e-300),
            np.linalg.norm(cov - cov_kron) / np.linalg.norm(cov_kron),
        )

        # Mixing-message oracle, acting on A^H.
        pma = mf_engine.build_a_pseudo_model(qX, Y, lam)
        WA = pma.Phi.conj().T @ pma.Phi
        A_mean = np.linalg.solve(WA, pma.Phi.conj().T @ pma.R).conj().T
        WA_oracle = X_hat @ X_hat.conj().T + L * U_X
        A_oracle = Y @ X_hat.conj().T @ np.linalg.inv(WA_oracle)
        worst = max(
            worst,
            np.linalg.norm(WA - WA_oracle) / np.linalg.norm(WA_oracle),
            np.linalg.norm(A_mean - A_oracle)
            / max(np.linalg.norm(A_oracle), 1e-300),
        )

        # Noise-refit oracle: the residual statistic equals the expected
        # squared residual under the separable beliefs, assembled here from
        # first principles.
        B = A_hat.conj().T @ A_hat + np.trace(np.eye(M)).real * V_A
        e_res = (
            np.linalg.norm(Y) ** 2
            - 2 * np.real(np.trace(Y.conj().T @ A_hat @ X_hat))
            + np.trace(X_hat.conj().T @ B @ X_hat).real
            + L * np.trace(B @ U_X).real
        )
        C = mf_engine.residual_statistic(Y, qA, qX)
        worst = max(worst, abs(C - e_res) / abs(e_res))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 5.0
    report(1, ok, f"message oracles worst rel err {worst:.2e} "
                  f"(tol 1e-10), runtime {dt:.2f}s (< 5s)")


def test_criterion_2_whitening_identities():
    """Phi^H Phi and Phi^H R reproduce the un-whitened statistics."""
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        M = int(rng.integers(2, 9))
        N = int(rng.integers(1, 7))
        L = int(rng.integers(1, 7))
        A_hat = crandn(rng, M, N)
        X_hat = crandn(rng, N, L)
        Y = crandn(rng, M, L)
        V_A = np.diag(rng.uniform(0.05, 1.0, N))
        U_X = np.diag(rng.uniform(0.05, 1.0, N))
        qA = MatrixGaussianBelief(A_hat, np.eye(M), V_A)
        qX = MatrixGaussianBelief(X_hat, U_X, np.eye(L))
        pm = mf_engine.build_x_pseudo_model(qA, Y, 1.0)
        Wx = A_hat.conj().T @ A_hat + M * V_A
        sx = A_hat.conj().T @ Y
        pma = mf_engine.build_a_pseudo_model(qX, Y, 1.0)
        Wa = X_hat @ X_hat.conj().T + L * U_X
        sa = X_hat @ Y.conj().T
        worst = max(
            worst,
            np.linalg.norm(pm.Phi.conj().T @ pm.Phi - Wx) / np.linalg.norm(Wx),
            np.linalg.norm(pm.Phi.conj().T @ pm.R - sx)
            / max(np.linalg.norm(sx), 1e-300),
            np.linalg.norm(pma.Phi.conj().T @ pma.Phi - Wa) / np.linalg.norm(Wa),
            np.linalg.norm(pma.Phi.conj().T @ pma.R - sa)
            / max(np.linalg.norm(sa), 1e-300),
        )
    ok = worst <= 1e-9
    report(2, ok, f"whitening identities worst rel err {worst:.2e} (tol 1e-9)")


def test_criterion_3_jacobian_finite_differences():
    """Analytic steering derivatives vs central finite differences."""
    geom = ArrayGeometry.from_carrier(64, 30e9)
    rng = np.random.default_rng(2)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        d = float(rng.uniform(5.0, 70.0))
        t = float(rng.uniform(math.radians(30), math.radians(150)))
        e_d, e_t = steering_jacobian(geom, d, t)
        fd_d = (steering_vector(geom, d + h, t) - steering_vector(geom, d - h, t)) / (2 * h)
        fd_t = (steering_vector(geom, d, t + h) - steering_vector(geom, d, t - h)) / (2 * h)
        worst = max(
            worst,
            np.linalg.norm(e_d - fd_d) / max(np.linalg.norm(fd_d), 1.0),
            np.linalg.norm(e_t - fd_t) / max(np.linalg.norm(fd_t), 1.0),
        )
    ok = worst <= 1e-6
    report(3, ok, f"jacobian worst rel err {worst:.2e} (tol 1e-6)")


def test_criterion_4_sparse_recovery():
    """Sparse linear recovery: median NMSE over 50 trials at 50 dB SNR."""
    t0 = time.perf_counter()
    M, N, rho = 128, 256, 0.1
    nmses = []
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        A = crandn(rng, M, N) / math.sqrt(M)
        support = rng.random(N) < rho
        x = np.where(support, crandn(rng, N), 0.0)
        signal = A @ x
        nv = np.mean(np.abs(signal) ** 2) / 10 ** (50 / 10)
        y = signal + math.sqrt(nv) * crandn(rng, M)
        x_hat, _, _ = uamp_solve(
            LinearModel(A, y, 1.0 / nv), bernoulli_gaussian_denoiser(rho, 1.0)
        )
        nmses.append(
            10 * math.log10(
                np.linalg.norm(x_hat - x) ** 2 / np.linalg.norm(x) ** 2
            )
        )
    dt = time.perf_counter() - t0
    med = float(np.median(nmses))
    ok = med <= -35.0 and dt < 30.0
    report(4, ok, f"sparse recovery median NMSE {med:.1f} dB "
                  f"(<= -35 dB), runtime {dt:.1f}s (< 30s)")


def _desk_scale_trial(seed, snr_db, d_max=20.0):
    geom = ArrayGeometry.from_carrier(64, 30e9)
    scene = generate_scene(
        geom, 3, 100, (5.0, d_max), (30.0, 150.0), snr_db, seed=seed,
        min_separation=(5.0, 10.0),
    )
    cfg = JnflsdConfig(d_range=(5.0, d_max))
    result = run_jnflsd(scene.Y, geom, cfg)
    truth = [(u.d, u.theta) for u in scene.users]
    assignment = match_users(
        truth, result.locations, d_scale=d_max, theta_scale=np.deg2rad(120.0)
    )
    rec = compute_metrics(
        truth, scene.bits, result.locations, result.bits, assignment, seed=seed
    )
    return scene, rec


def test_criterion_5_desk_scale_localization():
    """K = 3, R = 64, L = 100, SNR 0 dB, 50 trials: mean distance NMSE and
    mean angle MSE against the stated thresholds."""
    t0 = time.perf_counter()
    nmse, amse = [], []
    for seed in range(50):
        _, rec = _desk_scale_trial(seed, 0.0)
        nmse.append(rec.nmse_distance)
        amse.append(rec.mse_angle_deg2)
    dt = time.perf_counter() - t0
    mean_nmse_db = 10 * math.log10(np.mean(nmse))
    mean_amse = float(np.mean(amse))
    ok = mean_nmse_db <= -25.0 and mean_amse <= 0.05 and dt < 120.0
    report(5, ok, f"distance NMSE {mean_nmse_db:.1f} dB (<= -25 dB), "
                  f"angle MSE {mean_amse:.4f} deg^2 (<= 0.05), "
                  f"runtime {dt:.0f}s (< 120s)")


def test_criterion_6_near_bound_detection():
    """Paired-seed SNR sweep: BER monotone in SNR and within a factor 2 of
    the genie bound at 0 and 4 dB."""
    snrs = (-4.0, 0.0, 4.0)
    ber, genie = {}, {}
    for snr in snrs:
        be = tb = ge = gt = 0
        for seed in range(50):
            scene, rec = _desk_scale_trial(seed, snr)
            be += rec.bit_errors
            tb += rec.total_bits
            e, t, _ = genie_bound(scene)
            ge += e
            gt += t
        ber[snr] = be / tb
        genie[snr] = ge / gt
    mono = ber[-4.0] >= ber[0.0] >= ber[4.0]
    near = all(
        ber[s] <= 2 * genie[s] for s in (0.0, 4.0)
    )
    detail = ", ".join(
        f"{s:+.0f}dB: ber {ber[s]:.2e} genie {genie[s]:.2e}" for s in snrs
    )
    ok = mono and near
    report(6, ok, f"monotone={mono}, within 2x genie at 0/4 dB={near} ({detail})")


def test_criterion_7_distance_field_degradation():
    """d_max sweep at SNR -4 dB: median distance NMSE degrades monotonically
    while the median angle MSE moves by less than 3 dB.  Medians are used
    because a handful of unresolvable frames dominate the means at this SNR."""
    cfg = CampaignConfig(
        snr_db=(-4.0,), d_max=(20.0, 40.0, 60.0), n_users=(3,),
        trials=50, master_seed=0,
    )
    import tempfile

    with tempfile.TemporaryDirectory() as td:
        _, _, rows = run_campaign(cfg, td)
    med_nmse, med_amse = [], []
    for dmax in cfg.d_max:
        sel = [r.record for r in rows if r.d_max == dmax and r.record is not None]
        med_nmse.append(float(np.median([m.nmse_distance for m in sel])))
        med_amse.append(float(np.median([m.mse_angle_deg2 for m in sel])))
    mono = med_nmse[0] < med_nmse[1] < med_nmse[2]
    spread_db = 10 * math.log10(max(med_amse) / min(med_amse))
    ok = mono and spread_db < 3.0
    report(7, ok, "median distance NMSE "
           + "/".join(f"{10 * math.log10(v):.1f}" for v in med_nmse)
           + f" dB (monotone={mono}), angle MSE spread {spread_db:.2f} dB (< 3)")


def test_criterion_8_campaign_determinism(tmp_path):
    """Reruns with the same master seed produce byte-identical CSVs."""
    cfg = CampaignConfig(
        snr_db=(5.0,), d_max=(20.0,), n_users=(2,), trials=2,
        master_seed=7, n_antennas=32, n_symbols=48,
        algorithm=JnflsdConfig(u_max=6, max_iter=40),
    )
    t1, s1, _ = run_campaign(cfg, tmp_path / "run1")
    t2, s2, _ = run_campaign(cfg, tmp_path / "run2")
    ok = (
        t1.read_bytes() == t2.read_bytes() and s1.read_bytes() == s2.read_bytes()
    )
    report(8, ok, "campaign rerun byte-identical CSV output")
