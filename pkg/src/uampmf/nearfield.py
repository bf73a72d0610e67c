"""Near-field array physics and the uplink communication model.

Uniform linear array with spherical-wavefront (angle-distance) steering
vectors, their analytic derivatives, scene generation with differential PSK
modulation and SNR-calibrated noise, plus scene (de)serialization.

Conventions: angles are radians internally (degrees only at external
interfaces); distances are meters; the reference antenna is element 1, so the
first steering entry is always 1.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

SPEED_OF_LIGHT = 299_792_458.0

# Gray-coded phase indices for D-PSK alphabets of size 2, 4, 8.
_GRAY_ORDERS = {
    2: [0, 1],
    4: [0, 1, 3, 2],
    8: [0, 1, 3, 2, 6, 7, 5, 4],
}


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform linear array: element count, wavelength and spacing."""

    n_antennas: int
    wavelength: float
    spacing: float | None = None

    def __post_init__(self):
        if self.n_antennas < 2:
            raise ConfigurationError("need at least 2 antennas")
        if self.wavelength <= 0:
            raise ConfigurationError("wavelength must be positive")
        if self.spacing is None:
            object.__setattr__(self, "spacing", self.wavelength / 2)
        if self.spacing <= 0:
            raise ConfigurationError("spacing must be positive")

    @classmethod
    def from_carrier(cls, n_antennas: int, carrier_hz: float, spacing: float | None = None):
        return cls(n_antennas, SPEED_OF_LIGHT / carrier_hz, spacing)

    @property
    def offsets(self) -> np.ndarray:
        """Element offsets from the reference antenna (first entry 0)."""
        return np.arange(self.n_antennas) * self.spacing

    @property
    def aperture(self) -> float:
        return (self.n_antennas - 1) * self.spacing


def rayleigh_distance(geom: ArrayGeometry) -> float:
    """Near/far-field boundary 2*D^2/lambda for aperture D."""
    return 2.0 * geom.aperture**2 / geom.wavelength


def steering_vector(geom: ArrayGeometry, d: float, theta: float) -> np.ndarray:
    """Spherical-wavefront steering vector for a source at (d, theta).

    Entry r is exp(-j*2*pi/lambda * (sqrt(d^2 + b_r^2 + 2*d*b_r*cos(theta)) - d))
    with b_r the offset of element r.  All entries have unit modulus and the
    first is exactly 1.
    """
    b = geom.offsets
    excess = b * b + 2.0 * d * b * np.cos(theta)
    rho = np.sqrt(d * d + excess)
    # Path difference computed as excess / (rho + d) to avoid the
    # cancellation in rho - d when d dominates the aperture.
    return np.exp(-2j * np.pi / geom.wavelength * (excess / (rho + d)))


def steering_matrix(geom: ArrayGeometry, d: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Stack steering vectors for many (d, theta) pairs into columns."""
    d = np.asarray(d, dtype=float)[None, :]
    theta = np.asarray(theta, dtype=float)[None, :]
    b = geom.offsets[:, None]
    excess = b * b + 2.0 * d * b * np.cos(theta)
    rho = np.sqrt(d * d + excess)
    return np.exp(-2j * np.pi / geom.wavelength * (excess / (rho + d)))


def steering_jacobian(geom: ArrayGeometry, d: float, theta: float):
    """Partial derivatives of the steering vector w.r.t. distance and angle.

    Returns (e_d, e_theta).  With rho_r = sqrt(d^2 + b_r^2 + 2*d*b_r*cos(theta)):
      d a_r / d d     = a_r * (-j*2*pi/lambda) * ((d + b_r*cos(theta))/rho_r - 1)
      d a_r / d theta = a_r * ( j*2*pi/lambda) * d*b_r*sin(theta)/rho_r
    Both vanish at r = 1 where b_r = 0.
    """
    b = geom.offsets
    c = np.cos(theta)
    rho = np.sqrt(d * d + b * b + 2.0 * d * b * c)
    a = np.exp(-2j * np.pi / geom.wavelength * (rho - d))
    k = 2j * np.pi / geom.wavelength
    e_d = a * (-k) * ((d + b * c) / rho - 1.0)
    e_theta = a * k * (d * b * np.sin(theta) / rho)
    return e_d, e_theta


@dataclass(frozen=True)
class User:
    """Ground-truth transmitter: distance, angle (radians) and complex gain."""

    d: float
    theta: float
    gain: complex = 1.0 + 0.0j

    def __post_init__(self):
        if self.d <= 0:
            raise ConfigurationError("user distance must be positive")
        if not 0.0 < self.theta < math.pi:
            raise ConfigurationError("user angle must lie in (0, pi)")


# ---------------------------------------------------------------------------
# Differential PSK modulation


def gray_map_bits(bits: np.ndarray, order: int) -> np.ndarray:
    """Map a flat bit array to Gray-coded phase indices for a PSK of `order`."""
    bps = order.bit_length() - 1
    if order not in _GRAY_ORDERS:
        raise ConfigurationError(f"unsupported PSK order {order}")
    bits = np.asarray(bits).reshape(-1, bps)
    vals = np.zeros(len(bits), dtype=int)
    for i in range(bps):
        vals = (vals << 1) | bits[:, i]
    lut = np.array(_GRAY_ORDERS[order])
    return lut[vals]


def gray_unmap_indices(idx: np.ndarray, order: int) -> np.ndarray:
    """Inverse of :func:`gray_map_bits`: phase indices back to bits."""
    bps = order.bit_length() - 1
    inv = np.empty(order, dtype=int)
    inv[np.array(_GRAY_ORDERS[order])] = np.arange(order)
    vals = inv[np.asarray(idx)]
    bits = np.empty((len(vals), bps), dtype=int)
    for i in range(bps):
        bits[:, bps - 1 - i] = (vals >> i) & 1
    return bits.reshape(-1)


def differential_modulate(bits: np.ndarray, n_symbols: int, order: int = 4) -> np.ndarray:
    """Encode bits into a differential PSK symbol row of length `n_symbols`.

    The first symbol is the reference (1); each subsequent symbol carries
    log2(order) bits in its phase transition.
    """
    bps = order.bit_length() - 1
    bits = np.asarray(bits)
    if len(bits) != (n_symbols - 1) * bps:
        raise ConfigurationError("bit count does not match symbol count")
    idx = gray_map_bits(bits, order)
    phases = np.exp(2j * np.pi * idx / order)
    s = np.empty(n_symbols, dtype=complex)
    s[0] = 1.0
    s[1:] = np.cumprod(phases)
    return s


def differential_demodulate(x_row: np.ndarray, order: int = 4, rng=None):
    """Recover the transmitted bits from one (arbitrarily scaled) symbol row.

    Decides each transition from x_l * conj(x_{l-1}), which is invariant to any
    common complex scaling of the row.  A zero-magnitude previous symbol makes
    the transition undecidable; such positions get random bits and are flagged.

    Returns (bits, erasure_mask) where erasure_mask marks undecidable
    transitions (length L-1).
    """
    x = np.asarray(x_row)
    if x.ndim != 1 or len(x) < 2:
        raise ConfigurationError("need a 1-D row with at least 2 symbols")
    z = x[1:] * np.conj(x[:-1])
    erased = np.abs(x[:-1]) == 0.0
    idx = np.mod(np.round(np.angle(z) * order / (2 * np.pi)).astype(int), order)
    if erased.any():
        if rng is None:
            rng = np.random.default_rng(0)
        idx[erased] = rng.integers(0, order, size=int(erased.sum()))
    bits = gray_unmap_indices(idx, order)
    bps = order.bit_length() - 1
    return bits, np.repeat(erased, bps)


# ---------------------------------------------------------------------------
# Scene generation and serialization


@dataclass
class NearFieldScene:
    """Ground truth plus the observed matrix for one simulated frame."""

    geometry: ArrayGeometry
    users: list[User]
    bits: np.ndarray  # K x (L-1)*bps
    symbols: np.ndarray  # K x L, unit modulus
    X: np.ndarray  # K x L, gain * symbols
    Y: np.ndarray  # R x L
    noise_var: float
    snr_db: float
    modulation_order: int
    seed: int

    @property
    def A(self) -> np.ndarray:
        return steering_matrix(
            self.geometry,
            np.array([u.d for u in self.users]),
            np.array([u.theta for u in self.users]),
        )


def generate_scene(
    geom: ArrayGeometry,
    n_users: int,
    n_symbols: int,
    d_range: tuple[float, float],
    theta_range_deg: tuple[float, float],
    snr_db: float,
    modulation_order: int = 4,
    seed: int = 0,
    min_separation: tuple[float, float] | None = None,
    path_loss_gains: bool = False,
) -> NearFieldScene:
    """Draw a random scene and the corresponding noisy observation.

    Users are uniform over d_range x theta_range (degrees at this interface).
    ``min_separation = (min_dd, min_dtheta_deg)`` optionally enforces that each
    user pair is separated by at least one of the two margins.  Noise variance
    is calibrated so that ||A X||^2 / (R*K*L) / sigma^2 equals the requested
    SNR exactly.
    """
    if n_users < 1 or n_symbols < 2:
        raise ConfigurationError("need n_users >= 1 and n_symbols >= 2")
    d_lo, d_hi = d_range
    t_lo, t_hi = np.deg2rad(theta_range_deg[0]), np.deg2rad(theta_range_deg[1])
    if not (0 < d_lo <= d_hi) or not (0 <= t_lo <= t_hi <= math.pi):
        raise ConfigurationError("invalid d_range or theta_range")
    rng = np.random.default_rng(seed)

    ds, thetas = [], []
    for _ in range(n_users):
        for _attempt in range(10_000):
            d = rng.uniform(d_lo, d_hi)
            t = rng.uniform(t_lo, t_hi)
            if min_separation is None:
                break
            dd_min, dt_min = min_separation[0], np.deg2rad(min_separation[1])
            ok = all(
                abs(d - d0) >= dd_min or abs(t - t0) >= dt_min
                for d0, t0 in zip(ds, thetas)
            )
            if ok:
                break
        else:
            raise ConfigurationError("could not satisfy min_separation")
        ds.append(d)
        thetas.append(t)

    if path_loss_gains:
        mags = np.array([d_lo / d for d in ds])
    else:
        mags = np.ones(n_users)
    gains = mags * np.exp(2j * np.pi * rng.uniform(size=n_users))
    users = [User(d, t, g) for d, t, g in zip(ds, thetas, gains)]

    bps = modulation_order.bit_length() - 1
    bits = rng.integers(0, 2, size=(n_users, (n_symbols - 1) * bps))
    symbols = np.stack(
        [differential_modulate(bits[k], n_symbols, modulation_order) for k in range(n_users)]
    )
    X = gains[:, None] * symbols
    A = steering_matrix(geom, np.array(ds), np.array(thetas))
    AX = A @ X

    snr_lin = 10.0 ** (snr_db / 10.0)
    signal_power = np.linalg.norm(AX) ** 2 / (geom.n_antennas * n_users * n_symbols)
    noise_var = signal_power / snr_lin
    if np.isfinite(noise_var) and noise_var > 0:
        W = np.sqrt(noise_var / 2) * (
            rng.standard_normal(AX.shape) + 1j * rng.standard_normal(AX.shape)
        )
    else:
        noise_var = 0.0
        W = np.zeros_like(AX)
    return NearFieldScene(
        geometry=geom,
        users=users,
        bits=bits,
        symbols=symbols,
        X=X,
        Y=AX + W,
        noise_var=noise_var,
        snr_db=snr_db,
        modulation_order=modulation_order,
        seed=seed,
    )


def _write_complex_csv(path: Path, M: np.ndarray, name: str):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            [f"# {name}: {M.shape[0]}x{M.shape[1]} complex, columns interleaved re/im"]
        )
        w.writerow(
            [x for j in range(M.shape[1]) for x in (f"re{j}", f"im{j}")]
        )
        for row in M:
            w.writerow([f"{v:.17g}" for z in row for v in (z.real, z.imag)])


def _read_complex_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    header, data = rows[0], rows[1:]
    ncols = len(header) // 2
    out = np.empty((len(data), ncols), dtype=complex)
    for i, r in enumerate(data):
        vals = np.array([float(v) for v in r]).reshape(ncols, 2)
        out[i] = vals[:, 0] + 1j * vals[:, 1]
    return out


def save_scene(scene: NearFieldScene, path: str | Path):
    """Write a scene as a JSON metadata file plus sibling CSV matrix files."""
    path = Path(path)
    stem = path.with_suffix("")
    meta = {
        "format": "uampmf-scene-v1",
        "geometry": {
            "n_antennas": scene.geometry.n_antennas,
            "wavelength": scene.geometry.wavelength,
            "spacing": scene.geometry.spacing,
        },
        "users": [
            {"d": u.d, "theta_deg": math.degrees(u.theta),
             "gain_re": u.gain.real, "gain_im": u.gain.imag}
            for u in scene.users
        ],
        "snr_db": scene.snr_db,
        "noise_var": scene.noise_var,
        "modulation_order": scene.modulation_order,
        "seed": scene.seed,
        "bits": scene.bits.tolist(),
        "matrices": {
            "Y": stem.name + "_Y.csv",
            "X": stem.name + "_X.csv",
            "symbols": stem.name + "_S.csv",
        },
    }
    with open(path, "w") as f:
        json.dump(meta, f, indent=1)
    _write_complex_csv(stem.parent / meta["matrices"]["Y"], scene.Y, "Y")
    _write_complex_csv(stem.parent / meta["matrices"]["X"], scene.X, "X")
    _write_complex_csv(stem.parent / meta["matrices"]["symbols"], scene.symbols, "symbols")


def load_scene(path: str | Path) -> NearFieldScene:
    path = Path(path)
    with open(path) as f:
        meta = json.load(f)
    if meta.get("format") != "uampmf-scene-v1":
        raise ConfigurationError(f"unrecognized scene file: {path}")
    g = meta["geometry"]
    geom = ArrayGeometry(g["n_antennas"], g["wavelength"], g["spacing"])
    users = [
        User(u["d"], math.radians(u["theta_deg"]), complex(u["gain_re"], u["gain_im"]))
        for u in meta["users"]
    ]
    mats = {
        k: _read_complex_csv(path.parent / v) for k, v in meta["matrices"].items()
    }
    return NearFieldScene(
        geometry=geom,
        users=users,
        bits=np.array(meta["bits"], dtype=int),
        symbols=mats["symbols"],
        X=mats["X"],
        Y=mats["Y"],
        noise_var=meta["noise_var"],
        snr_db=meta["snr_db"],
        modulation_order=meta["modulation_order"],
        seed=meta["seed"],
    )
