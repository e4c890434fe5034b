"""Experiment fabric: phantoms, perturbed angles, noisy sinograms, metrics.

Randomness contract
-------------------
Every randomized operation is a pure function of ``(inputs, seed)``.  Streams
are drawn from numpy's PCG64 generator; per-purpose substreams are derived
from the experiment seed with splitmix64 so that, e.g., angle noise and
sinogram noise are independent even when built from one seed:

    substream(seed, tag) = PCG64(splitmix64(splitmix64(seed) ^ tag))

Tags: angle perturbation = 0x5EED0001, sinogram noise = 0x5EED0002.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .projector import Projector, ProjectorConfig

__all__ = [
    "ExperimentSpec",
    "shepp_logan",
    "nominal_angles",
    "perturb_angles",
    "synth_sinogram",
    "snr_db",
    "rmse_deg",
    "substream",
]

ANGLE_STREAM_TAG = 0x5EED0001
NOISE_STREAM_TAG = 0x5EED0002

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def substream(seed: int, tag: int) -> np.random.Generator:
    """Deterministic per-purpose generator derived from a master seed."""
    child = _splitmix64(_splitmix64(int(seed) & _MASK64) ^ (tag & _MASK64))
    return np.random.Generator(np.random.PCG64(child))


@dataclass(frozen=True)
class ExperimentSpec:
    """One simulated acquisition: geometry, angle noise, measurement noise."""

    n: int = 128
    num_angles: int = 90
    angle_noise_sd_deg: float = 0.0
    input_snr_db: float = math.inf  # inf = no measurement noise
    seed: int = 0

    def __post_init__(self):
        if self.num_angles < 1:
            raise ValueError("num_angles must be >= 1")
        if self.angle_noise_sd_deg < 0:
            raise ValueError("angle_noise_sd_deg must be >= 0")


# ----------------------------------------------------------------------
# phantom
# ----------------------------------------------------------------------
# modified Shepp-Logan ellipse table (Toft parameterization):
# (additive value, semi-axis a, semi-axis b, x0, y0, rotation phi in degrees)
_SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def shepp_logan(n: int) -> np.ndarray:
    """Modified Shepp-Logan phantom on an ``(n, n)`` grid, values in [0, 1].

    Pixel centers sample the square [-1, 1]^2 at ``(2j + 1 - n) / n`` so a
    2x block mean of the ``2n`` phantom lands exactly on the ``n`` grid.
    """
    if n < 16:
        raise ValueError(f"phantom size must be >= 16, got {n}")
    coords = (2.0 * np.arange(n) + 1.0 - n) / n
    X, Y = np.meshgrid(coords, -coords)
    img = np.zeros((n, n))
    for val, a, b, x0, y0, phi in _SHEPP_LOGAN_ELLIPSES:
        c, s = math.cos(math.radians(phi)), math.sin(math.radians(phi))
        xr = (X - x0) * c + (Y - y0) * s
        yr = -(X - x0) * s + (Y - y0) * c
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return np.maximum(img, 0.0)  # clear float residue where values cancel


def nominal_angles(num_angles: int) -> np.ndarray:
    """Evenly spaced half-circle angles [0, 180), degrees."""
    if num_angles < 1:
        raise ValueError("num_angles must be >= 1")
    return np.linspace(0.0, 180.0, num_angles, endpoint=False)


# ----------------------------------------------------------------------
# measurement synthesis
# ----------------------------------------------------------------------
def perturb_angles(nominal_deg, sd_deg: float, seed: int) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise of the given SD to each angle."""
    nominal = np.asarray(nominal_deg, dtype=np.float64)
    if sd_deg < 0:
        raise ValueError("sd_deg must be >= 0")
    if sd_deg == 0:
        return nominal.copy()
    rng = substream(seed, ANGLE_STREAM_TAG)
    return nominal + rng.normal(0.0, sd_deg, nominal.shape)


def synth_sinogram(x, angles_true_deg, input_snr_db: float, seed: int,
                   cfg: ProjectorConfig) -> np.ndarray:
    """Project ``x`` at the true angles and add noise at exactly the target
    input SNR (the sampled noise vector is rescaled, so the measured SNR
    matches the target to float precision).  ``input_snr_db = inf`` skips
    the noise entirely."""
    proj = Projector(cfg)
    clean = proj.forward_project(x, angles_true_deg)
    signal = float(np.linalg.norm(clean))
    if signal == 0.0:
        raise ValueError("zero projection data: input SNR is undefined")
    if math.isinf(input_snr_db):
        return clean
    rng = substream(seed, NOISE_STREAM_TAG)
    e = rng.standard_normal(clean.shape)
    e *= signal / float(np.linalg.norm(e)) * 10.0 ** (-input_snr_db / 20.0)
    return clean + e


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------
def snr_db(xhat, x) -> float:
    """10 log10(||x||^2 / ||x - xhat||^2); +inf when xhat equals x exactly."""
    xhat = np.asarray(xhat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if xhat.shape != x.shape:
        raise ValueError(f"shape mismatch: {xhat.shape} vs {x.shape}")
    ref = float(np.vdot(x, x))
    if ref == 0.0:
        raise ValueError("reference image is identically zero")
    err = float(np.vdot(x - xhat, x - xhat))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(ref / err)


def rmse_deg(theta_hat_deg, theta_deg) -> float:
    """Root-mean-square angular deviation in degrees."""
    a = np.asarray(theta_hat_deg, dtype=np.float64)
    b = np.asarray(theta_deg, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError(f"angle sets must be equal-length 1-D, got {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))
