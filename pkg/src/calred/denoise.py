"""Denoisers used as reconstruction priors.

Native denoisers (identity, Gaussian, TV proximal) run in-process and are
deterministic.  The ``external`` kind shells out to any program implementing
the file protocol::

    command <input.npy> <output.npy> <sigma>

where both arrays are 2-D little-endian float32 NPY v1.0 files of identical
shape and the process exits 0 on success.

``sigma`` follows a 0-255 intensity convention (the noise standard deviation
the denoiser targets on a 0-255 scale).  For the native kinds it maps onto
concrete parameters through documented linear rules:

* Gaussian kernel standard deviation: ``sigma / 10`` pixels.
* TV weight: ``0.5 * sigma / 255``.
"""

from __future__ import annotations

import math
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "DenoiserSpec",
    "DenoiseResult",
    "ExternalDenoiserError",
    "denoise",
    "tv_prox",
    "red_penalty",
    "external_denoise",
]

KINDS = ("identity", "gaussian", "tv", "external")

TV_DUAL_STEP = 0.25
TV_DEFAULT_ITERS = 50


class ExternalDenoiserError(RuntimeError):
    """External denoiser failure with a machine-readable reason.

    ``reason`` is one of ``"nonzero_exit"``, ``"timeout"``,
    ``"missing_output"``, ``"bad_output"``.
    """

    def __init__(self, reason: str, detail: str):
        super().__init__(f"external denoiser failed ({reason}): {detail}")
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class DenoiserSpec:
    """Configuration for one denoiser instance.

    Explicit ``tv_weight`` / ``gaussian_std`` override the sigma-derived
    defaults.  ``command`` is the argv prefix for the external protocol.
    """

    kind: str = "identity"
    sigma: float = 10.0
    gaussian_std: float | None = None
    tv_weight: float | None = None
    tv_iters: int = TV_DEFAULT_ITERS
    command: tuple[str, ...] = field(default_factory=tuple)
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown denoiser kind: {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.tv_iters < 1:
            raise ValueError("tv_iters must be >= 1")
        if self.kind == "external" and not self.command:
            raise ValueError("external denoiser requires a command")

    @property
    def resolved_gaussian_std(self) -> float:
        if self.gaussian_std is not None:
            return self.gaussian_std
        return self.sigma / 10.0

    @property
    def resolved_tv_weight(self) -> float:
        if self.tv_weight is not None:
            return self.tv_weight
        return 0.5 * self.sigma / 255.0


@dataclass
class DenoiseResult:
    image: np.ndarray
    residual_norm: float


def _check_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    return x


# ----------------------------------------------------------------------
# TV proximal operator (Chambolle dual iterations, anisotropic TV)
# ----------------------------------------------------------------------
def _grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _div(px, py):
    # discrete divergence, the negated adjoint of _grad: <grad u, p> = -<u, div p>
    d = np.zeros_like(px)
    d[:, :-1] += px[:, :-1]
    d[:, 1:] -= px[:, :-1]
    d[:-1, :] += py[:-1, :]
    d[1:, :] -= py[:-1, :]
    return d


def tv_prox(x, tv_weight: float, iters: int = TV_DEFAULT_ITERS) -> np.ndarray:
    """Approximate prox of ``tv_weight * TV_aniso`` at ``x``.

    Semi-implicit Chambolle dual iterations with step 0.25; the dual
    normalization is per component (anisotropic ``|Dx|_1``).
    """
    x = _check_image(x)
    if tv_weight <= 0:
        raise ValueError("tv_weight must be > 0")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    px = np.zeros_like(x)
    py = np.zeros_like(x)
    for _ in range(iters):
        u = x + tv_weight * _div(px, py)
        gx, gy = _grad(u)
        px = (px + TV_DUAL_STEP * gx) / (1.0 + TV_DUAL_STEP * np.abs(gx))
        py = (py + TV_DUAL_STEP * gy) / (1.0 + TV_DUAL_STEP * np.abs(gy))
    return x + tv_weight * _div(px, py)


def tv_aniso(x) -> float:
    """Anisotropic total variation |Dx|_1 (forward differences)."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum())


# ----------------------------------------------------------------------
# dispatch
# ----------------------------------------------------------------------
def denoise(spec: DenoiserSpec, x) -> DenoiseResult:
    """Apply the denoiser described by ``spec``; deterministic per spec."""
    x = _check_image(x)
    if spec.kind == "identity":
        out = x.copy()
    elif spec.kind == "gaussian":
        out = gaussian_filter(x, spec.resolved_gaussian_std, mode="nearest")
    elif spec.kind == "tv":
        out = tv_prox(x, spec.resolved_tv_weight, spec.tv_iters)
    else:
        return external_denoise(spec, x)
    return DenoiseResult(image=out, residual_norm=float(np.linalg.norm(x - out)))


def red_penalty(x, spec: DenoiserSpec) -> float:
    """Induced prior value 0.5 * <x, x - D(x)> (unit regularization weight)."""
    x = _check_image(x)
    d = denoise(spec, x).image
    return 0.5 * float(np.vdot(x, x - d))


# ----------------------------------------------------------------------
# external protocol
# ----------------------------------------------------------------------
def external_denoise(spec: DenoiserSpec, x) -> DenoiseResult:
    """Run one round trip of the subprocess file protocol."""
    x = _check_image(x)
    x32 = np.ascontiguousarray(x, dtype=np.float32)
    with tempfile.TemporaryDirectory(prefix="calred-denoise-") as tmp:
        in_path = Path(tmp) / "input.npy"
        out_path = Path(tmp) / "output.npy"
        with open(in_path, "wb") as fh:
            np.lib.format.write_array(fh, x32, version=(1, 0))
        argv = list(spec.command) + [str(in_path), str(out_path), _format_sigma(spec.sigma)]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=spec.timeout_s)
        except subprocess.TimeoutExpired:
            raise ExternalDenoiserError("timeout", f"no result within {spec.timeout_s}s")
        if proc.returncode != 0:
            tail = proc.stderr.decode("utf-8", "replace").strip()[-200:]
            raise ExternalDenoiserError(
                "nonzero_exit", f"exit code {proc.returncode}: {tail or 'no stderr'}"
            )
        if not out_path.exists():
            raise ExternalDenoiserError("missing_output", f"{out_path.name} was not written")
        try:
            out = np.load(out_path)
        except Exception as exc:  # malformed NPY
            raise ExternalDenoiserError("bad_output", f"unreadable NPY: {exc}")
        if out.shape != x.shape:
            raise ExternalDenoiserError(
                "bad_output", f"shape {out.shape} != expected {x.shape}"
            )
        if not np.all(np.isfinite(out)):
            raise ExternalDenoiserError("bad_output", "non-finite values in output")
    out = out.astype(np.float64)
    return DenoiseResult(image=out, residual_norm=float(np.linalg.norm(x - out)))


def _format_sigma(sigma: float) -> str:
    # decimal string, no exponent, stable across locales
    s = f"{sigma:.6f}".rstrip("0").rstrip(".")
    return s if s else "0"
