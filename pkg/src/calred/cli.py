"""Command-line front end: phantom / simulate / reconstruct / eval.

Exit codes: 0 success, 1 usage error, 2 I/O failure, 3 solver abort,
4 external-denoiser failure.  Every data-producing command writes a JSON
manifest carrying the fully resolved configuration, input/output digests and
the seed, which is sufficient to re-run it bit-identically (wall-clock fields
excluded).  ``CALRED_THREADS`` caps internal parallelism; the built-in
operators are single-threaded, so any positive value is honored as-is.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, io, simkit, solvers
from .denoise import DenoiserSpec, ExternalDenoiserError
from .projector import ProjectorConfig
from .solvers import SolverAbort, SolverConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_SOLVER = 3
EXIT_EXTERNAL = 4

MIN_PHANTOM_N = 16


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _threads_cap() -> int | None:
    raw = os.environ.get("CALRED_THREADS")
    if raw is None:
        return None
    try:
        v = int(raw)
        if v < 1:
            raise ValueError
    except ValueError:
        print(f"warning: ignoring invalid CALRED_THREADS={raw!r}", file=sys.stderr)
        return None
    return v


def _manifest(command: str, config: dict, inputs: dict, outputs: dict, seed) -> dict:
    return {
        "tool": "calred",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(k): io.sha256_file(k) for k in inputs},
        "outputs": {str(k): io.sha256_file(k) for k in outputs},
        "seed": seed,
        "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "calred_threads": _threads_cap(),
    }


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_phantom(args) -> int:
    if args.n < MIN_PHANTOM_N:
        raise UsageError(f"--n must be >= {MIN_PHANTOM_N}")
    img = simkit.shepp_logan(args.n)
    io.write_npy_atomic(args.out, img)
    print(f"wrote {args.out}")
    return EXIT_OK


def _projector_cfg(args, n: int) -> ProjectorConfig:
    return ProjectorConfig(
        n=n,
        num_detectors=args.num_detectors,
        support_mask=args.support_mask,
        angle_derivative=args.angle_derivative,
    )


def cmd_simulate(args) -> int:
    image = io.read_npy_2d(args.image)
    if image.shape[0] != image.shape[1]:
        raise UsageError(f"image must be square, got {image.shape}")
    n = image.shape[0]
    pcfg = _projector_cfg(args, n)
    nominal = simkit.nominal_angles(args.num_angles)
    true = simkit.perturb_angles(nominal, args.angle_sd, args.seed)
    sino = simkit.synth_sinogram(image, true, args.input_snr, args.seed, pcfg)

    prefix = Path(args.out)
    sino_path = prefix.with_name(prefix.name + ".sino.npy")
    true_path = prefix.with_name(prefix.name + ".angles_true.csv")
    nom_path = prefix.with_name(prefix.name + ".angles_nominal.csv")
    man_path = prefix.with_name(prefix.name + ".manifest.json")
    io.write_npy_atomic(sino_path, sino)
    io.write_angles_csv_atomic(true_path, true)
    io.write_angles_csv_atomic(nom_path, nominal)
    config = {
        "image": str(args.image),
        "num_angles": args.num_angles,
        "angle_sd": args.angle_sd,
        "input_snr": "inf" if math.isinf(args.input_snr) else args.input_snr,
        "projector": asdict(pcfg),
    }
    io.write_json_atomic(
        man_path,
        _manifest("simulate", config, {args.image: None},
                  {sino_path: None, true_path: None, nom_path: None}, args.seed),
    )
    print(f"wrote {sino_path} {true_path} {nom_path} {man_path}")
    return EXIT_OK


_RECON_DEFAULTS = {
    "method": "fbp",
    "gamma_x": None,
    "gamma_theta": None,
    "tau_x": 0.0,
    "tau_theta": 0.0,
    "iterations": 100,
    "accelerate": True,
    "seed": 0,
    "denoiser": "identity",
    "sigma": 10.0,
    "tv_weight": None,
    "tv_iters": 50,
    "external_cmd": None,
    "timeout_s": 60.0,
    "num_detectors": None,
    "support_mask": "inscribed_disk",
    "angle_derivative": "weights",
    "n": None,
}


def _resolve_recon_config(args) -> dict:
    """Precedence: explicit flags > config file values > built-in defaults."""
    cfg = dict(_RECON_DEFAULTS)
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if args.no_accelerate:
        cfg["accelerate"] = False
    return cfg


def cmd_reconstruct(args) -> int:
    cfg = _resolve_recon_config(args)
    sino = io.read_npy_2d(args.sino)
    nominal = io.read_angles_csv(args.angles)
    if sino.shape[0] != nominal.size:
        raise UsageError(
            f"sinogram has {sino.shape[0]} rows but {nominal.size} nominal angles"
        )
    x_true = theta_true = None
    if args.gt_image is not None:
        x_true = io.read_npy_2d(args.gt_image)
    if args.gt_angles is not None:
        theta_true = io.read_angles_csv(args.gt_angles)

    n = cfg["n"]
    if n is None and x_true is not None:
        n = x_true.shape[0]
    if n is None:
        raise UsageError("--n is required (or supply --gt-image to infer it)")
    num_detectors = cfg["num_detectors"]
    if num_detectors is None:
        num_detectors = sino.shape[1]
    pcfg = ProjectorConfig(
        n=int(n),
        num_detectors=int(num_detectors),
        support_mask=cfg["support_mask"],
        angle_derivative=cfg["angle_derivative"],
    )
    command = tuple(cfg["external_cmd"].split()) if cfg["external_cmd"] else ()
    den = DenoiserSpec(
        kind=cfg["denoiser"],
        sigma=float(cfg["sigma"]),
        tv_weight=None if cfg["tv_weight"] is None else float(cfg["tv_weight"]),
        tv_iters=int(cfg["tv_iters"]),
        command=command,
        timeout_s=float(cfg["timeout_s"]),
    )
    scfg = SolverConfig(
        method=cfg["method"],
        gamma_x=cfg["gamma_x"],
        gamma_theta=cfg["gamma_theta"],
        tau_x=float(cfg["tau_x"]),
        tau_theta=float(cfg["tau_theta"]),
        denoiser=den,
        iterations=int(cfg["iterations"]),
        accelerate=bool(cfg["accelerate"]),
        seed=int(cfg["seed"]),
    )

    result = solvers.run(sino, nominal, scfg, pcfg, x_true=x_true, theta_true=theta_true)

    prefix = Path(args.out)
    img_path = prefix.with_name(prefix.name + ".image.npy")
    trace_path = prefix.with_name(prefix.name + ".trace.csv")
    man_path = prefix.with_name(prefix.name + ".manifest.json")
    io.write_npy_atomic(img_path, result.image)
    io.write_trace_csv_atomic(trace_path, result.trace)
    outputs = {img_path: None, trace_path: None}
    if scfg.method in solvers.CAL_METHODS:
        est_path = prefix.with_name(prefix.name + ".angles_est.csv")
        io.write_angles_csv_atomic(est_path, result.angles)
        outputs[est_path] = None
    inputs = {args.sino: None, args.angles: None}
    if args.gt_image is not None:
        inputs[args.gt_image] = None
    if args.gt_angles is not None:
        inputs[args.gt_angles] = None
    config_echo = dict(cfg)
    config_echo["n"] = int(n)
    config_echo["num_detectors"] = int(num_detectors)
    io.write_json_atomic(
        man_path, _manifest("reconstruct", config_echo, inputs, outputs, scfg.seed)
    )
    print(f"wrote {img_path} {trace_path} {man_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    img = io.read_npy_2d(args.image)
    ref = io.read_npy_2d(args.gt_image)
    if img.shape != ref.shape:
        raise UsageError(f"image shapes differ: {img.shape} vs {ref.shape}")
    v = simkit.snr_db(img, ref)
    print(f"snr_db={'inf' if math.isinf(v) else f'{v:.6f}'}")
    if (args.angles_est is None) != (args.angles_true is None):
        raise UsageError("--angles-est and --angles-true must be given together")
    if args.angles_est is not None:
        est = io.read_angles_csv(args.angles_est)
        true = io.read_angles_csv(args.angles_true)
        if est.size != true.size:
            raise UsageError(f"angle counts differ: {est.size} vs {true.size}")
        print(f"angle_rmse_deg={simkit.rmse_deg(est, true):.6f}")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------
def build_parser() -> _Parser:
    parser = _Parser(prog="calred", description="Tomographic reconstruction with angle calibration")
    parser.add_argument("--version", action="version", version=f"calred {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a Shepp-Logan phantom as NPY")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    def add_projector_flags(sp):
        sp.add_argument("--num-detectors", dest="num_detectors", type=int, default=None)
        sp.add_argument("--support-mask", dest="support_mask",
                        choices=["inscribed_disk", "full_square"], default=None)
        sp.add_argument("--angle-derivative", dest="angle_derivative",
                        choices=["weights", "smooth", "finite_difference"], default=None)

    p = sub.add_parser("simulate", help="synthesize a noisy sinogram from an image")
    p.add_argument("--image", required=True)
    p.add_argument("--num-angles", dest="num_angles", type=int, default=90)
    p.add_argument("--angle-sd", dest="angle_sd", type=float, default=0.0)
    p.add_argument("--input-snr", dest="input_snr", type=float, default=math.inf,
                   help="target sinogram SNR in dB; inf disables noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output path prefix")
    add_projector_flags(p)
    p.set_defaults(func=cmd_simulate, support_mask="inscribed_disk",
                   angle_derivative="weights")

    p = sub.add_parser("reconstruct", help="run a reconstruction method")
    p.add_argument("--method", choices=list(solvers.METHODS), default=None)
    p.add_argument("--sino", required=True)
    p.add_argument("--angles", required=True, help="nominal angles CSV")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--config", default=None, help="JSON config file (flags override it)")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--gamma-x", dest="gamma_x", type=float, default=None)
    p.add_argument("--gamma-theta", dest="gamma_theta", type=float, default=None)
    p.add_argument("--tau-x", dest="tau_x", type=float, default=None)
    p.add_argument("--tau-theta", dest="tau_theta", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--no-accelerate", dest="no_accelerate", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--denoiser", choices=["identity", "gaussian", "tv", "external"], default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--tv-weight", dest="tv_weight", type=float, default=None)
    p.add_argument("--tv-iters", dest="tv_iters", type=int, default=None)
    p.add_argument("--external-cmd", dest="external_cmd", default=None,
                   help="external denoiser command line prefix")
    p.add_argument("--timeout-s", dest="timeout_s", type=float, default=None)
    p.add_argument("--gt-image", dest="gt_image", default=None)
    p.add_argument("--gt-angles", dest="gt_angles", default=None)
    add_projector_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="print SNR (and angle RMSE) as key=value lines")
    p.add_argument("--image", required=True)
    p.add_argument("--gt-image", dest="gt_image", required=True)
    p.add_argument("--angles-est", dest="angles_est", default=None)
    p.add_argument("--angles-true", dest="angles_true", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverAbort as exc:
        print(f"solver abort: {exc}", file=sys.stderr)
        if isinstance(exc.cause, ExternalDenoiserError):
            return EXIT_EXTERNAL
        return EXIT_SOLVER
    except ExternalDenoiserError as exc:
        print(f"external denoiser failure: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
