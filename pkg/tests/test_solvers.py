import sys
import textwrap

import numpy as np
import pytest

from calred import (
    DenoiserSpec,
    Projector,
    ProjectorConfig,
    SolverAbort,
    SolverConfig,
    nesterov_q,
    nominal_angles,
    run,
    shepp_logan,
    snr_db,
    synth_sinogram,
)
from calred.solvers import SolverState, fista_x_step, lsm_x_step, red_x_step, theta_step


def make_setup(n=32, num_angles=10, seed=0):
    pcfg = ProjectorConfig(n=n)
    proj = Projector(pcfg)
    rng = np.random.default_rng(seed)
    from scipy.ndimage import gaussian_filter

    x_true = gaussian_filter(rng.standard_normal((n, n)), 2.0)
    ang = nominal_angles(num_angles)
    y = proj.forward_project(x_true, ang)
    return pcfg, proj, x_true, ang, y


def fresh_state(proj, x0, theta0):
    return SolverState(x=x0.copy(), s=x0.copy(), theta=theta0.copy(), u=theta0.copy())


# ----------------------------------------------------------------------
# acceleration sequence
# ----------------------------------------------------------------------
def test_nesterov_q_initial_values():
    assert nesterov_q(1) == 1.0
    assert abs(nesterov_q(2) - 1.618034) < 1e-6
    assert abs(nesterov_q(3) - 2.193527) < 1e-6


def test_nesterov_q_growth_bound():
    q_prev = 1.0
    for k in range(2, 10_001):
        q = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * q_prev * q_prev))
        assert q > q_prev
        assert q >= (k + 1) / 2.0
        q_prev = q


def test_nesterov_q_rejects_nonpositive():
    with pytest.raises(ValueError):
        nesterov_q(0)


# ----------------------------------------------------------------------
# theta_step
# ----------------------------------------------------------------------
def test_theta_step_zero_residual_at_nominal_is_stationary():
    pcfg, proj, x_true, ang, y = make_setup()
    cfg = SolverConfig(method="cal_lsm", tau_theta=0.0)
    st = fresh_state(proj, x_true, ang)
    theta_step(st, y, cfg, proj, ang, gamma_theta=1e-3)
    assert np.allclose(st.theta, ang, atol=1e-10)


def test_theta_step_penalty_dominated_limit_pulls_to_nominal():
    pcfg, proj, x_true, ang, y = make_setup()
    cfg = SolverConfig(method="cal_lsm", tau_theta=1e6)
    st = fresh_state(proj, x_true, ang)
    st.u = ang + np.random.default_rng(1).normal(0, 2.0, ang.shape)
    theta_step(st, y, cfg, proj, ang, gamma_theta=1e-6)
    assert np.max(np.abs(st.theta - ang)) < 1e-3


def test_theta_step_descends_on_single_perturbed_angle():
    pcfg, proj, x_true, ang, y = make_setup()
    start = ang.copy()
    start[3] += 1.0
    cfg = SolverConfig(method="cal_lsm", tau_theta=0.0, accelerate=False)
    st = fresh_state(proj, x_true, start)
    theta_step(st, y, cfg, proj, start, gamma_theta=1e-6)
    assert abs(st.theta[3] - ang[3]) < 1.0
    # untouched angles see zero residual rows and stay put
    mask = np.arange(ang.size) != 3
    assert np.allclose(st.theta[mask], ang[mask], atol=1e-9)


def test_theta_step_angle_locality_with_single_nonzero_residual_row():
    pcfg, proj, x_true, ang, y = make_setup()
    y_mod = y.copy()
    j = 4
    y_mod[j] += np.random.default_rng(99).standard_normal(y.shape[1])
    cfg = SolverConfig(method="cal_lsm", tau_theta=0.0)
    st = fresh_state(proj, x_true, ang)
    theta_step(st, y_mod, cfg, proj, ang, gamma_theta=1e-4)
    mask = np.arange(ang.size) != j
    assert np.array_equal(st.theta[mask], ang[mask])
    assert st.theta[j] != ang[j]


# ----------------------------------------------------------------------
# x-steps
# ----------------------------------------------------------------------
def test_red_x_step_fixed_point():
    # zero residual plus the identity denoiser: the update must return s itself
    pcfg, proj, x_true, ang, y = make_setup()
    cfg = SolverConfig(method="red", tau_x=0.5, denoiser=DenoiserSpec(kind="identity"))
    st = fresh_state(proj, x_true, ang)
    red_x_step(st, y, cfg, proj, gamma_x=1e-4)
    assert np.array_equal(st.x, x_true)


def test_red_x_step_identity_denoiser_equals_lsm_step():
    pcfg, proj, x_true, ang, y = make_setup()
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal(x_true.shape)
    cfg_red = SolverConfig(method="red", tau_x=0.8, denoiser=DenoiserSpec(kind="identity"))
    cfg_lsm = SolverConfig(method="lsm")
    st_red = fresh_state(proj, x0, ang)
    st_lsm = fresh_state(proj, x0, ang)
    red_x_step(st_red, y, cfg_red, proj, gamma_x=1e-4)
    lsm_x_step(st_lsm, y, cfg_lsm, proj, gamma_x=1e-4)
    assert np.array_equal(st_red.x, st_lsm.x)


def test_red_monotone_objective_with_safe_step():
    n = 64
    pcfg = ProjectorConfig(n=n)
    proj = Projector(pcfg)
    sl = shepp_logan(n)
    ang = nominal_angles(45)
    y = proj.forward_project(sl, ang)
    tau_x = 0.1
    lhat = proj.lipschitz_estimate(ang)
    cfg = SolverConfig(method="red", tau_x=tau_x,
                       denoiser=DenoiserSpec(kind="gaussian", sigma=10.0),
                       iterations=50, accelerate=False, gamma_x=0.9 / (lhat + tau_x))
    res = run(y, ang, cfg, pcfg)
    objs = [r.objective for r in res.trace]
    for a, b in zip(objs, objs[1:]):
        assert b <= a * (1 + 1e-12)


def test_fista_x_step_zero_weight_reduces_to_lsm():
    pcfg, proj, x_true, ang, y = make_setup()
    x0 = np.random.default_rng(4).standard_normal(x_true.shape)
    cfg_f = SolverConfig(method="fista", denoiser=DenoiserSpec(kind="tv", tv_weight=0.0))
    cfg_l = SolverConfig(method="lsm")
    st_f = fresh_state(proj, x0, ang)
    st_l = fresh_state(proj, x0, ang)
    fista_x_step(st_f, y, cfg_f, proj, gamma_x=1e-4)
    lsm_x_step(st_l, y, cfg_l, proj, gamma_x=1e-4)
    assert np.array_equal(st_f.x, st_l.x)


def test_fista_beats_fbp_on_noiseless_disk():
    n = 64
    pcfg = ProjectorConfig(n=n)
    proj = Projector(pcfg)
    c = (n - 1) / 2.0
    rows, cols = np.indices((n, n))
    disk = (((cols - c) ** 2 + (rows - c) ** 2) <= (n / 4) ** 2).astype(float)
    ang = nominal_angles(90)
    y = proj.forward_project(disk, ang)
    fbp_snr = snr_db(proj.fbp(y, ang), disk)
    cfg = SolverConfig(method="fista", denoiser=DenoiserSpec(kind="tv", tv_weight=0.05),
                       iterations=200)
    res = run(y, ang, cfg, pcfg, x_true=disk)
    assert res.trace[-1].snr_db >= fbp_snr


def test_fista_objective_monotone_non_accelerated():
    n = 48
    pcfg = ProjectorConfig(n=n)
    proj = Projector(pcfg)
    sl = shepp_logan(n)
    ang = nominal_angles(40)
    y = proj.forward_project(sl, ang)
    tv_weight = 0.2
    cfg = SolverConfig(method="fista", denoiser=DenoiserSpec(kind="tv", tv_weight=tv_weight),
                       iterations=50, accelerate=False)
    res = run(y, ang, cfg, pcfg)
    from calred.denoise import tv_aniso

    proj2 = Projector(pcfg)
    # track the composite objective along the trace images by re-running steps
    # cheaply: monotonicity of 0.5||y-Hx||^2 + w*TV(x) via stored objective plus
    # recomputed TV is not available from the trace alone, so recompute fully.
    objs = []
    x_prev = None
    cfg_probe = cfg
    state_images = []
    # re-run and capture iterates
    lhat = proj2.lipschitz_estimate(ang)
    gamma_x = 0.9 / lhat
    from calred.solvers import SolverState, fista_x_step

    st = SolverState(x=proj2.fbp(y, ang), s=proj2.fbp(y, ang), theta=ang.copy(), u=ang.copy())
    for k in range(50):
        fista_x_step(st, y, cfg_probe, proj2, gamma_x)
        objs.append(proj2.data_fidelity(st.x, y, ang) + tv_weight * tv_aniso(st.x))
    for a, b in zip(objs, objs[1:]):
        assert b <= a * (1 + 1e-10)


def test_lsm_zero_data_from_zero_init_stays_zero():
    n = 16
    pcfg = ProjectorConfig(n=n)
    proj = Projector(pcfg)
    ang = nominal_angles(12)
    y = np.zeros((12, proj.num_detectors))
    cfg = SolverConfig(method="lsm", iterations=10)
    res = run(y, ang, cfg, pcfg)
    assert np.all(res.image == 0.0)
    assert all(r.objective == 0.0 for r in res.trace)


def test_lsm_converges_on_well_covered_system():
    n = 16
    pcfg = ProjectorConfig(n=n)
    proj = Projector(pcfg)
    sl = shepp_logan(n)
    ang = nominal_angles(180)
    y = proj.forward_project(sl, ang)
    cfg = SolverConfig(method="lsm", iterations=2000)
    res = run(y, ang, cfg, pcfg)
    rel_resid = np.linalg.norm(y - proj.forward_project(res.image, ang)) / np.linalg.norm(y)
    assert rel_resid < 1e-2


def test_lsm_equals_red_with_identity_denoiser_and_zero_tau():
    pcfg, proj, x_true, ang, y = make_setup()
    base = dict(iterations=10, gamma_x=1e-4)
    res_l = run(y, ang, SolverConfig(method="lsm", **base), pcfg)
    res_r = run(y, ang, SolverConfig(method="red", tau_x=0.0,
                                     denoiser=DenoiserSpec(kind="gaussian"), **base), pcfg)
    assert np.array_equal(res_l.image, res_r.image)


# ----------------------------------------------------------------------
# run()
# ----------------------------------------------------------------------
def test_run_rejects_zero_iterations():
    with pytest.raises(ValueError):
        SolverConfig(method="cal_red", iterations=0)


def test_run_single_iteration_single_trace_row():
    pcfg, proj, x_true, ang, y = make_setup()
    cfg = SolverConfig(method="cal_red", iterations=1, gamma_theta=1e-5,
                       denoiser=DenoiserSpec(kind="identity"))
    res = run(y, ang, cfg, pcfg)
    assert len(res.trace) == 1
    assert res.trace[0].k == 1


def test_run_fbp_is_single_shot():
    pcfg, proj, x_true, ang, y = make_setup()
    res = run(y, ang, SolverConfig(method="fbp", iterations=100), pcfg, x_true=x_true)
    assert len(res.trace) == 1
    assert np.array_equal(res.image, proj.fbp(y, ang))
    assert res.trace[0].snr_db is not None


def test_run_trace_length_matches_iterations():
    pcfg, proj, x_true, ang, y = make_setup()
    cfg = SolverConfig(method="lsm", iterations=7)
    res = run(y, ang, cfg, pcfg)
    assert len(res.trace) == 7
    assert [r.k for r in res.trace] == list(range(1, 8))


def test_run_deterministic():
    pcfg, proj, x_true, ang, y = make_setup()
    cfg = SolverConfig(method="cal_fista", iterations=8, gamma_theta=1e-4,
                       denoiser=DenoiserSpec(kind="tv", tv_weight=0.05))
    a = run(y, ang, cfg, pcfg, x_true=x_true, theta_true=ang)
    b = run(y, ang, cfg, pcfg, x_true=x_true, theta_true=ang)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.angles, b.angles)
    for ra, rb in zip(a.trace, b.trace):
        assert ra.objective == rb.objective
        assert ra.snr_db == rb.snr_db
        assert ra.angle_rmse_deg == rb.angle_rmse_deg


def test_cal_with_zero_theta_step_is_bit_identical_to_uncal():
    pcfg, proj, x_true, ang, y = make_setup()
    den = DenoiserSpec(kind="tv", tv_weight=0.05)
    base = dict(iterations=10, denoiser=den)
    res_cal = run(y, ang, SolverConfig(method="cal_fista", gamma_theta=0.0, **base), pcfg)
    res_unc = run(y, ang, SolverConfig(method="fista", **base), pcfg)
    assert np.array_equal(res_cal.image, res_unc.image)
    assert np.array_equal(res_cal.angles, res_unc.angles)
    assert [r.objective for r in res_cal.trace] == [r.objective for r in res_unc.trace]


def test_non_cal_methods_keep_nominal_angles():
    pcfg, proj, x_true, ang, y = make_setup()
    for method in ("lsm", "fista", "red"):
        cfg = SolverConfig(method=method, iterations=3,
                           denoiser=DenoiserSpec(kind="identity"))
        res = run(y, ang, cfg, pcfg)
        assert np.array_equal(res.angles, ang)


def test_red_trace_records_penalty():
    pcfg, proj, x_true, ang, y = make_setup()
    cfg = SolverConfig(method="red", tau_x=0.1,
                       denoiser=DenoiserSpec(kind="gaussian", sigma=10.0), iterations=3)
    res = run(y, ang, cfg, pcfg)
    assert all(r.red_penalty is not None for r in res.trace)
    cfg_lsm = SolverConfig(method="lsm", iterations=3)
    assert all(r.red_penalty is None for r in run(y, ang, cfg_lsm, pcfg).trace)


def test_external_denoiser_failure_aborts_with_iteration_index(tmp_path):
    pcfg, proj, x_true, ang, y = make_setup()
    script = tmp_path / "fail.py"
    script.write_text("import sys; sys.exit(3)\n")
    den = DenoiserSpec(kind="external", command=(sys.executable, str(script)))
    cfg = SolverConfig(method="red", tau_x=0.5, denoiser=den, iterations=5)
    with pytest.raises(SolverAbort) as exc:
        run(y, ang, cfg, pcfg)
    assert exc.value.iteration == 1


def test_calibration_recovers_single_perturbed_angle():
    # small end-to-end sanity run: one angle off by 1 degree, noiseless data
    n = 32
    pcfg = ProjectorConfig(n=n, angle_derivative="smooth")
    proj = Projector(pcfg)
    sl = shepp_logan(n)
    nominal = nominal_angles(24)
    true = nominal.copy()
    true[5] += 1.0
    y = proj.forward_project(sl, true)
    cfg = SolverConfig(method="cal_fista", gamma_theta=0.5, iterations=150,
                       denoiser=DenoiserSpec(kind="tv", tv_weight=0.2))
    res = run(y, nominal, cfg, pcfg, theta_true=true)
    assert res.trace[-1].angle_rmse_deg < 0.25
