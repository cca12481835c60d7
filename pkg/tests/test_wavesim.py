"""Simulator physics, the adjoint pair, and the failure paths.

Trace sample m holds the field at time (m+1)*dt (recording happens after
the update), so pick helpers label samples accordingly.
"""

import numpy as np
import pytest
from scipy.signal import hilbert

from tfwi import wavesim as ws


def envelope(traces):
    return np.abs(hilbert(traces, axis=0))


def peak_time(env_trace, dt):
    """Sub-sample envelope peak via parabolic interpolation."""
    k = int(env_trace.argmax())
    a, b, c = env_trace[k - 1], env_trace[k], env_trace[k + 1]
    return (k + 1 + 0.5 * (a - c) / (a - 2 * b + c)) * dt


def onset_time(env_trace, dt, frac=0.3):
    """First crossing of frac * max, linearly interpolated."""
    thr = frac * env_trace.max()
    k = int(np.argmax(env_trace >= thr))
    e0, e1 = env_trace[k - 1], env_trace[k]
    return (k + (thr - e0) / (e1 - e0)) * dt


def homogeneous(vel, n=70, dx=10.0):
    return ws.VelocityMap(np.full((n, n), vel), dx=dx)


class TestRicker:
    def test_peak_is_one(self):
        assert ws.ricker(0.08, 15.0, 0.08) == 1.0

    def test_polynomial_zero_crossing(self):
        t = 0.08 + 1.0 / (np.pi * 15.0 * np.sqrt(2.0))
        assert abs(ws.ricker(t, 15.0, 0.08)) < 1e-15

    def test_value_at_20ms(self):
        assert abs(ws.ricker(0.02, 15.0, 0.0) - (-0.31943995607776215)) < 1e-15

    def test_vectorized(self):
        t = np.linspace(0, 0.2, 50)
        y = ws.ricker(t, 15.0, 0.08)
        assert y.shape == (50,)
        assert np.isfinite(y).all()

    def test_bad_frequency(self):
        with pytest.raises(ValueError):
            ws.ricker(0.0, -1.0, 0.0)


class TestTypes:
    def test_velocity_range_enforced(self):
        with pytest.raises(ValueError):
            ws.VelocityMap(np.full((10, 10), 1000.0))
        with pytest.raises(ValueError):
            ws.VelocityMap(np.full((10, 10), 5000.0))

    def test_velocity_finite_enforced(self):
        g = np.full((10, 10), 3000.0)
        g[3, 3] = np.nan
        with pytest.raises(ValueError):
            ws.VelocityMap(g)

    def test_gather_validation(self):
        with pytest.raises(ValueError):
            ws.SeismicGather(np.zeros((3, 4)))
        bad = np.zeros((1, 4, 2))
        bad[0, 1, 1] = np.inf
        with pytest.raises(ValueError):
            ws.SeismicGather(bad)

    def test_geometry_defaults(self):
        g = ws.AcquisitionGeometry()
        assert g.num_sources == 5 and g.num_receivers == 70
        assert g.num_timesteps == 1000 and g.dt == 1e-3 and g.f_peak == 15.0
        assert list(g.source_cols) == [0, 17, 34, 52, 69]
        assert list(g.receiver_cols) == list(range(70))

    def test_geometry_bounds_checked(self):
        with pytest.raises(ValueError):
            ws.AcquisitionGeometry(width=70, source_cols=[70])
        with pytest.raises(ValueError):
            ws.AcquisitionGeometry(width=70, receiver_cols=[-1])


class TestForward:
    def test_default_output_shape(self):
        gather = ws.simulate_forward(homogeneous(3000.0), ws.AcquisitionGeometry())
        assert gather.shape == (5, 1000, 70)

    def test_first_arrivals_ten_velocity_offset_pairs(self):
        geom = ws.AcquisitionGeometry(num_sources=1, source_cols=[34])
        for vel in [2000.0, 2500.0, 3000.0, 3500.0, 4000.0]:
            env = envelope(ws.simulate_forward(homogeneous(vel), geom).traces[0])
            for rec in [14, 52]:
                offset = abs(rec - 34) * 10.0
                expect = offset / vel + geom.t0
                err = abs(peak_time(env[:, rec], geom.dt) - expect) / geom.dt
                assert err <= 2.0, f"v={vel} rec={rec}: {err:.2f} samples"

    def test_scaling_symmetry(self):
        # v*2 with dt, t0 halved and f doubled: same dimensionless system;
        # amp*4 compensates the dt^2 injection factor. Exact in floats.
        a = ws.AcquisitionGeometry(width=35, num_sources=1, source_cols=[17],
                                   num_receivers=35, num_timesteps=400, dt=1e-3)
        b = ws.AcquisitionGeometry(width=35, num_sources=1, source_cols=[17],
                                   num_receivers=35, num_timesteps=400, dt=5e-4,
                                   f_peak=30.0, t0=a.t0 / 2,
                                   source_amp=a.source_amp * 4)
        ta = ws.simulate_forward(homogeneous(2000.0, n=35), a).traces
        tb = ws.simulate_forward(homogeneous(4000.0, n=35), b).traces
        assert np.array_equal(ta, tb)

    def test_linear_in_source_amplitude(self):
        geom1 = ws.AcquisitionGeometry(num_sources=1, source_cols=[35],
                                       num_timesteps=300)
        geom3 = ws.AcquisitionGeometry(num_sources=1, source_cols=[35],
                                       num_timesteps=300,
                                       source_amp=3.0 * geom1.source_amp)
        t1 = ws.simulate_forward(homogeneous(3000.0), geom1).traces
        t3 = ws.simulate_forward(homogeneous(3000.0), geom3).traces
        rel = np.abs(t3 - 3.0 * t1).max() / np.abs(t1).max()
        assert rel < 1e-10

    def test_deterministic_and_thread_count_invariant(self):
        v = homogeneous(3000.0)
        geom = ws.AcquisitionGeometry(num_timesteps=200)
        a = ws.simulate_forward(v, geom).traces
        b = ws.simulate_forward(v, geom).traces
        c = ws.simulate_forward(v, geom, threads=3).traces
        assert np.array_equal(a, b)
        assert np.array_equal(a, c)

    def test_energy_decays_after_source_off(self):
        v = homogeneous(3000.0)
        geom = ws.AcquisitionGeometry(num_sources=1, source_cols=[35])
        setup = ws._Setup(v, geom)
        hp, wp = setup.c.shape
        hist = np.zeros((setup.nsub, hp, wp))
        ws._shot_forward(setup, geom, 0, history=hist)
        sw = geom.sponge_width
        interior = hist[:, ws.GHOST:ws.GHOST + 70, ws.GHOST + sw:ws.GHOST + sw + 70]
        energy = (interior ** 2).sum(axis=(1, 2))
        assert np.isfinite(energy).all()
        assert energy[-1] < 0.01 * energy.max()

    def test_refining_dx_dt_preserves_first_arrivals(self):
        coarse_g = ws.AcquisitionGeometry(width=70, num_sources=1, source_cols=[0],
                                          num_receivers=70, num_timesteps=400,
                                          dt=1e-3)
        fine_g = ws.AcquisitionGeometry(width=140, num_sources=1, source_cols=[0],
                                        num_receivers=140, num_timesteps=800,
                                        dt=5e-4)
        ec = envelope(ws.simulate_forward(homogeneous(3000.0), coarse_g).traces[0])
        ef = envelope(ws.simulate_forward(homogeneous(3000.0, n=140, dx=5.0),
                                          fine_g).traces[0])
        for rec in [10, 20, 30, 40]:
            diff = abs(onset_time(ec[:, rec], 1e-3) - onset_time(ef[:, 2 * rec], 5e-4))
            assert diff < 1e-3, f"rec {rec}: {diff * 1e3:.2f} ms"


class TestCFL:
    def test_max_dt_formula(self):
        assert abs(ws.cfl_max_dt(4500.0, 10.0) - np.sqrt(3 / 8) * 10 / 4500) < 1e-15
        # equivalent statement of the bound: v dt sqrt(2) / dx <= sqrt(3/4)
        dt = ws.cfl_max_dt(3000.0, 10.0)
        assert 3000.0 * dt * np.sqrt(2) / 10.0 <= np.sqrt(3 / 4) + 1e-12

    def test_violation_raises_with_max_dt(self):
        v = homogeneous(4400.0)
        geom = ws.AcquisitionGeometry(dt=2e-3, num_timesteps=100)
        with pytest.raises(ws.CFLError) as e:
            ws.simulate_forward(v, geom, allow_substep=False)
        assert "max stable dt" in str(e.value)
        assert f"{ws.cfl_max_dt(4400.0, 10.0):.3e}" in str(e.value)

    def test_substep_matches_fine_run_subsampled(self):
        # dt=2e-3 needs 2 substeps at 4400 m/s; the recorded traces must
        # equal a dt=1e-3 run sampled at every second step
        v = homogeneous(4400.0)
        sub = ws.simulate_forward(
            v, ws.AcquisitionGeometry(num_sources=1, source_cols=[35],
                                      dt=2e-3, num_timesteps=250))
        fine = ws.simulate_forward(
            v, ws.AcquisitionGeometry(num_sources=1, source_cols=[35],
                                      dt=1e-3, num_timesteps=500))
        assert np.array_equal(sub.traces[0], fine.traces[0][1::2])

    def test_substep_cap(self):
        v = homogeneous(4500.0)
        geom = ws.AcquisitionGeometry(dt=1.0, num_timesteps=10)
        with pytest.raises(ws.CFLError):
            ws.simulate_forward(v, geom)

    def test_blowup_detected(self, monkeypatch):
        monkeypatch.setattr(ws, "cfl_max_dt", lambda vmax, dx: 1.0)
        v = homogeneous(4500.0)
        geom = ws.AcquisitionGeometry(dt=5e-3, num_timesteps=200)
        with pytest.raises(ws.FieldBlowupError) as e:
            ws.simulate_forward(v, geom)
        assert "substep" in str(e.value)


class TestMisfit:
    def test_identical_is_zero(self):
        g = ws.simulate_forward(homogeneous(3000.0),
                                ws.AcquisitionGeometry(num_timesteps=50))
        assert ws.misfit(g, g) == 0.0

    def test_constant_offset(self):
        a = ws.SeismicGather(np.zeros((2, 10, 3)))
        b = ws.SeismicGather(np.full((2, 10, 3), 0.7))
        assert abs(ws.misfit(a, b) - 0.49) < 1e-15

    def test_two_sample_hand_value(self):
        a = ws.SeismicGather(np.array([1.0, 2.0]).reshape(1, 2, 1))
        b = ws.SeismicGather(np.array([0.5, -1.0]).reshape(1, 2, 1))
        assert abs(ws.misfit(a, b) - 4.625) < 1e-15

    def test_shape_mismatch(self):
        a = ws.SeismicGather(np.zeros((1, 5, 2)))
        b = ws.SeismicGather(np.zeros((1, 4, 2)))
        with pytest.raises(ValueError):
            ws.misfit(a, b)


@pytest.fixture(scope="module")
def small_setup():
    rng = np.random.default_rng(42)
    v = ws.VelocityMap(rng.uniform(2000.0, 4000.0, (30, 30)))
    geom = ws.AcquisitionGeometry(width=30, num_sources=2, num_receivers=30,
                                  num_timesteps=300, dt=1e-3)
    return rng, v, geom


class TestAdjoint:
    def test_adjoint_identity(self, small_setup):
        rng, v, geom = small_setup
        dv = rng.normal(size=(30, 30))
        dd = rng.normal(size=(2, 300, 30))
        lhs = np.sum(ws.born_forward(v, dv, geom).traces * dd)
        rhs = np.sum(dv * ws.adjoint_apply(v, ws.SeismicGather(dd), geom))
        assert abs(lhs - rhs) / abs(lhs) < 1e-6

    def test_zero_residual_zero_gradient(self, small_setup):
        _, v, geom = small_setup
        obs = ws.simulate_forward(v, geom)
        g = ws.adjoint_gradient(v, obs, geom)
        assert np.abs(g).max() == 0.0

    def test_directional_derivative(self, small_setup):
        rng, v, geom = small_setup
        obs = ws.simulate_forward(
            ws.VelocityMap(rng.uniform(2000.0, 4000.0, (30, 30))), geom)
        g = ws.adjoint_gradient(v, obs, geom)
        dv = rng.normal(size=(30, 30))
        h = 1.0
        jp = ws.misfit(ws.simulate_forward(ws.VelocityMap(v.grid + h * dv), geom), obs)
        jm = ws.misfit(ws.simulate_forward(ws.VelocityMap(v.grid - h * dv), geom), obs)
        fd = (jp - jm) / (2 * h)
        an = float(np.sum(g * dv))
        assert abs(fd - an) / abs(fd) < 1e-2

    def test_born_linearizes_forward(self, small_setup):
        rng, v, geom = small_setup
        dv = rng.normal(size=(30, 30))
        h = 0.5
        fp = ws.simulate_forward(ws.VelocityMap(v.grid + h * dv), geom).traces
        fm = ws.simulate_forward(ws.VelocityMap(v.grid - h * dv), geom).traces
        fd = (fp - fm) / (2 * h)
        born = ws.born_forward(v, dv, geom).traces
        rel = np.abs(fd - born).max() / np.abs(fd).max()
        assert rel < 1e-2

    def test_gradient_zero_outside_illumination(self):
        # 60 ms of recording cannot see a cell 350 m deep and back
        v = homogeneous(3000.0, n=40)
        geom = ws.AcquisitionGeometry(width=40, num_sources=1, source_cols=[0],
                                      num_receivers=1, receiver_cols=[5],
                                      num_timesteps=60, dt=1e-3)
        obs = ws.simulate_forward(homogeneous(3100.0, n=40), geom)
        g = ws.adjoint_gradient(v, obs, geom)
        deep = np.abs(g[35:, :]).max()
        assert deep < 1e-8 * np.abs(g).max()

    def test_gather_shape_checked(self, small_setup):
        _, v, geom = small_setup
        with pytest.raises(ValueError):
            ws.adjoint_apply(v, ws.SeismicGather(np.zeros((2, 299, 30))), geom)
