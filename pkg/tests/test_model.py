import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fphjb.model import (
    BoxSet,
    ControlBounds,
    InitialDistribution,
    ModelError,
    PvModel,
    PvParams,
    SdeParams,
    SolarGeometry,
    clear_sky_irradiance,
    constant_curve,
    lq_problem,
    lq_value,
    pv_diffusion,
    pv_drift,
    pv_power,
    pv_problem,
    pv_running_cost,
    pv_terminal_cost,
    synthetic_price_mean,
    synthetic_price_rate,
)


def geom_with_zenith(angle, day=100, tilt=0.2382 * math.pi, incl=None):
    return SolarGeometry(day, constant_curve(angle), None if incl is None else constant_curve(incl), tilt)


class TestClearSky:
    def test_sun_on_horizon_gives_zero(self):
        assert clear_sky_irradiance(3.0, geom_with_zenith(math.pi / 2)) == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize("day, expected", [(100, 1131.2), (9, 1214.1)])
    def test_overhead_sun(self, day, expected):
        # oracle: seasonal fit evaluated by hand, frozen to 0.1 W/m^2
        assert clear_sky_irradiance(12.0, geom_with_zenith(0.0, day)) == pytest.approx(expected, abs=0.05)

    def test_night_clamps_to_zero(self):
        assert clear_sky_irradiance(0.0, geom_with_zenith(2.5)) == 0.0


class TestPvPower:
    def test_zero_irradiance(self):
        assert pv_power(0.0, PvParams(), 12.0) == 0.0

    def test_flat_panel(self):
        params = PvParams(7500.0, 0.8, geom_with_zenith(0.0, tilt=0.0, incl=math.pi / 4))
        assert pv_power(1000.0, params, 12.0) == pytest.approx(6.0, rel=1e-12)

    def test_low_sun_is_finite_positive(self):
        params = PvParams(7500.0, 0.8, geom_with_zenith(0.0, incl=0.01))
        p = pv_power(500.0, params, 12.0)
        expected = 1e-6 * 7500 * 0.8 * math.sin(0.01 + 0.2382 * math.pi) / math.sin(0.01) * 500
        assert p == pytest.approx(expected, rel=1e-12) and p > 0

    def test_sun_below_horizon_returns_zero(self):
        params = PvParams(7500.0, 0.8, geom_with_zenith(0.0, incl=-0.1))
        assert pv_power(500.0, params, 12.0) == 0.0

    @given(st.floats(0, 1500), st.floats(0, 10))
    def test_linear_in_irradiance(self, irr, a):
        p = PvParams()
        assert pv_power(a * irr, p, 11.0) == pytest.approx(a * pv_power(irr, p, 11.0), rel=1e-9, abs=1e-12)


class TestDynamics:
    sde = SdeParams(theta_pi=constant_curve(70.0), theta_pi_rate=constant_curve(0.0))

    def test_drift_fixed_point_and_price(self):
        y = np.array([[self.sde.theta_z(10.0), 50.0, 2.0]])
        b = pv_drift(10.0, y, np.array([0.0]), self.sde)
        assert b[0, 0] == pytest.approx(0.0, abs=1e-15)
        assert b[0, 1] == pytest.approx(0.8, rel=1e-12)
        assert b[0, 2] == 0.0

    def test_drift_battery_component(self):
        b = pv_drift(10.0, np.array([[0.5, 70.0, 2.0]]), np.array([0.7]), self.sde)
        assert b[0, 2] == -0.7

    @given(st.floats(0.0, 24.0), st.floats(-2, 3), st.floats(-40, 220))
    def test_mean_reversion_sign(self, s, z, p):
        b = pv_drift(s, np.array([[z, p, 1.0]]), np.array([0.0]), self.sde)
        assert np.sign(b[0, 0]) == np.sign(self.sde.theta_z(s) - z)
        assert np.sign(b[0, 1]) == np.sign(70.0 - p)

    @pytest.mark.parametrize("z", [0.0, 1.0])
    def test_degenerate_csi_row(self, z):
        sig = pv_diffusion(12.0, np.array([[z, 80.0, 2.0]]), SdeParams())
        assert np.all(sig[0, 0] == 0.0)

    def test_diffusion_entries(self):
        sig = pv_diffusion(12.0, np.array([[0.5, 100.0, 2.0]]), SdeParams())
        assert np.allclose(np.diag(sig[0]), [0.05, 7.5, 0.2], rtol=1e-12)
        assert np.count_nonzero(sig[0] - np.diag(np.diag(sig[0]))) == 0


class TestRewards:
    model = PvModel()

    def test_zero_price(self):
        y = np.array([[0.6, 0.0, 2.0]])
        assert pv_running_cost(12.0, y, np.array([1.0]), self.model.pv)[0] == 0.0

    @pytest.mark.parametrize("u, expected", [(1.0, 80.0), (-1.0, -80.0)])
    def test_night(self, u, expected):
        y = np.array([[0.0, 80.0, 2.0]])
        assert pv_running_cost(0.0, y, np.array([u]), self.model.pv)[0] == pytest.approx(expected)

    @pytest.mark.parametrize("e, expected", [(0.0, 0.0), (2.0, 140.0), (4.0, 280.0)])
    def test_terminal(self, e, expected):
        assert pv_terminal_cost(np.array([[0.5, 60.0, e]]), 70.0)[0] == pytest.approx(expected)

    def test_default_terminal_price_is_price_mean_at_horizon(self):
        assert self.model.c_terminal == pytest.approx(synthetic_price_mean(24.0))

    def test_synthetic_rate_matches_centered_difference(self):
        h = 1e-5
        for s in np.linspace(0, 24, 13):
            fd = (synthetic_price_mean(s + h) - synthetic_price_mean(s - h)) / (2 * h)
            assert synthetic_price_rate(s) == pytest.approx(fd, rel=1e-6, abs=1e-8)

    @settings(max_examples=50)
    @given(st.floats(0, 24), st.lists(st.floats(-3, 3), min_size=6, max_size=6),
           st.floats(-1, 1), st.floats(-1, 1))
    def test_hamiltonian_affine_in_control(self, s, v, u1, u2):
        prob = pv_problem(self.model)
        y = np.array([[0.5 + 0.1 * v[0], 70 + 10 * v[1], 2 + v[2]]])
        p = np.array([v[3:]])
        h = lambda u: prob.hamiltonian(s, y, np.array([u]), p)[0]  # noqa: E731
        mid = h(0.5 * (u1 + u2))
        assert mid == pytest.approx(0.5 * (h(u1) + h(u2)), rel=1e-9, abs=1e-9)

    def test_pv_problem_is_flagged_affine(self):
        assert pv_problem(self.model).affine


class TestLq:
    def test_terminal_condition(self):
        y = np.linspace(-3, 3, 7)
        assert np.array_equal(lq_value(4.0, y, 0.5, 4.0), y**2)

    def test_value_at_start(self):
        assert lq_value(0.0, np.array([1.0]), 0.5, 4.0)[0] == pytest.approx(2.0)

    def test_feedback(self):
        prob = lq_problem(0.5)
        y = np.array([[3.0]])
        # v_y = 2y = 6; maximizer works in the negated frame, gradient -6
        assert prob.maximizer(0.0, y, np.array([[-6.0]]))[0] == pytest.approx(-3.0)

    @given(st.floats(-10, 10))
    def test_feedback_minimizes_pointwise(self, y):
        vy = 2 * y
        grid = np.linspace(-30, 30, 60001)
        best = grid[np.argmin(grid * vy + grid**2)]
        assert best == pytest.approx(-y, abs=1e-3)


class TestInvariants:
    def test_bounds(self):
        with pytest.raises(ModelError):
            ControlBounds(1.0, 2.0)

    def test_box(self):
        with pytest.raises(ModelError):
            BoxSet((1.0,), (0.0,))

    def test_geometry(self):
        with pytest.raises(ModelError):
            SolarGeometry(day_of_year=400)
        with pytest.raises(ModelError):
            SolarGeometry(tilt=2.0)

    def test_sde(self):
        with pytest.raises(ModelError):
            SdeParams(kappa_z=0.0)
        with pytest.raises(ModelError):
            SdeParams(sigma_ee=-0.1)

    def test_theta_z_range_checked(self):
        with pytest.raises(ModelError):
            PvModel(sde=SdeParams(theta_z=constant_curve(1.5)))

    def test_initial_variance_positive(self):
        with pytest.raises(ModelError):
            InitialDistribution((0.0,), (0.0,))
