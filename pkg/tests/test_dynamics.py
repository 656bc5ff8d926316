import numpy as np
import pytest

from wiplab import dynamics as dyn
from wiplab.dynamics import ContactMode, WipParams, WipState


def oracle_stick_solve(beta, beta_dot, tau, pr):
    """Independent dense solve of the rolling-constrained 3x3 system in
    (phi_ddot, beta_ddot, traction)."""
    m_tot = pr.m_w + pr.m_p
    ml = pr.m_p * pr.l
    I_pl = pr.I_p + pr.m_p * pr.l ** 2
    c, s = np.cos(beta), np.sin(beta)
    A = np.array([
        [m_tot * pr.r, ml * c, -1.0],
        [pr.I_w, 0.0, pr.r],
        [ml * c * pr.r, I_pl, 0.0],
    ])
    b = np.array([ml * s * beta_dot ** 2, tau, -tau + pr.m_p * pr.g * pr.l * s])
    phi_dd, beta_dd, force = np.linalg.solve(A, b)
    return pr.r * phi_dd, phi_dd, beta_dd, force


class TestParams:
    def test_defaults_valid(self):
        WipParams()

    @pytest.mark.parametrize("field", ["m_w", "m_p", "r", "l", "I_w", "I_p", "g", "dt_phys"])
    def test_positive_required(self, field):
        with pytest.raises(ValueError):
            WipParams(**{field: 0.0})

    def test_negative_mu_rejected(self):
        with pytest.raises(ValueError):
            WipParams(mu=-0.1)

    def test_physics_rate(self, params):
        assert params.dt_phys == pytest.approx(1.0 / 400.0)


class TestPdTorque:
    def test_zero_velocity_error(self, params):
        assert dyn.pd_torque(2.5, 2.5, params) == 0.0

    def test_gain_three(self, params):
        assert dyn.pd_torque(1.0, 0.0, params) == pytest.approx(3.0)

    def test_saturation(self, params):
        assert dyn.pd_torque(100.0, 0.0, params) == pytest.approx(params.tau_max)
        assert dyn.pd_torque(-100.0, 0.0, params) == pytest.approx(-params.tau_max)


class TestStickForce:
    def test_static_equilibrium(self, params):
        assert dyn.solve_stick_force(WipState(), 0.0, params) == 0.0

    def test_unit_torque_frozen_value(self, params):
        # Oracle (dense solve) evaluated once and frozen; recomputed live too.
        got = dyn.solve_stick_force(WipState(), 1.0, params)
        assert got == pytest.approx(6.875, abs=1e-12)
        assert got == pytest.approx(oracle_stick_solve(0.0, 0.0, 1.0, params)[3], abs=1e-10)

    @pytest.mark.parametrize("p,p_dot,phi_dot", [(0, 0, 0), (1.3, -0.4, 7.0), (-2, 2, -3)])
    def test_upright_rest_pole_needs_no_force(self, params, p, p_dot, phi_dot):
        # tau = 0 and beta = beta_dot = 0: gravity term vanishes, so F = 0
        # regardless of the other coordinates (they do not enter the solve).
        state = WipState(p=p, p_dot=p_dot, phi_dot=phi_dot)
        assert dyn.solve_stick_force(state, 0.0, params) == 0.0

    def test_random_states_match_dense_solve(self, params, rng):
        for _ in range(200):
            beta = rng.uniform(-1.2, 1.2)
            beta_dot = rng.uniform(-5, 5)
            tau = rng.uniform(-10, 10)
            want = oracle_stick_solve(beta, beta_dot, tau, params)
            got = dyn.stick_accelerations(beta, beta_dot, tau, params)
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


class TestStep:
    def test_zero_friction_zero_traction(self):
        pr = WipParams(mu=0.0)
        state = WipState()
        force, mode = dyn.traction_force(state, 10.0, pr)
        assert force == 0.0
        assert mode is ContactMode.SLIP
        nxt = dyn.step(state, 10.0, pr)
        assert nxt.phi_dot > 0.0          # wheel spins up torque-limited
        # Note: the motor reaction torque on the pole causes a small axle
        # recoil even with zero traction; only the contact force is zero.
        for _ in range(50):
            f, _ = dyn.traction_force(nxt, 10.0, pr)
            assert f == 0.0
            nxt = dyn.step(nxt, 10.0, pr)

    def test_high_friction_stick_persists_4000_steps(self):
        pr = WipParams(mu=10.0)
        s = WipState()
        worst = 0.0
        for k in range(4000):
            a = 2.0 * np.sin(2 * np.pi * 0.5 * k * pr.dt_phys)
            s = dyn.step(s, a, pr)
            assert s.mode is ContactMode.STICK
            worst = max(worst, abs(s.p_dot - pr.r * s.phi_dot))
        assert worst <= 1e-9

    def test_energy_drift_below_one_percent(self):
        # Torque-free (k_d = 0) swing in stick mode over 10 s.
        pr = WipParams(mu=10.0, k_d=0.0)
        s = WipState(beta=0.3)
        e0 = dyn.total_energy(s, pr)
        for _ in range(4000):
            s = dyn.step(s, 0.0, pr)
            assert s.mode is ContactMode.STICK
            assert abs(dyn.total_energy(s, pr) - e0) < 0.01 * abs(e0)

    def test_traction_bound_random_rollouts(self, rng):
        for mu in (0.0, 0.3, 0.8, 1.5):
            pr = WipParams(mu=mu)
            bound = mu * pr.normal_force + 1e-9
            s = WipState(beta=rng.uniform(-0.3, 0.3))
            for _ in range(300):
                a = rng.uniform(-15, 15)
                force, _ = dyn.traction_force(s, a, pr)
                assert abs(force) <= bound
                s = dyn.step(s, a, pr)

    def test_mode_consistency_zero_friction(self, rng):
        pr = WipParams(mu=0.0)
        s = WipState(p_dot=0.5, beta=0.1)   # nonzero slip velocity
        for _ in range(100):
            a = rng.uniform(1.0, 10.0)
            force, mode = dyn.traction_force(s, a, pr)
            assert mode is ContactMode.SLIP or force == 0.0
            s = dyn.step(s, a, pr)

    def test_determinism(self):
        pr = WipParams(mu=0.7)
        s = WipState(p=0.1, p_dot=-0.2, phi=1.0, phi_dot=-2.0, beta=0.2, beta_dot=0.5,
                     mode=ContactMode.SLIP)
        a = 3.21
        first = dyn.step(s, a, pr)
        second = dyn.step(s, a, pr)
        assert first == second

    def test_nonfinite_state_raises(self):
        pr = WipParams()
        s = WipState(beta_dot=1e200)        # finite input, overflowing dynamics
        with pytest.raises(dyn.NonFiniteState):
            dyn.step(s, 0.0, pr)

    def test_scalar_and_batch_agree_bitwise(self, rng):
        pr = WipParams()
        B = 32
        phid = rng.normal(0, 5, B)
        stick = rng.random(B) < 0.5
        pd = np.where(stick, pr.r * phid, rng.normal(0, 1, B))
        args = (rng.normal(0, 0.2, B), pd, rng.normal(0, 2, B), phid,
                rng.normal(0, 0.4, B), rng.normal(0, 2, B), stick,
                rng.normal(0, 5, B), rng.uniform(0, 1.5, B))
        out = dyn.step_arrays(*args, pr)
        for i in range(B):
            pr_i = WipParams(mu=float(args[8][i]))
            st = WipState(*(float(args[j][i]) for j in range(6)),
                          mode=ContactMode.STICK if stick[i] else ContactMode.SLIP)
            nxt = dyn.step(st, float(args[7][i]), pr_i)
            assert np.array_equal([out[j][i] for j in range(6)], list(nxt.as_tuple()))


class TestSlipRatio:
    def test_pure_rolling(self, params):
        s = WipState(p_dot=1.0, phi_dot=10.0)
        assert dyn.slip_ratio(s, params) == 0.0

    def test_spinning_wheel(self, params):
        s = WipState(p_dot=0.0, phi_dot=10.0)
        assert dyn.slip_ratio(s, params) == pytest.approx(1.0 / (0.2 * np.pi))

    def test_sign_antisymmetry(self, params):
        s = WipState(p_dot=1.0, phi_dot=0.0)
        assert dyn.slip_ratio(s, params) == pytest.approx(-1.0 / (0.2 * np.pi))


class TestFrictionSign:
    def test_zero(self):
        assert dyn.friction_sign_estimate(0.0, 0.7) == 0.0

    def test_positive(self):
        assert dyn.friction_sign_estimate(1.2, 0.7) == pytest.approx(0.7)

    def test_negative(self):
        assert dyn.friction_sign_estimate(-0.3, 0.7) == pytest.approx(-0.7)
