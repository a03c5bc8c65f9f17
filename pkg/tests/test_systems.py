import numpy as np
import pytest

from diraclift import integrators, systems
from diraclift.systems import (ControlSignal, constraint_multipliers,
                               dynamics_rhs, hamiltonian,
                               nonconservative_power)

from conftest import rng


ALL_SYSTEMS = ["oscillator", "pendulum", "two_link"]


@pytest.fixture
def sysm(request, oscillator, pendulum, two_link):
    return {"oscillator": oscillator, "pendulum": pendulum,
            "two_link": two_link}[request.param]


def test_hamiltonian_oscillator(oscillator):
    assert hamiltonian(oscillator, [1.0], [0.0]) == pytest.approx(0.5)
    assert hamiltonian(oscillator, [0.0], [1.0]) == pytest.approx(0.5)


def test_hamiltonian_pendulum_offset(pendulum):
    assert hamiltonian(pendulum, [0.0, -pendulum.length], [0.0, 0.0]) == 0.0


def test_multipliers_at_rest(pendulum):
    lam = constraint_multipliers(pendulum, [0.0, -1.0], [0.0, 0.0], [0.0])
    assert lam[0] == pytest.approx(-pendulum.mass * pendulum.gravity
                                   / pendulum.length)


def test_multipliers_empty_for_unconstrained(oscillator):
    lam = constraint_multipliers(oscillator, [0.3], [0.2], [0.1])
    assert lam.shape == (0,)


def test_multipliers_centripetal():
    # uniform circular motion, no gravity, no damping: lambda L = -m v^2 / L
    sysm = systems.PendulumOnCircle(mass=1.3, length=0.7, gravity=0.0,
                                    damping=0.0)
    v = 1.9
    alpha = 0.6
    q = sysm.length * np.array([np.cos(alpha), np.sin(alpha)])
    tangent = np.array([-np.sin(alpha), np.cos(alpha)])
    p = sysm.mass * v * tangent
    lam = constraint_multipliers(sysm, q, p, np.zeros(1))
    assert lam[0] * sysm.length == pytest.approx(-sysm.mass * v ** 2
                                                 / sysm.length)


def test_dynamics_rhs_oscillator():
    sys0 = systems.DampedDrivenOscillator(mass=1.0, stiffness=1.0, damping=0.0)
    dq, dp = dynamics_rhs(sys0, [1.0], [0.0], 0.0, [0.0])
    assert dq[0] == 0.0 and dp[0] == -1.0
    sys1 = systems.DampedDrivenOscillator(mass=1.0, stiffness=1.0, damping=0.5)
    dq, dp = dynamics_rhs(sys1, [0.0], [1.0], 0.0, [0.0])
    assert dq[0] == 1.0 and dp[0] == -0.5


def test_constraint_rate_along_rollout(pendulum):
    g = rng(21)
    q, p = pendulum.sample_states(1, g, angle_range=1.5, omega_range=2.0)
    ctrl = ControlSignal("sinusoid", 1, amplitude=0.5, frequency=1.3)
    traj = integrators.generate_trajectories(pendulum, q, p, [ctrl], 300,
                                             0.005)[0]
    qdot = pendulum.velocity(traj.q, traj.p)
    dphi = np.einsum("kij,kj->ki", pendulum.constraint_jacobian(traj.q), qdot)
    assert np.max(np.abs(dphi)) <= 1e-8


def test_nonconservative_power_values(damped_oscillator):
    pc, pd = nonconservative_power(damped_oscillator, [0.4], [0.0], [0.7])
    assert pc == 0.0 and pd == 0.0
    sys1 = systems.DampedDrivenOscillator(mass=1.0, stiffness=1.0, damping=1.0)
    pc, pd = nonconservative_power(sys1, [0.0], [2.0], [0.0])
    assert pd == pytest.approx(4.0)


@pytest.mark.parametrize("kind", ALL_SYSTEMS)
def test_power_balance_along_rollout(kind):
    # dH/dt = pow_ctrl - pow_diss, via central differences on a fine rollout;
    # constant control keeps the zero-order hold exact between samples
    sysm = {
        "oscillator": systems.DampedDrivenOscillator(damping=0.5),
        "pendulum": systems.PendulumOnCircle(damping=0.4),
        "two_link": systems.TwoLinkPinned(damping1=0.3, damping2=0.2),
    }[kind]
    g = rng(33)
    q0, p0 = sysm.sample_states(1, g)
    ctrl = ControlSignal("constant", sysm.n_u, amplitude=0.6)
    dt = 5e-5
    traj = integrators.generate_trajectories(sysm, q0, p0, [ctrl], 200, dt,
                                             substeps=1)[0]
    H = hamiltonian(sysm, traj.q, traj.p)
    dH = (H[2:] - H[:-2]) / (2 * dt)
    pc, pd = nonconservative_power(sysm, traj.q[1:-1], traj.p[1:-1],
                                   traj.u[1:-1])
    assert np.max(np.abs(dH - (pc - pd))) <= 1e-6 * (1 + np.max(np.abs(dH)))


@pytest.mark.parametrize("sysm", ALL_SYSTEMS, indirect=True)
def test_model_consistency_finite_differences(sysm):
    g = rng(7)
    q, p = sysm.sample_states(100, g)
    h = 1e-6
    for i in range(q.shape[0]):
        qi = q[i]
        # potential gradient vs FD
        gv = sysm.potential_gradient(qi)
        for j in range(sysm.n_q):
            e = np.zeros(sysm.n_q)
            e[j] = h
            fd = (sysm.potential(qi + e) - sysm.potential(qi - e)) / (2 * h)
            assert gv[j] == pytest.approx(fd, rel=1e-5, abs=1e-6)
        # constraint Jacobian vs FD
        Jc = sysm.constraint_jacobian(qi)
        for j in range(sysm.n_q):
            e = np.zeros(sysm.n_q)
            e[j] = h
            fd = (sysm.constraints(qi + e) - sysm.constraints(qi - e)) / (2 * h)
            assert np.allclose(Jc[:, j], fd, rtol=1e-5, atol=1e-6)
        # mass matrix symmetric positive definite; energy quadratic form
        M = sysm.mass_matrix(qi)
        assert np.array_equal(M, M.T)
        assert np.all(np.linalg.eigvalsh(M) > 0)
        ke = hamiltonian(sysm, qi, p[i]) - sysm.potential(qi)
        qdot = sysm.velocity(qi, p[i])
        assert ke == pytest.approx(0.5 * qdot @ M @ qdot, rel=1e-10)
        # damping PSD
        x = g.normal(size=sysm.n_p)
        D = sysm.damping_matrix(qi)
        assert x @ D @ x >= -1e-12


@pytest.mark.parametrize("sysm", ALL_SYSTEMS, indirect=True)
def test_dissipated_power_nonnegative(sysm):
    g = rng(15)
    q, p = sysm.sample_states(200, g)
    u = g.normal(size=(200, sysm.n_u))
    _, pd = nonconservative_power(sysm, q, p, u)
    assert np.all(pd >= -1e-12)


@pytest.mark.parametrize("kind", ["pendulum", "two_link"])
def test_energy_conserved_without_losses(kind):
    if kind == "pendulum":
        sysm = systems.PendulumOnCircle(mass=1.0, length=1.0, gravity=9.81,
                                        damping=0.0)
    else:
        sysm = systems.TwoLinkPinned(mass1=1.0, mass2=0.6, gravity=9.81)
    g = rng(4)
    q0, p0 = sysm.sample_states(2, g)
    ctrls = [ControlSignal("zero", sysm.n_u) for _ in range(2)]
    trajs = integrators.generate_trajectories(sysm, q0, p0, ctrls, 1000, 1e-3,
                                              substeps=1)
    for tr in trajs:
        H = hamiltonian(sysm, tr.q, tr.p)
        assert np.max(np.abs(H - H[0])) <= 1e-8  # 1 unit of time


@pytest.mark.parametrize("sysm", ["pendulum", "two_link"], indirect=True)
def test_multipliers_cancel_constraint_acceleration(sysm):
    g = rng(8)
    q, p = sysm.sample_states(50, g)
    u = g.normal(size=(50, sysm.n_u))
    lam = constraint_multipliers(sysm, q, p, u)
    f = systems.applied_force(sysm, q, p, u)
    force = f + np.einsum("kij,ki->kj", sysm.constraint_jacobian(q), lam)
    qddot = sysm.velocity(q, force)
    qdot = sysm.velocity(q, p)
    d2phi = (np.einsum("kij,kj->ki", sysm.constraint_jacobian(q), qddot)
             + np.einsum("kij,kj->ki",
                         sysm.constraint_jacobian_dot(q, qdot), qdot))
    assert np.max(np.abs(d2phi)) <= 1e-9


def test_second_difference_of_phi_along_unprojected_rollout(pendulum):
    g = rng(12)
    q0, p0 = pendulum.sample_states(1, g, angle_range=1.2, omega_range=1.5)
    u = np.zeros(1)
    dt = 1e-3
    z = np.concatenate([q0[0], p0[0]])

    def f(s, t):
        dq, dp = dynamics_rhs(pendulum, s[:2], s[2:], t, u)
        return np.concatenate([dq, dp])

    states = [z]
    for k in range(100):
        states.append(integrators.rk4_step(f, states[-1], k * dt, dt))
    phi = np.array([pendulum.constraints(s[:2])[0] for s in states])
    d2 = (phi[2:] - 2 * phi[1:-1] + phi[:-2]) / dt ** 2
    assert np.max(np.abs(d2)) <= 1e-6


def test_control_signals_bounded_and_deterministic():
    for kind in ControlSignal.KINDS:
        sig = ControlSignal(kind, 2, amplitude=[0.5, 1.5], frequency=2.0,
                            hold=0.3, seed=5)
        ts = np.linspace(0.0, 3.0, 101)
        for t in ts:
            u = sig.evaluate(t)
            assert np.all(np.abs(u) <= np.array([0.5, 1.5]) + 1e-12)
    a = ControlSignal("piecewise", 1, amplitude=1.0, hold=0.25, seed=9)
    b = ControlSignal("piecewise", 1, amplitude=1.0, hold=0.25, seed=9)
    ts = np.arange(0, 40) * 0.1
    assert np.array_equal([a.evaluate(t) for t in ts],
                          [b.evaluate(t) for t in ts])
    # random access matches sequential access
    c = ControlSignal("piecewise", 1, amplitude=1.0, hold=0.25, seed=9)
    assert c.evaluate(3.9) == a.evaluate(3.9)
    assert c.evaluate(0.0) == a.evaluate(0.0)


def test_singular_gram_reported():
    sysm = systems.PendulumOnCircle()
    with pytest.raises(systems.SingularGramError):
        constraint_multipliers(sysm, [0.0, 0.0], [0.1, 0.1], [0.0])


def test_make_system_unknown_kind():
    with pytest.raises(ValueError, match="unknown system kind"):
        systems.make_system("nope")
