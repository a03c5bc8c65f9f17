import numpy as np
import pytest

from diraclift import geometry, integrators, systems


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture(scope="session")
def oscillator():
    return systems.DampedDrivenOscillator(mass=1.0, stiffness=1.0, damping=0.0)


@pytest.fixture(scope="session")
def damped_oscillator():
    return systems.DampedDrivenOscillator(mass=1.0, stiffness=1.0, damping=0.4)


@pytest.fixture(scope="session")
def pendulum():
    return systems.PendulumOnCircle(mass=1.0, length=1.0, gravity=9.81,
                                    damping=0.3)


@pytest.fixture(scope="session")
def two_link():
    return systems.TwoLinkPinned(mass1=1.0, mass2=0.6, length1=1.0, length2=0.8,
                                 gravity=9.81, damping1=0.15, damping2=0.25)


def make_dataset(sysm, n_traj, n_steps, dt=0.01, seed=0, substeps=5,
                 control=("zero", 0.0, 0.5), **ranges):
    """Small lifted dataset for tests: generate, then gauge-lift."""
    g = rng(seed)
    q0, p0 = sysm.sample_states(n_traj, g, **ranges)
    kind, amp, hold = control
    ctrls = [systems.ControlSignal(kind, sysm.n_u, amplitude=amp, hold=hold,
                                   seed=seed * 1000 + i)
             for i in range(n_traj)]
    trajs = integrators.generate_trajectories(sysm, q0, p0, ctrls, n_steps, dt,
                                              substeps=substeps)
    return trajs, [geometry.dirac_lift(tr, sysm) for tr in trajs]


@pytest.fixture(scope="session")
def pendulum_damped_dataset(pendulum):
    return make_dataset(pendulum, n_traj=10, n_steps=150, seed=3,
                        angle_range=1.8, omega_range=1.8)


@pytest.fixture(scope="session")
def oscillator_driven_dataset(damped_oscillator):
    return make_dataset(damped_oscillator, n_traj=8, n_steps=150, seed=5,
                        control=("piecewise", 0.8, 0.25),
                        q_range=1.0, p_range=1.0)
