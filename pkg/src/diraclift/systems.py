"""Benchmark constrained, dissipative, controlled mechanical systems.

All systems are expressed in Cartesian coordinates with explicit holonomic
constraints phi(q) = 0, so that the multiplier structure is non-trivial even
for desk-scale problems.  Every callback broadcasts over leading batch
dimensions of ``q`` / ``p``: vectors are ``(..., n)``, matrices ``(..., n, n)``.

The momentum-form equations of motion are

    dq/dt = M(q)^-1 p
    dp/dt = B(q) u - dV/dq - D(q) M^-1 p + J_c(q)^T lambda

with lambda chosen so that d^2 phi / dt^2 = 0 along the flow (the nonlinear
velocity terms C(q, qdot) vanish identically in these Cartesian coordinates).
"""

from __future__ import annotations

import numpy as np

from .errors import SingularGramError


def _mat_vec(A, v):
    """A @ v with A either a constant (n, m) matrix or batched (..., n, m)."""
    if A.ndim == 2:
        return np.einsum("ij,...j->...i", A, v)
    return np.einsum("...ij,...j->...i", A, v)


class MechanicalSystem:
    """Base class; subclasses fill in the physical callbacks.

    Attributes n_q, n_p, n_u, m give the configuration, momentum, control and
    constraint dimensions.  ``kind`` identifies the system in metadata files.
    """

    kind = "abstract"
    n_q = n_p = n_u = m = 0

    def mass_matrix(self, q):
        raise NotImplementedError

    def velocity(self, q, p):
        """M(q)^-1 p.  Default solves the mass matrix; subclasses override."""
        M = self.mass_matrix(q)
        if M.ndim == 2:
            return np.linalg.solve(M, np.asarray(p)[..., None])[..., 0]
        return np.linalg.solve(M, p[..., None])[..., 0]

    def potential(self, q):
        raise NotImplementedError

    def potential_gradient(self, q):
        raise NotImplementedError

    def damping_matrix(self, q):
        raise NotImplementedError

    def input_matrix(self, q):
        raise NotImplementedError

    def constraints(self, q):
        q = np.asarray(q)
        return np.zeros(q.shape[:-1] + (0,))

    def constraint_jacobian(self, q):
        q = np.asarray(q)
        return np.zeros(q.shape[:-1] + (0, self.n_q))

    def constraint_jacobian_dot(self, q, qdot, fd_step=1e-6):
        """d/dt J_c(q(t)) = directional derivative of J_c along qdot.

        Central finite differences by default; subclasses with analytic
        Jacobian rates override.
        """
        h = fd_step
        return (self.constraint_jacobian(q + h * qdot)
                - self.constraint_jacobian(q - h * qdot)) / (2.0 * h)

    def params(self):
        """Physical parameters as a flat dict, for metadata sidecars."""
        raise NotImplementedError


class DampedDrivenOscillator(MechanicalSystem):
    """1-dof mass-spring-damper with a direct force input; unconstrained."""

    kind = "damped_oscillator"
    n_q = n_p = n_u = 1
    m = 0

    def __init__(self, mass=1.0, stiffness=1.0, damping=0.0):
        self.mass = float(mass)
        self.stiffness = float(stiffness)
        self.damping = float(damping)
        self._M = np.array([[self.mass]])
        self._D = np.array([[self.damping]])
        self._B = np.array([[1.0]])

    def mass_matrix(self, q):
        return self._M

    def velocity(self, q, p):
        return np.asarray(p) / self.mass

    def potential(self, q):
        q = np.asarray(q)
        return 0.5 * self.stiffness * q[..., 0] ** 2

    def potential_gradient(self, q):
        return self.stiffness * np.asarray(q)

    def damping_matrix(self, q):
        return self._D

    def input_matrix(self, q):
        return self._B

    def params(self):
        return {"mass": self.mass, "stiffness": self.stiffness,
                "damping": self.damping}

    def sample_states(self, n, rng, q_range=1.0, p_range=1.0):
        """n random (q, p) pairs, uniform in the given symmetric ranges."""
        q = rng.uniform(-q_range, q_range, size=(n, 1))
        p = rng.uniform(-p_range, p_range, size=(n, 1))
        return q, p


class PendulumOnCircle(MechanicalSystem):
    """Point mass in the vertical plane constrained to a circle of radius L.

    phi(x) = (|x|^2 - L^2) / 2  (smooth, gradient = x), isotropic viscous
    damping, and a single torque input mapped to the tangential direction.
    The potential is offset so V = 0 at the hanging rest point (0, -L).
    """

    kind = "pendulum_on_circle"
    n_q = n_p = 2
    n_u = 1
    m = 1

    def __init__(self, mass=1.0, length=1.0, gravity=9.81, damping=0.0):
        self.mass = float(mass)
        self.length = float(length)
        self.gravity = float(gravity)
        self.damping = float(damping)
        self._M = self.mass * np.eye(2)
        self._D = self.damping * np.eye(2)

    def mass_matrix(self, q):
        return self._M

    def velocity(self, q, p):
        return np.asarray(p) / self.mass

    def potential(self, q):
        q = np.asarray(q)
        return self.mass * self.gravity * (q[..., 1] + self.length)

    def potential_gradient(self, q):
        q = np.asarray(q)
        g = np.zeros_like(q)
        g[..., 1] = self.mass * self.gravity
        return g

    def damping_matrix(self, q):
        return self._D

    def input_matrix(self, q):
        q = np.asarray(q)
        B = np.empty(q.shape[:-1] + (2, 1))
        B[..., 0, 0] = -q[..., 1] / self.length
        B[..., 1, 0] = q[..., 0] / self.length
        return B

    def constraints(self, q):
        q = np.asarray(q)
        r2 = q[..., 0] ** 2 + q[..., 1] ** 2
        return (0.5 * (r2 - self.length ** 2))[..., None]

    def constraint_jacobian(self, q):
        return np.asarray(q)[..., None, :]

    def constraint_jacobian_dot(self, q, qdot, fd_step=None):
        return np.asarray(qdot)[..., None, :]

    def params(self):
        return {"mass": self.mass, "length": self.length,
                "gravity": self.gravity, "damping": self.damping}

    def sample_states(self, n, rng, angle_range=2.0, omega_range=2.0):
        """n feasible states: angle from the hanging point, angular rate."""
        th = rng.uniform(-angle_range, angle_range, size=n)
        om = rng.uniform(-omega_range, omega_range, size=n)
        L = self.length
        q = np.stack([L * np.sin(th), -L * np.cos(th)], axis=-1)
        qdot = np.stack([L * om * np.cos(th), L * om * np.sin(th)], axis=-1)
        return q, self.mass * qdot


class TwoLinkPinned(MechanicalSystem):
    """Planar two-link chain of point masses in Cartesian coordinates.

    q = (x1, y1, x2, y2) with distance constraints |r1| = L1 and
    |r2 - r1| = L2.  Torque inputs act about the base pivot (on link 1) and
    about the absolute angle of link 2; joint damping resists the same two
    angular rates.  Stress test for m = 2 multiplier elimination.
    """

    kind = "two_link_pinned"
    n_q = n_p = 4
    n_u = 2
    m = 2

    def __init__(self, mass1=1.0, mass2=1.0, length1=1.0, length2=1.0,
                 gravity=9.81, damping1=0.0, damping2=0.0):
        self.mass1 = float(mass1)
        self.mass2 = float(mass2)
        self.length1 = float(length1)
        self.length2 = float(length2)
        self.gravity = float(gravity)
        self.damping1 = float(damping1)
        self.damping2 = float(damping2)
        self._M = np.diag([self.mass1, self.mass1, self.mass2, self.mass2])
        self._mdiag = np.array([self.mass1, self.mass1, self.mass2, self.mass2])

    def mass_matrix(self, q):
        return self._M

    def velocity(self, q, p):
        return np.asarray(p) / self._mdiag

    def potential(self, q):
        q = np.asarray(q)
        rest = self.mass1 * self.length1 + self.mass2 * (self.length1 + self.length2)
        return (self.mass1 * q[..., 1] + self.mass2 * q[..., 3]
                + rest) * self.gravity

    def potential_gradient(self, q):
        q = np.asarray(q)
        g = np.zeros_like(q)
        g[..., 1] = self.mass1 * self.gravity
        g[..., 3] = self.mass2 * self.gravity
        return g

    def _joint_axes(self, q):
        """Gradients of the two joint angles w.r.t. q; rows (..., 4)."""
        q = np.asarray(q)
        x1, y1 = q[..., 0], q[..., 1]
        dx, dy = q[..., 2] - x1, q[..., 3] - y1
        r1sq = x1 ** 2 + y1 ** 2
        dsq = dx ** 2 + dy ** 2
        g1 = np.stack([-y1 / r1sq, x1 / r1sq,
                       np.zeros_like(x1), np.zeros_like(x1)], axis=-1)
        g2 = np.stack([dy / dsq, -dx / dsq, -dy / dsq, dx / dsq], axis=-1)
        return g1, g2

    def damping_matrix(self, q):
        g1, g2 = self._joint_axes(q)
        return (self.damping1 * g1[..., :, None] * g1[..., None, :]
                + self.damping2 * g2[..., :, None] * g2[..., None, :])

    def input_matrix(self, q):
        g1, g2 = self._joint_axes(q)
        return np.stack([g1, g2], axis=-1)

    def constraints(self, q):
        q = np.asarray(q)
        x1, y1 = q[..., 0], q[..., 1]
        dx, dy = q[..., 2] - x1, q[..., 3] - y1
        return np.stack([
            0.5 * (x1 ** 2 + y1 ** 2 - self.length1 ** 2),
            0.5 * (dx ** 2 + dy ** 2 - self.length2 ** 2),
        ], axis=-1)

    def constraint_jacobian(self, q):
        q = np.asarray(q)
        x1, y1 = q[..., 0], q[..., 1]
        dx, dy = q[..., 2] - x1, q[..., 3] - y1
        z = np.zeros_like(x1)
        row1 = np.stack([x1, y1, z, z], axis=-1)
        row2 = np.stack([-dx, -dy, dx, dy], axis=-1)
        return np.stack([row1, row2], axis=-2)

    def constraint_jacobian_dot(self, q, qdot, fd_step=None):
        return self.constraint_jacobian(qdot)

    def params(self):
        return {"mass1": self.mass1, "mass2": self.mass2,
                "length1": self.length1, "length2": self.length2,
                "gravity": self.gravity,
                "damping1": self.damping1, "damping2": self.damping2}

    def sample_states(self, n, rng, angle_range=1.5, omega_range=1.5):
        th1 = rng.uniform(-angle_range, angle_range, size=n)
        th2 = rng.uniform(-angle_range, angle_range, size=n)
        om1 = rng.uniform(-omega_range, omega_range, size=n)
        om2 = rng.uniform(-omega_range, omega_range, size=n)
        L1, L2 = self.length1, self.length2
        r1 = np.stack([L1 * np.sin(th1), -L1 * np.cos(th1)], axis=-1)
        r2 = r1 + np.stack([L2 * np.sin(th2), -L2 * np.cos(th2)], axis=-1)
        v1 = np.stack([L1 * om1 * np.cos(th1), L1 * om1 * np.sin(th1)], axis=-1)
        v2 = v1 + np.stack([L2 * om2 * np.cos(th2), L2 * om2 * np.sin(th2)], axis=-1)
        q = np.concatenate([r1, r2], axis=-1)
        qdot = np.concatenate([v1, v2], axis=-1)
        return q, qdot * self._mdiag


class ControlSignal:
    """Deterministic control input u(t), bounded by its amplitude.

    kinds: 'zero', 'constant', 'sinusoid' (amp * sin(2 pi f t)), and
    'piecewise' (amplitude * uniform(-1, 1), redrawn every ``hold`` seconds
    from a seeded stream; random access is reproducible).
    """

    KINDS = ("zero", "constant", "sinusoid", "piecewise")

    def __init__(self, kind, n_u, amplitude=0.0, frequency=1.0, hold=0.5, seed=0):
        if kind not in self.KINDS:
            raise ValueError(f"unknown control kind {kind!r}")
        self.kind = kind
        self.n_u = int(n_u)
        self.amplitude = np.broadcast_to(
            np.asarray(amplitude, dtype=float), (self.n_u,)).copy()
        self.frequency = float(frequency)
        self.hold = float(hold)
        self.seed = int(seed)
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        self._table = np.empty((0, self.n_u))

    def _piece(self, idx):
        while self._table.shape[0] <= idx:
            draw = self._rng.uniform(-1.0, 1.0, size=(16, self.n_u))
            self._table = np.concatenate([self._table, draw], axis=0)
        return self._table[idx]

    def evaluate(self, t):
        if self.kind == "zero":
            return np.zeros(self.n_u)
        if self.kind == "constant":
            return self.amplitude.copy()
        if self.kind == "sinusoid":
            return self.amplitude * np.sin(2.0 * np.pi * self.frequency * t)
        idx = int(np.floor(t / self.hold + 1e-9))
        return self.amplitude * self._piece(idx)

    def spec(self):
        return {"kind": self.kind, "amplitude": self.amplitude.tolist(),
                "frequency": self.frequency, "hold": self.hold,
                "seed": self.seed}


def hamiltonian(sys, q, p):
    """H(q, p) = p^T M(q)^-1 p / 2 + V(q); defined off the constraint manifold too."""
    qdot = sys.velocity(q, p)
    return 0.5 * np.sum(np.asarray(p) * qdot, axis=-1) + sys.potential(q)


def applied_force(sys, q, p, u):
    """Non-constraint generalized force: B u - dV/dq - D qdot."""
    qdot = sys.velocity(q, p)
    return (_mat_vec(sys.input_matrix(q), u)
            - sys.potential_gradient(q)
            - _mat_vec(sys.damping_matrix(q), qdot))


def constraint_multipliers(sys, q, p, u):
    """Multipliers lambda enforcing d^2 phi/dt^2 = 0 along the dynamics.

    Solves (J_c M^-1 J_c^T) lambda = -J_c M^-1 f - (dJ_c/dt) qdot with
    f the applied force.  Raises SingularGramError on rank drop.
    """
    q = np.asarray(q)
    if sys.m == 0:
        return np.zeros(q.shape[:-1] + (0,))
    qdot = sys.velocity(q, p)
    f = applied_force(sys, q, p, u)
    Jc = sys.constraint_jacobian(q)
    Jct = np.swapaxes(Jc, -1, -2)
    M = sys.mass_matrix(q)
    Minv_Jct = np.linalg.solve(M, Jct)
    minv_f = np.linalg.solve(M, f[..., None])[..., 0]
    gram = np.einsum("...ij,...jk->...ik", Jc, Minv_Jct)
    rhs = (-np.einsum("...ij,...j->...i", Jc, minv_f)
           - np.einsum("...ij,...j->...i",
                       sys.constraint_jacobian_dot(q, qdot), qdot))
    try:
        lam = np.linalg.solve(gram, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularGramError(f"constraint Gram matrix singular: {exc}") from exc
    if not np.all(np.isfinite(lam)):
        raise SingularGramError("constraint Gram matrix numerically singular "
                                "(non-finite multipliers)")
    return lam


def dynamics_rhs(sys, q, p, t, u):
    """Momentum-form right-hand side (dq/dt, dp/dt); t kept for interface."""
    dq = sys.velocity(q, p)
    dp = applied_force(sys, q, p, u)
    if sys.m > 0:
        lam = constraint_multipliers(sys, q, p, u)
        dp = dp + np.einsum("...ij,...i->...j", sys.constraint_jacobian(q), lam)
    return dq, dp


def nonconservative_power(sys, q, p, u):
    """(control power, dissipated power); the latter is >= 0 for PSD damping."""
    qdot = sys.velocity(q, p)
    B = sys.input_matrix(q)
    if B.ndim == 2:
        bt_qdot = np.einsum("ij,...i->...j", B, qdot)
    else:
        bt_qdot = np.einsum("...ij,...i->...j", B, qdot)
    pow_ctrl = np.sum(np.asarray(u) * bt_qdot, axis=-1)
    D = sys.damping_matrix(q)
    if D.ndim == 2:
        pow_diss = np.einsum("...i,ij,...j->...", qdot, D, qdot)
    else:
        pow_diss = np.einsum("...i,...ij,...j->...", qdot, D, qdot)
    return pow_ctrl, pow_diss


SYSTEM_KINDS = {
    DampedDrivenOscillator.kind: DampedDrivenOscillator,
    PendulumOnCircle.kind: PendulumOnCircle,
    TwoLinkPinned.kind: TwoLinkPinned,
}


def make_system(kind, **params):
    """Instantiate a benchmark system by its kind string."""
    try:
        cls = SYSTEM_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown system kind {kind!r}; "
                         f"known: {sorted(SYSTEM_KINDS)}") from None
    return cls(**params)
