"""Extended phase space, canonical form, Dirac gauge, and the analytic lift.

The lifted space attaches a clock pair (q0, p0) and one (lambda_a, pi_a) pair
per holonomic constraint to the original (q, p).  Throughout the package the
flattening order of a lifted state is fixed as

    (q0, q, lambda, p0, p, pi)

i.e. all position-like coordinates first, then all momenta; the canonical
form matrix built by :func:`canonical_form` matches this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import systems as _systems
from .errors import DataValidationError, NumericalError, SingularGramError


@dataclass(frozen=True)
class PhasePoint:
    """Physical state (q, p) with time and the active control attached."""

    q: np.ndarray
    p: np.ndarray
    t: float = 0.0
    u: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "q", np.atleast_1d(np.asarray(self.q, float)))
        object.__setattr__(self, "p", np.atleast_1d(np.asarray(self.p, float)))
        object.__setattr__(self, "u", np.atleast_1d(np.asarray(self.u, float)))


@dataclass(frozen=True)
class LiftedPoint:
    """Extended state (q0, q, lambda; p0, p, pi) on the symplectified space."""

    q0: float
    q: np.ndarray
    lam: np.ndarray
    p0: float
    p: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        for name in ("q", "lam", "p", "pi"):
            object.__setattr__(self, name,
                               np.atleast_1d(np.asarray(getattr(self, name), float)))

    @property
    def dim(self):
        return lifted_dimension(len(self.q), len(self.p), len(self.lam))

    def flatten(self):
        """Fixed global ordering (q0, q, lambda, p0, p, pi)."""
        return np.concatenate([[self.q0], self.q, self.lam,
                               [self.p0], self.p, self.pi])


def unflatten_lifted(vec, n_q, n_p, m):
    """Inverse of LiftedPoint.flatten for the fixed ordering."""
    vec = np.asarray(vec, float)
    if vec.shape[-1] != lifted_dimension(n_q, n_p, m):
        raise ValueError(f"expected length {lifted_dimension(n_q, n_p, m)}, "
                         f"got {vec.shape[-1]}")
    i = 1 + n_q
    return LiftedPoint(q0=float(vec[0]), q=vec[1:i], lam=vec[i:i + m],
                       p0=float(vec[i + m]), p=vec[i + m + 1:i + m + 1 + n_p],
                       pi=vec[i + m + 1 + n_p:])


def lifted_dimension(n_q, n_p, m):
    """Dimension of the extended bundle: n_q + n_p + 2 clock + 2m multiplier."""
    if min(n_q, n_p, m) < 0:
        raise ValueError("counts must be non-negative")
    return n_q + n_p + 2 + 2 * m


def canonical_form(N):
    """Canonical 2N x 2N form [[0, I], [-I, 0]] (positions first, then momenta)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    J = np.zeros((2 * N, 2 * N))
    J[:N, N:] = np.eye(N)
    J[N:, :N] = -np.eye(N)
    return J


def symplectic_pairing(a, b, J):
    """Bilinear pairing a^T J b; antisymmetric in (a, b)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape[-1] != J.shape[0] or b.shape[-1] != J.shape[0]:
        raise ValueError(f"vectors of length {a.shape[-1]}/{b.shape[-1]} do not "
                         f"match form of dimension {J.shape[0]}")
    return a @ J @ b


def omega_flat(J, v):
    """Covector alpha with alpha(w) = omega(v, w) = v^T J w."""
    return np.asarray(v, float) @ J


def isotropy_check(v, alpha, w, beta, omega=None, tol=1e-10):
    """Whether the symmetric pairing <(v, alpha), (w, beta)> = alpha(w) + beta(v)
    vanishes.  With alpha = omega_flat(J, v) and beta = omega_flat(J, w) this
    verifies isotropy of the form's graph on the given pair."""
    v = np.asarray(v, float)
    w = np.asarray(w, float)
    alpha = np.asarray(alpha, float)
    beta = np.asarray(beta, float)
    if omega is not None and omega.shape[0] != v.shape[-1]:
        raise ValueError("form dimension does not match vectors")
    return bool(abs(alpha @ w + beta @ v) <= tol)


def gauge_residual(z, sys):
    """(r0, r_pi): r0 = p0 + H + lambda . phi, r_pi = max |pi_a|.

    Both vanish on points satisfying the Dirac gauge.
    """
    H = _systems.hamiltonian(sys, z.q, z.p)
    phi = sys.constraints(z.q)
    r0 = z.p0 + H + float(z.lam @ phi)
    r_pi = float(np.max(np.abs(z.pi))) if len(z.pi) else 0.0
    return float(r0), r_pi


def extended_hamiltonian(z, sys):
    """H(q, p) + p0 + lambda . phi(q); identically zero in the gauge."""
    H = _systems.hamiltonian(sys, z.q, z.p)
    return float(H + z.p0 + z.lam @ sys.constraints(z.q))


@dataclass
class Trajectory:
    """Uniformly sampled physical trajectory; arrays are (N+1, dim).

    Controls are recorded at every step (zero-order hold over each step).
    w_ctrl / w_diss, when present, are the control work and dissipated energy
    accumulated by the generating integrator (not persisted to CSV).
    """

    dt: float
    q: np.ndarray
    p: np.ndarray
    u: np.ndarray
    t0: float = 0.0
    meta: dict = field(default_factory=dict)
    w_ctrl: np.ndarray | None = None
    w_diss: np.ndarray | None = None

    def __len__(self):
        return self.q.shape[0]

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self))

    def state(self, k):
        return PhasePoint(q=self.q[k], p=self.p[k],
                          t=self.t0 + k * self.dt, u=self.u[k])

    def validate(self, sys=None, phi_tol=1e-6):
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p))
                and np.all(np.isfinite(self.u))):
            raise DataValidationError("trajectory contains non-finite entries")
        if sys is not None and sys.m > 0:
            viol = np.max(np.abs(sys.constraints(self.q)))
            if viol > phi_tol:
                raise DataValidationError(
                    f"constraint violation {viol:.3e} exceeds {phi_tol:.1e}")


@dataclass
class LiftedTrajectory:
    """Gauge-satisfying lifted trajectory plus the work-integral channels."""

    dt: float
    q0: np.ndarray
    q: np.ndarray
    lam: np.ndarray
    p0: np.ndarray
    p: np.ndarray
    pi: np.ndarray
    p_ctrl: np.ndarray
    p_diss: np.ndarray
    u: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.q.shape[0]

    def point(self, k):
        return LiftedPoint(q0=self.q0[k], q=self.q[k], lam=self.lam[k],
                           p0=self.p0[k], p=self.p[k], pi=self.pi[k])

    def flat_states(self):
        """(N+1, 2N) matrix of flattened lifted states in the fixed ordering."""
        return np.concatenate([self.q0[:, None], self.q, self.lam,
                               self.p0[:, None], self.p, self.pi], axis=1)

    def validate(self, sys, gauge_tol=1e-8):
        H = _systems.hamiltonian(sys, self.q, self.p)
        phi = sys.constraints(self.q)
        r0 = np.abs(self.p0 + H + np.sum(self.lam * phi, axis=-1))
        r_pi = np.max(np.abs(self.pi), axis=-1) if self.pi.shape[1] else np.zeros(len(self))
        bound = gauge_tol * (1.0 + np.abs(H))
        if np.any(r0 > bound) or np.any(r_pi > bound):
            k = int(np.argmax(np.maximum(r0, r_pi) / bound))
            raise DataValidationError(
                f"gauge residual {max(r0[k], r_pi[k]):.3e} at step {k} exceeds "
                f"tolerance {bound[k]:.3e}")


def _cumtrapz(f, dt):
    out = np.zeros_like(f)
    np.cumsum(0.5 * (f[1:] + f[:-1]) * dt, out=out[1:])
    return out


def dirac_lift(traj, sys):
    """Lift a trajectory into the extended space via the Dirac gauge.

    Per step: q0 = t, lambda from multiplier elimination, pi = 0, and
    p0 = -(H + lambda . phi).  The auxiliary channels record the trapezoidal
    work integrals p_ctrl = -int u . qdot dt and p_diss = -int qdot^T D qdot dt.
    """
    t = traj.times
    try:
        lam = _systems.constraint_multipliers(sys, traj.q, traj.p, traj.u)
    except SingularGramError:
        # recompute stepwise to report the offending index
        for k in range(len(traj)):
            try:
                _systems.constraint_multipliers(sys, traj.q[k], traj.p[k], traj.u[k])
            except SingularGramError as exc:
                raise SingularGramError(
                    f"constraint Jacobian rank-deficient at step {k}") from exc
        raise
    H = _systems.hamiltonian(sys, traj.q, traj.p)
    phi = sys.constraints(traj.q)
    p0 = -(H + np.sum(lam * phi, axis=-1))
    pow_ctrl, pow_diss = _systems.nonconservative_power(sys, traj.q, traj.p, traj.u)
    return LiftedTrajectory(
        dt=traj.dt, q0=t, q=traj.q.copy(), lam=lam, p0=p0, p=traj.p.copy(),
        pi=np.zeros_like(lam), p_ctrl=-_cumtrapz(pow_ctrl, traj.dt),
        p_diss=-_cumtrapz(pow_diss, traj.dt), u=traj.u.copy(),
        meta=dict(traj.meta))


def analytic_lift_map(sys, t0=0.0, u=None):
    """Ground-truth frozen-clock lift x = (q, p) -> (t0, q, lambda, p0, p, 0).

    The clock is held at t0 (dq0 = 0), which is what makes the pullback of the
    extended canonical form equal the original one.
    """
    if u is None:
        u = np.zeros(sys.n_u)

    def lift(x):
        lam = _systems.constraint_multipliers(sys, x.q, x.p, u)
        H = _systems.hamiltonian(sys, x.q, x.p)
        p0 = -(H + lam @ sys.constraints(x.q))
        return LiftedPoint(q0=t0, q=x.q, lam=lam, p0=float(p0), p=x.p,
                           pi=np.zeros(sys.m))

    return lift


def pullback_residual(lift, x, fd_step=1e-5):
    """max-norm residual of (D Psi)^T Jtilde (D Psi) - J at x.

    D Psi is assembled column-by-column with central finite differences over
    the base coordinates (q, p); requires n_q == n_p on the base space.
    """
    n_q, n_p = len(x.q), len(x.p)
    if n_q != n_p:
        raise ValueError("pullback check requires n_q == n_p on the base space")
    base = np.concatenate([x.q, x.p])
    n2 = base.size

    def eval_lift(vec):
        out = lift(PhasePoint(q=vec[:n_q], p=vec[n_q:], t=x.t, u=x.u)).flatten()
        if not np.all(np.isfinite(out)):
            raise NumericalError("lift produced non-finite output near x")
        return out

    cols = []
    for i in range(n2):
        dv = np.zeros(n2)
        dv[i] = fd_step
        cols.append((eval_lift(base + dv) - eval_lift(base - dv)) / (2 * fd_step))
    D = np.stack(cols, axis=1)
    J_lift = canonical_form(D.shape[0] // 2)
    J_base = canonical_form(n_q)
    return float(np.max(np.abs(D.T @ J_lift @ D - J_base)))
