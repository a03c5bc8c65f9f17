"""Reference integration (RK4 + constraint projection) and the implicit
midpoint step used by the learned velocity models.

Data generation runs at a refinement of the data step (``substeps`` RK4
substeps per recorded step) so the reference trajectories are effectively
exact at the recorded resolution.  Control inputs are sampled at the start of
each data step and held (zero-order hold).  The work integrals for control
and dissipation are integrated alongside the state by the same RK4 stages, so
the work-energy identity holds to integrator accuracy.
"""

from __future__ import annotations

import numpy as np

from . import systems as _systems
from .errors import NoConvergenceError, NumericalError
from .geometry import Trajectory


def rk4_step(f, z, t, dt):
    """Classical 4th-order Runge-Kutta update for dz/dt = f(z, t)."""
    k1 = np.asarray(f(z, t))
    k2 = np.asarray(f(z + 0.5 * dt * k1, t + 0.5 * dt))
    k3 = np.asarray(f(z + 0.5 * dt * k2, t + 0.5 * dt))
    k4 = np.asarray(f(z + dt * k3, t + dt))
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise NumericalError(f"non-finite RK4 stage value at t={t}")
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def project_to_manifold(sys, q, p, tol=1e-12, max_iter=20):
    """Project (q, p) onto {phi = 0, J_c M^-1 p = 0}.

    Positions via Gauss-Newton on phi (minimum-norm update), then momenta by
    removing the constraint-normal component through the Gram system.
    Broadcasts over leading batch dimensions.
    """
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    if sys.m == 0:
        return q, p
    for _ in range(max_iter):
        phi = sys.constraints(q)
        if np.max(np.abs(phi)) <= tol:
            break
        Jc = sys.constraint_jacobian(q)
        gram_pos = np.einsum("...ij,...kj->...ik", Jc, Jc)
        try:
            y = np.linalg.solve(gram_pos, phi[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise NoConvergenceError(
                f"constraint projection stalled on a rank-deficient Jacobian: {exc}",
                residual=float(np.max(np.abs(phi)))) from exc
        q = q - np.einsum("...ij,...i->...j", Jc, y)
    else:
        raise NoConvergenceError(
            "constraint projection did not converge",
            residual=float(np.max(np.abs(sys.constraints(q)))),
            iterations=max_iter)
    Jc = sys.constraint_jacobian(q)
    Jct = np.swapaxes(Jc, -1, -2)
    Minv_Jct = np.linalg.solve(sys.mass_matrix(q), Jct)
    gram = np.einsum("...ij,...jk->...ik", Jc, Minv_Jct)
    mu = np.linalg.solve(
        gram, np.einsum("...ij,...j->...i", Jc, sys.velocity(q, p))[..., None]
    )[..., 0]
    p = p - np.einsum("...ij,...i->...j", Jc, mu)
    return q, p


def _augmented_field(sys, U):
    """RHS over the packed state [q, p, w_ctrl, w_diss] for held controls U."""
    n = sys.n_q

    def f(Z, t):
        q, p = Z[..., :n], Z[..., n:2 * n]
        dq, dp = _systems.dynamics_rhs(sys, q, p, t, U)
        pow_ctrl, pow_diss = _systems.nonconservative_power(sys, q, p, U)
        return np.concatenate(
            [dq, dp, pow_ctrl[..., None], pow_diss[..., None]], axis=-1)

    return f


def generate_trajectories(sys, q0, p0, controls, n_steps, dt, substeps=10, t0=0.0):
    """Batched reference generation; returns one Trajectory per batch row.

    q0, p0: (B, n) initial states (projected onto the manifold first).
    controls: sequence of B ControlSignal objects.
    """
    q0 = np.atleast_2d(np.asarray(q0, float))
    p0 = np.atleast_2d(np.asarray(p0, float))
    B = q0.shape[0]
    if len(controls) != B:
        raise ValueError("need one control signal per trajectory")
    q, p = project_to_manifold(sys, q0, p0)
    n = sys.n_q
    h = dt / substeps

    Q = np.empty((n_steps + 1, B, n))
    P = np.empty((n_steps + 1, B, n))
    U = np.empty((n_steps + 1, B, sys.n_u))
    W = np.zeros((n_steps + 1, B, 2))
    Q[0], P[0] = q, p
    w = np.zeros((B, 2))
    for k in range(n_steps + 1):
        t_k = t0 + k * dt
        U[k] = np.stack([c.evaluate(t_k) for c in controls])
        if k == n_steps:
            break
        f = _augmented_field(sys, U[k])
        Z = np.concatenate([q, p, w], axis=-1)
        for s in range(substeps):
            try:
                Z = rk4_step(f, Z, t_k + s * h, h)
            except NumericalError as exc:
                raise NumericalError(f"integration failed at step {k}: {exc}") from exc
            qs, ps = project_to_manifold(sys, Z[..., :n], Z[..., n:2 * n])
            Z = np.concatenate([qs, ps, Z[..., 2 * n:]], axis=-1)
        q, p, w = Z[..., :n], Z[..., n:2 * n], Z[..., 2 * n:]
        Q[k + 1], P[k + 1], W[k + 1] = q, p, w

    out = []
    for b in range(B):
        meta = {"system_kind": sys.kind, "system_params": sys.params(),
                "control": controls[b].spec(), "substeps": substeps, "t0": t0}
        out.append(Trajectory(dt=dt, q=Q[:, b].copy(), p=P[:, b].copy(),
                              u=U[:, b].copy(), t0=t0, meta=meta,
                              w_ctrl=W[:, b, 0].copy(), w_diss=W[:, b, 1].copy()))
    return out


def generate_trajectory(sys, x0, ctrl, n_steps, dt, substeps=10):
    """Single-trajectory reference generation (batched path with B = 1)."""
    return generate_trajectories(sys, x0.q[None, :], x0.p[None, :], [ctrl],
                                 n_steps, dt, substeps=substeps, t0=x0.t)[0]


def implicit_midpoint_step(v, z, t, dt, tol=1e-10, max_iter=50):
    """Solve z' = z + dt * v((z + z') / 2, t + dt/2) by damped fixed point.

    Damping 1.0, falling back to 0.5 after max_iter/2 iterations; converged
    when the applied update norm is <= tol * (1 + |z|).  Convergence needs
    dt * Lip(v) < 1 (not checked).
    """
    z = np.asarray(z, float)
    z_new = z.copy()
    bound = tol * (1.0 + float(np.linalg.norm(z)))
    alpha = 1.0
    residual = np.inf
    for it in range(max_iter):
        if 2 * it >= max_iter:
            alpha = 0.5
        target = z + dt * np.asarray(v(0.5 * (z + z_new), t + 0.5 * dt))
        delta = alpha * (target - z_new)
        z_new = z_new + delta
        residual = float(np.linalg.norm(delta))
        if residual <= bound:
            return z_new
    raise NoConvergenceError("implicit midpoint fixed point stalled",
                             residual=residual, iterations=max_iter)


def midpoint_rollout(v, z0, t0, n_steps, dt, tol=1e-10, max_iter=50):
    """Iterate implicit_midpoint_step; (n_steps+1, dim) array of states."""
    z = np.asarray(z0, float)
    out = np.empty((n_steps + 1,) + z.shape)
    out[0] = z
    for k in range(n_steps):
        try:
            z = implicit_midpoint_step(v, z, t0 + k * dt, dt,
                                       tol=tol, max_iter=max_iter)
        except NoConvergenceError as exc:
            exc.step = k
            raise
        out[k + 1] = z
    return out
