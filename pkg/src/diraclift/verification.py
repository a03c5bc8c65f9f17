"""Property suites: canonical-form identities, pullback of the analytic lift,
integrator certificates, symplecticity of step predictors, gradient checks,
and a deliberately non-symplectic negative control.

Each check returns a record {name, value, bound, op, ok}; ``op`` says whether
the measured value must stay below ('<=') or above ('>=') the bound.
"""

from __future__ import annotations

import numpy as np

from . import geometry, integrators, nets, systems, training


def jacobian_fd(phi, z, fd_step=1e-5):
    """Central finite-difference Jacobian of a flat vector map."""
    z = np.asarray(z, float)
    cols = []
    for i in range(z.size):
        dz = np.zeros_like(z)
        dz[i] = fd_step
        cols.append((phi(z + dz) - phi(z - dz)) / (2 * fd_step))
    return np.stack(cols, axis=1)


def symplecticity_residual(phi, z, fd_step=1e-5):
    """max-norm of D^T J D - J for the map's finite-difference Jacobian."""
    D = jacobian_fd(phi, z, fd_step)
    J = geometry.canonical_form(D.shape[0] // 2)
    return float(np.max(np.abs(D.T @ J @ D - J)))


def _record(name, value, bound, op="<="):
    ok = value <= bound if op == "<=" else value >= bound
    return {"name": name, "value": float(value), "bound": float(bound),
            "op": op, "ok": bool(ok)}


def check_canonical():
    worst_sq = worst_sym = 0.0
    for N in range(1, 17):
        J = geometry.canonical_form(N)
        worst_sq = max(worst_sq, float(np.max(np.abs(J @ J + np.eye(2 * N)))))
        worst_sym = max(worst_sym, float(np.max(np.abs(J.T + J))))
    det_dev = abs(np.linalg.det(geometry.canonical_form(5)) - 1.0)
    dim_dev = abs(geometry.lifted_dimension(19, 18, 24) - 87)
    return [_record("canonical J.J = -I (N=1..16)", worst_sq, 0.0),
            _record("canonical J^T = -J (N=1..16)", worst_sym, 0.0),
            _record("canonical det J = 1", det_dev, 1e-12),
            _record("lifted_dimension(19,18,24) = 87", dim_dev, 0.0)]


def _benchmark_systems():
    return [systems.DampedDrivenOscillator(mass=1.3, stiffness=2.1, damping=0.4),
            systems.PendulumOnCircle(mass=1.1, length=1.2, gravity=9.81,
                                     damping=0.35),
            systems.TwoLinkPinned(mass1=1.2, mass2=0.7, gravity=9.81,
                                  damping1=0.2, damping2=0.3)]


def check_pullback(seed=0, n_points=100, fd_step=1e-5, bound=1e-5):
    out = []
    rng = np.random.Generator(np.random.PCG64(seed))
    for sysm in _benchmark_systems():
        lift = geometry.analytic_lift_map(sysm)
        q, p = sysm.sample_states(n_points, rng)
        worst = 0.0
        for i in range(n_points):
            x = geometry.PhasePoint(q=q[i], p=p[i], u=np.zeros(sysm.n_u))
            worst = max(worst, geometry.pullback_residual(lift, x, fd_step))
        out.append(_record(f"pullback residual [{sysm.kind}]", worst, bound))
    return out


def check_integrators():
    out = []
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    dt = 0.1
    z = np.array([1.0, 0.0])
    vf = lambda s, t: A @ s
    stepped = integrators.implicit_midpoint_step(vf, z, 0.0, dt,
                                                 tol=1e-14, max_iter=200)
    cayley = np.linalg.solve(np.eye(2) - 0.5 * dt * A,
                             (np.eye(2) + 0.5 * dt * A) @ z)
    out.append(_record("implicit midpoint = Cayley (one step)",
                       float(np.max(np.abs(stepped - cayley))), 1e-9))

    states = integrators.midpoint_rollout(vf, z, 0.0, 10_000, 0.01,
                                          tol=1e-14, max_iter=200)
    inv = 0.5 * np.sum(states ** 2, axis=1)
    out.append(_record("midpoint quadratic invariant (1e4 steps)",
                       float(np.max(np.abs(inv - inv[0]))), 1e-10))

    back = integrators.implicit_midpoint_step(vf, stepped, dt, -dt,
                                              tol=1e-14, max_iter=200)
    out.append(_record("midpoint time symmetry",
                       float(np.max(np.abs(back - z))), 1e-13))

    # error against the analytic oscillator solution over a fixed interval,
    # dt vs dt/2 (halving dt should cut the error ~16x)
    def osc_exact(z0, t):
        c, s = np.cos(t), np.sin(t)
        return np.array([c * z0[0] + s * z0[1], -s * z0[0] + c * z0[1]])

    z0 = np.array([0.7, -0.4])
    t_end = 0.8
    errs = []
    for h in (0.1, 0.05):
        zz = z0
        for k in range(int(round(t_end / h))):
            zz = integrators.rk4_step(lambda s, t: A @ s, zz, k * h, h)
        errs.append(np.linalg.norm(zz - osc_exact(z0, t_end)))
    order = float(np.log2(errs[0] / errs[1]))
    out.append(_record("RK4 measured order", order, 3.8, op=">="))
    return out


def check_sympnet(params_list=None, seed=0, n_points=100, dt=0.05,
                  bound=1e-5, state_scale=2.0):
    """Finite-difference symplecticity certificate at random lifted points."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if params_list is None:
        params_list = [
            ("random sympnet (N=4)", nets.init_sympnet(4, rng)),
            ("random sympnet (N=3, wide)",
             nets.init_sympnet(3, rng, n_modules=8, width=16, a_scale=1.0)),
        ]
    out = []
    for name, params in params_list:
        N = params.n_pos
        phi = nets.sympnet_map(params, dt)
        worst = 0.0
        for _ in range(n_points):
            z = state_scale * rng.normal(size=2 * N)
            worst = max(worst, symplecticity_residual(phi, z))
        out.append(_record(f"symplecticity residual [{name}]", worst, bound))
    return out


def gradcheck_ratio(grads, fd_grads, rtol=1e-4, atol=1e-7):
    """max over coordinates of |g - fd| / (atol + rtol |fd|); <= 1 passes."""
    worst = 0.0
    for g, f in zip(nets.trainable_arrays(grads), nets.trainable_arrays(fd_grads)):
        worst = max(worst, float(np.max(np.abs(g - f) / (atol + rtol * np.abs(f)))))
    return worst


def check_gradients(seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []

    psn = nets.init_psn(input_dim=3, hidden_dim=4, out_dim=1, rng=rng)
    ctx = rng.normal(size=(6, 5, 3))
    tgt = rng.normal(size=(6, 1))
    batch = training.FlowMatchBatch(ctx, tgt, np.zeros(6))

    def loss_fm(p):
        return training.flow_matching_loss(p, batch, selector="p0")

    ratio = gradcheck_ratio(nets.param_gradients(psn, loss_fm),
                            nets.finite_difference_gradients(psn, loss_fm))
    out.append(_record("gradcheck flow-matching loss", ratio, 1.0))

    def loss_fm_mid(p):
        return training.flow_matching_loss(p, batch, selector="p0", dt=0.05,
                                           through_midpoint=True)

    ratio = gradcheck_ratio(nets.param_gradients(psn, loss_fm_mid),
                            nets.finite_difference_gradients(psn, loss_fm_mid))
    out.append(_record("gradcheck flow-matching loss (midpoint)", ratio, 1.0))

    sn = nets.init_sympnet(3, rng, n_modules=4, width=5)
    Z = rng.normal(size=(6, 6))
    Zn = rng.normal(size=(6, 6))

    def loss_pred(p):
        return training.prediction_loss(p, Z, Zn, 0.05)

    ratio = gradcheck_ratio(nets.param_gradients(sn, loss_pred),
                            nets.finite_difference_gradients(sn, loss_pred))
    out.append(_record("gradcheck one-step prediction loss", ratio, 1.0))
    return out


def fit_affine_predictor(Z, Z_next):
    """Least-squares affine one-step map z -> A z + c on flattened pairs."""
    X = np.concatenate([Z, np.ones((Z.shape[0], 1))], axis=1)
    coef, *_ = np.linalg.lstsq(X, Z_next, rcond=None)
    A = coef[:-1].T
    c = coef[-1]
    return A, c


def affine_symplecticity_residual(A):
    J = geometry.canonical_form(A.shape[0] // 2)
    return float(np.max(np.abs(A.T @ J @ A - J)))


def _negative_control_dataset(seed=0):
    sysm = systems.PendulumOnCircle(mass=1.0, length=1.0, gravity=9.81,
                                    damping=0.5)
    rng = np.random.Generator(np.random.PCG64(seed))
    q0, p0 = sysm.sample_states(20, rng, angle_range=2.2, omega_range=2.5)
    ctrls = [systems.ControlSignal("zero", sysm.n_u) for _ in range(20)]
    trajs = integrators.generate_trajectories(sysm, q0, p0, ctrls, 150, 0.01,
                                              substeps=5)
    return [geometry.dirac_lift(tr, sysm) for tr in trajs]


def check_negative_control(seed=0, lifted=None, bound=1e-2):
    """An affine predictor fitted to lifted data must FAIL the symplecticity
    test; 'ok' here means the residual is large."""
    if lifted is None:
        lifted = _negative_control_dataset(seed)
    Z, Zn = training.make_sympnet_pairs(lifted)
    A, _ = fit_affine_predictor(Z, Zn)
    res = affine_symplecticity_residual(A)
    return [_record("negative control: affine-fit residual", res, bound,
                    op=">=")]


SCOPES = {
    "canonical": lambda seed, sympnet: check_canonical(),
    "pullback": lambda seed, sympnet: check_pullback(seed=seed),
    "integrators": lambda seed, sympnet: check_integrators(),
    "sympnet": lambda seed, sympnet: check_sympnet(
        params_list=[("loaded archive", sympnet)] if sympnet is not None else None,
        seed=seed),
    "gradients": lambda seed, sympnet: check_gradients(seed=seed),
    "negative": lambda seed, sympnet: check_negative_control(seed=seed),
}


def run_suite(scopes=None, seed=0, sympnet=None):
    records = []
    for scope in scopes or list(SCOPES):
        records.extend(SCOPES[scope](seed, sympnet))
    return records
