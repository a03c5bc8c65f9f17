import numpy as np
import pytest

from diraclift import nets, training, verification
from diraclift.nets import (encoder_forward, init_psn, init_recurrent_cell,
                            init_sympnet, low_module, param_gradients,
                            psn_step, recurrent_step, sympnet_apply_inverse,
                            sympnet_step, up_module)

from conftest import rng


def zeroed(params):
    return nets.tree_map(np.zeros_like, params)


def test_recurrent_step_zero_params():
    cell = zeroed(init_recurrent_cell(3, 4, rng(0)))
    out = recurrent_step(cell, np.ones((2, 3)), np.zeros((2, 4)))
    assert np.array_equal(out, np.zeros((2, 4)))


def test_recurrent_step_carry_gate():
    cell = init_recurrent_cell(3, 4, rng(1))
    cell.b_z = np.full(4, -1e6)  # update gate saturated shut
    h = rng(2).normal(size=(2, 4))
    out = recurrent_step(cell, rng(3).normal(size=(2, 3)), h)
    assert np.array_equal(out, h)


def test_recurrent_step_scalar_oracle():
    # independent scalar-by-scalar evaluation of one update
    g = rng(4)
    cell = init_recurrent_cell(2, 2, g)
    x = g.normal(size=2)
    h = g.normal(size=2)

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    expect = np.zeros(2)
    for i in range(2):
        z_i = sig(sum(cell.W_z[i, j] * x[j] for j in range(2))
                  + sum(cell.U_z[i, j] * h[j] for j in range(2)) + cell.b_z[i])
        r = [sig(sum(cell.W_r[k, j] * x[j] for j in range(2))
                 + sum(cell.U_r[k, j] * h[j] for j in range(2)) + cell.b_r[k])
             for k in range(2)]
        htil_i = np.tanh(sum(cell.W_h[i, j] * x[j] for j in range(2))
                         + sum(cell.U_h[i, j] * r[j] * h[j] for j in range(2))
                         + cell.b_h[i])
        expect[i] = (1 - z_i) * h[i] + z_i * htil_i
    out = recurrent_step(cell, x[None], h[None])[0]
    assert np.allclose(out, expect, atol=1e-14)


def test_recurrent_step_convex_hull_property():
    g = rng(5)
    cell = init_recurrent_cell(3, 5, g)
    for _ in range(20):
        x = g.normal(size=(1, 3))
        h = g.normal(size=(1, 5))
        out = recurrent_step(cell, x, h)[0]
        z = 1.0 / (1.0 + np.exp(-(x @ cell.W_z.T + h @ cell.U_z.T + cell.b_z)))[0]
        r = 1.0 / (1.0 + np.exp(-(x @ cell.W_r.T + h @ cell.U_r.T + cell.b_r)))[0]
        htil = np.tanh(x @ cell.W_h.T + (r * h) @ cell.U_h.T + cell.b_h)[0]
        lo = np.minimum(h[0], htil)
        hi = np.maximum(h[0], htil)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_encoder_zero_params_and_affine_reduction():
    g = rng(6)
    psn = zeroed(init_psn(3, 4, 2, g))
    ctx = g.normal(size=(5, 6, 3))
    v, _ = encoder_forward(psn, ctx)
    assert np.array_equal(v, np.zeros((5, 2)))

    psn2 = init_psn(3, 4, 2, g)
    psn2.head_W2 = np.zeros_like(psn2.head_W2)
    ctx_a = g.normal(size=(6, 3))
    ctx_b = g.normal(size=(6, 3))
    ctx_b[-1] = ctx_a[-1]  # same last entry, different history
    va, _ = encoder_forward(psn2, ctx_a)
    vb, _ = encoder_forward(psn2, ctx_b)
    assert np.allclose(va, vb, atol=1e-14)
    assert np.allclose(va, psn2.head_W1 @ ctx_a[-1] + psn2.head_b, atol=1e-14)


def test_psn_step_trivial_and_cayley():
    g = rng(7)
    psn = zeroed(init_psn(2, 3, 2, g))
    z = np.array([0.4, -0.2])
    ctx = np.tile(z, (5, 1))
    assert np.array_equal(psn_step(psn, ctx, z, 0.1), z)

    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    psn.head_W1 = A.copy()
    out = psn_step(psn, ctx, z, 0.1, tol=1e-14, max_iter=200)
    cayley = np.linalg.solve(np.eye(2) - 0.05 * A, (np.eye(2) + 0.05 * A) @ z)
    assert np.allclose(out, cayley, atol=1e-12)
    assert np.array_equal(psn_step(psn, ctx, z, 0.0), z)


def test_up_low_module_basics():
    q = np.array([[0.0]])
    p = np.array([[1.0]])
    K = np.array([[1.0]])
    a1 = np.array([1.0])
    b0 = np.array([0.0])
    q2, p2 = up_module(q, p, K, np.zeros(1), b0)
    assert np.array_equal(q2, q) and np.array_equal(p2, p)
    q2, p2 = up_module(q, p, K, a1, b0)
    assert p2[0, 0] == pytest.approx(1.0)  # tanh(0) contributes nothing
    q2, p2 = low_module(q, p, K, a1, b0)
    assert q2[0, 0] == pytest.approx(0.0 + np.tanh(1.0))


def test_module_jacobians_are_symplectic():
    g = rng(8)
    K = g.normal(size=(6, 3))
    a = g.normal(size=6)
    b = g.normal(size=6)
    J = np.zeros((6, 6))
    J[:3, 3:] = np.eye(3)
    J[3:, :3] = -np.eye(3)

    def phi_up(z):
        q2, p2 = up_module(z[None, :3], z[None, 3:], K, a, b)
        return np.concatenate([np.ravel(q2), np.ravel(p2)])

    worst = 0.0
    for _ in range(100):
        z = 2.0 * g.normal(size=6)
        D = verification.jacobian_fd(phi_up, z)
        worst = max(worst, float(np.max(np.abs(D.T @ J @ D - J))))
    assert worst <= 1e-6


def test_composition_symplectic_and_inverse():
    g = rng(9)
    sn = init_sympnet(3, g, n_modules=3, width=5, a_scale=1.0)
    phi = nets.sympnet_map(sn, dt=1.0)
    worst = 0.0
    for _ in range(50):
        z = g.normal(size=6)
        worst = max(worst, verification.symplecticity_residual(phi, z))
    assert worst <= 1e-6

    z = g.normal(size=6)
    fwd = phi(z)
    q, p = sympnet_apply_inverse(sn, fwd[:3], fwd[3:], 1.0)
    assert np.max(np.abs(np.concatenate([q, p]) - z)) <= 1e-10


def test_sympnet_step_identity_at_zero_dt():
    g = rng(10)
    sn = init_sympnet(4, g)
    z = g.normal(size=8)
    assert np.array_equal(sympnet_step(sn, z, 0.0), z)


def test_sympnet_step_symplectic_and_volume():
    g = rng(11)
    sn = init_sympnet(4, g, n_modules=6, width=8)
    phi = nets.sympnet_map(sn, dt=0.1)
    J = np.zeros((8, 8))
    J[:4, 4:] = np.eye(4)
    J[4:, :4] = -np.eye(4)
    worst_symp, worst_vol = 0.0, 0.0
    for _ in range(100):
        z = 2.0 * g.normal(size=8)
        D = verification.jacobian_fd(phi, z)
        worst_symp = max(worst_symp, float(np.max(np.abs(D.T @ J @ D - J))))
        worst_vol = max(worst_vol, abs(abs(np.linalg.det(D)) - 1.0))
    assert worst_symp <= 1e-5
    assert worst_vol <= 1e-6


def test_preconditioned_sympnet_still_symplectic():
    g = rng(12)
    center = g.normal(size=8)
    scale = np.exp(g.normal(size=4))
    sn = init_sympnet(4, g, center=center, scale=scale, a_scale=0.5)
    phi = nets.sympnet_map(sn, dt=0.3)
    worst = 0.0
    for _ in range(30):
        worst = max(worst,
                    verification.symplecticity_residual(phi, g.normal(size=8)))
    assert worst <= 1e-5


def test_sympnet_step_lifted_point_roundtrip(pendulum, pendulum_damped_dataset):
    _, lifted = pendulum_damped_dataset
    z = lifted[0].point(5)
    sn = init_sympnet(4, rng(13))
    out = sympnet_step(sn, z, 0.01)
    assert out.dim == z.dim
    assert np.allclose(out.flatten()[:4],
                       sympnet_step(sn, z.flatten(), 0.01)[:4])


def test_param_gradients_trivial_cases():
    g = rng(14)
    psn = init_psn(3, 4, 1, g)
    grads = param_gradients(psn, lambda p: nets.ssum(p.head_W1 * 0.0))
    assert all(np.array_equal(a, np.zeros_like(a))
               for a in nets.trainable_arrays(grads))
    grads = param_gradients(psn, lambda p: nets.ssum(nets.square(p.head_W1)))
    assert np.allclose(grads.head_W1, 2.0 * psn.head_W1)


def test_param_gradients_match_fd_on_flow_matching_batch():
    g = rng(15)
    psn = init_psn(3, 4, 1, g)
    assert nets.parameter_count(psn) <= 500
    batch = training.FlowMatchBatch(g.normal(size=(2, 5, 3)),
                                    g.normal(size=(2, 1)), np.zeros(2))

    def loss(p):
        return training.flow_matching_loss(p, batch, selector="p0")

    ratio = verification.gradcheck_ratio(
        param_gradients(psn, loss),
        nets.finite_difference_gradients(psn, loss))
    assert ratio <= 1.0


def test_init_invariants():
    g = rng(16)
    sn = init_sympnet(5, g, n_modules=6, width=7)
    kinds = [m.kind for m in sn.modules]
    assert kinds == ["up", "low"] * 3
    psn = init_psn(4, 8, 2, g)
    assert len(psn.cells) == 3
    assert psn.cells[0].W_z.shape == (8, 4)
    assert psn.cells[1].W_z.shape == (8, 8)
    assert psn.head_W1.shape == (2, 4)
    assert psn.input_dim == 4 and psn.out_dim == 2 and psn.hidden_dim == 8
