"""Learnable components: stacked recurrent encoder with a linear velocity
head, and the exactly-symplectic step predictor built from alternating
gradient modules.

Forward code is written once against the dispatching ops in
:mod:`diraclift.autodiff`; it runs on plain ndarrays (inference) and on
Tensors (training).  Parameter containers are dataclasses of ndarrays; fields
marked ``static`` in their metadata are structural and never trained.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tensor, concat, linear2, sigmoid, split, ssum, square,
                       tanh, value_of)
from .errors import NumericalError
from .geometry import LiftedPoint, unflatten_lifted
from .integrators import implicit_midpoint_step


# -- parameter trees ---------------------------------------------------------

def tree_map(fn, tree):
    """Apply fn to every trainable array leaf; static fields pass through."""
    if dataclasses.is_dataclass(tree):
        kwargs = {}
        for f in dataclasses.fields(tree):
            val = getattr(tree, f.name)
            if f.metadata.get("static"):
                kwargs[f.name] = val
            else:
                kwargs[f.name] = tree_map(fn, val)
        return type(tree)(**kwargs)
    if isinstance(tree, (tuple, list)):
        return type(tree)(tree_map(fn, x) for x in tree)
    if isinstance(tree, (np.ndarray, Tensor)):
        return fn(tree)
    return tree


def tree_multimap(fn, *trees):
    """Like tree_map over several same-shaped trees."""
    t0 = trees[0]
    if dataclasses.is_dataclass(t0):
        kwargs = {}
        for f in dataclasses.fields(t0):
            vals = [getattr(t, f.name) for t in trees]
            if f.metadata.get("static"):
                kwargs[f.name] = vals[0]
            else:
                kwargs[f.name] = tree_multimap(fn, *vals)
        return type(t0)(**kwargs)
    if isinstance(t0, (tuple, list)):
        return type(t0)(tree_multimap(fn, *xs) for xs in zip(*trees))
    if isinstance(t0, (np.ndarray, Tensor)):
        return fn(*trees)
    return t0


def tree_leaves(tree, prefix=""):
    """(name, array) pairs for every field, static ones included; the order
    is deterministic and doubles as the weight-archive record order."""
    out = []
    if dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            name = f"{prefix}.{f.name}" if prefix else f.name
            out.extend(tree_leaves(getattr(tree, f.name), name))
        return out
    if isinstance(tree, (tuple, list)):
        for i, x in enumerate(tree):
            out.extend(tree_leaves(x, f"{prefix}.{i}"))
        return out
    if isinstance(tree, (np.ndarray, Tensor)):
        return [(prefix, value_of(tree))]
    return [(prefix, tree)]


def trainable_arrays(tree):
    """Trainable leaves in tree_map traversal order."""
    leaves = []
    tree_map(lambda a: (leaves.append(value_of(a)), a)[1], tree)
    return leaves


def rebuild_from_arrays(tree, arrays):
    """Replace the trainable leaves of tree with the given arrays, in order."""
    it = iter(arrays)
    return tree_map(lambda _: next(it), tree)


def parameter_count(tree):
    return int(sum(a.size for a in trainable_arrays(tree)))


# -- containers ---------------------------------------------------------------

@dataclass
class RecurrentCellParams:
    """Gated recurrent cell weights; W_* read the input, U_* the hidden state."""

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray


@dataclass
class PsnParams:
    """Three stacked recurrent cells plus the linear velocity head
    v = W1 z_t + W2 h_{t-1} + b.  The head output dimension equals the number
    of flow-matched channels."""

    cells: tuple
    head_W1: np.ndarray
    head_W2: np.ndarray
    head_b: np.ndarray

    @property
    def input_dim(self):
        return value_of(self.head_W1).shape[1]

    @property
    def out_dim(self):
        return value_of(self.head_W1).shape[0]

    @property
    def hidden_dim(self):
        return value_of(self.head_W2).shape[1]


@dataclass
class SympNetModuleParams:
    """One gradient module: shear by the gradient of a^T S(K x + b)."""

    kind: str = field(metadata={"static": True})
    K: np.ndarray = None
    a: np.ndarray = None
    b: np.ndarray = None


@dataclass
class SympNetParams:
    """Alternating up/low gradient modules with a fixed symplectic
    preconditioner (pairwise scaling + translation) fitted to data statistics.

    precond_center is (2N,) over the flattened lifted state; precond_scale is
    (N,) applied as Q/s, P*s — exactly symplectic for any positive s."""

    modules: tuple
    precond_center: np.ndarray = field(metadata={"static": True}, default=None)
    precond_scale: np.ndarray = field(metadata={"static": True}, default=None)

    @property
    def n_pos(self):
        return value_of(self.modules[0].K).shape[1]


def _uniform_init(rng, shape, fan_in):
    return rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)


def init_recurrent_cell(input_dim, hidden_dim, rng):
    def w():
        return _uniform_init(rng, (hidden_dim, input_dim), input_dim)

    def u():
        return _uniform_init(rng, (hidden_dim, hidden_dim), hidden_dim)

    z = np.zeros(hidden_dim)
    return RecurrentCellParams(W_z=w(), W_r=w(), W_h=w(), U_z=u(), U_r=u(),
                               U_h=u(), b_z=z.copy(), b_r=z.copy(), b_h=z.copy())


def init_psn(input_dim, hidden_dim, out_dim, rng, n_layers=3):
    cells = tuple(init_recurrent_cell(input_dim if l == 0 else hidden_dim,
                                      hidden_dim, rng)
                  for l in range(n_layers))
    return PsnParams(
        cells=cells,
        head_W1=_uniform_init(rng, (out_dim, input_dim), input_dim),
        head_W2=_uniform_init(rng, (out_dim, hidden_dim), hidden_dim),
        head_b=np.zeros(out_dim))


def init_sympnet(n_pos, rng, n_modules=6, width=32, a_scale=0.1,
                 center=None, scale=None):
    """Alternating modules starting with 'up'; near-identity start via small a."""
    modules = []
    for i in range(n_modules):
        modules.append(SympNetModuleParams(
            kind="up" if i % 2 == 0 else "low",
            K=_uniform_init(rng, (width, n_pos), n_pos),
            a=a_scale * _uniform_init(rng, (width,), width),
            b=np.zeros(width)))
    if center is None:
        center = np.zeros(2 * n_pos)
    if scale is None:
        scale = np.ones(n_pos)
    return SympNetParams(modules=tuple(modules),
                         precond_center=np.asarray(center, float),
                         precond_scale=np.asarray(scale, float))


def precondition_from_data(states, floor=1e-3, max_ratio=5.0):
    """(center, scale) for a (n_samples, 2N) matrix of flattened lifted states.

    The pairwise scale equalizes the spread of each conjugate (Q_i, P_i) pair;
    spreads are floored and the ratio capped so degenerate (constant) channels
    do not amplify errors on their conjugate partner.
    """
    states = np.asarray(states, float)
    N = states.shape[1] // 2
    center = states.mean(axis=0)
    spread = np.maximum(states.std(axis=0), floor)
    scale = np.sqrt(spread[:N] / spread[N:])
    return center, np.clip(scale, 1.0 / max_ratio, max_ratio)


# -- recurrent encoder --------------------------------------------------------

def recurrent_step(cell, x, h):
    """One gated-recurrent update.

    z = sig(W_z x + U_z h + b_z), r = sig(W_r x + U_r h + b_r),
    htil = tanh(W_h x + U_h (r*h) + b_h), out = (1-z)*h + z*htil.
    """
    z = sigmoid(x @ cell.W_z.T + h @ cell.U_z.T + cell.b_z)
    r = sigmoid(x @ cell.W_r.T + h @ cell.U_r.T + cell.b_r)
    h_tilde = tanh(x @ cell.W_h.T + (r * h) @ cell.U_h.T + cell.b_h)
    return (1.0 - z) * h + z * h_tilde


class _FusedCell:
    """Per-call view of a cell with the z/r gate weights stacked, so each
    step costs two gate matmuls instead of four; numerically identical to
    recurrent_step."""

    __slots__ = ("Wzr_t", "Uzr_t", "bzr", "Wh_t", "Uh_t", "bh")

    def __init__(self, cell):
        self.Wzr_t = concat([cell.W_z, cell.W_r], axis=0).T
        self.Uzr_t = concat([cell.U_z, cell.U_r], axis=0).T
        self.bzr = concat([cell.b_z, cell.b_r], axis=0)
        self.Wh_t = cell.W_h.T
        self.Uh_t = cell.U_h.T
        self.bh = cell.b_h

    def step(self, x, h):
        gates = sigmoid(linear2(x, self.Wzr_t, h, self.Uzr_t, self.bzr))
        z, r = split(gates, 2, axis=-1)
        h_tilde = tanh(linear2(x, self.Wh_t, r * h, self.Uh_t, self.bh))
        return (1.0 - z) * h + z * h_tilde


def encoder_forward(params, context, h0=None):
    """Run the layer stack over the first T-1 context entries, then the head.

    context: (T, C) or batched (B, T, C).  Returns (v, h_trace) where v is the
    head output on (z_T-1, top-layer hidden) and h_trace[l][k] is layer l's
    hidden state after consuming context step k.
    """
    context = np.asarray(context, float)
    single = context.ndim == 2
    if single:
        context = context[None]
    B, T, _ = context.shape
    H = params.hidden_dim
    if h0 is None:
        hs = [np.zeros((B, H)) for _ in params.cells]
    else:
        hs = [np.broadcast_to(np.asarray(h, float), (B, H)).copy() for h in h0]
    cells = [_FusedCell(cell) for cell in params.cells]
    h_trace = [[] for _ in params.cells]
    for k in range(T - 1):
        x = context[:, k, :]
        for l, cell in enumerate(cells):
            hs[l] = cell.step(x if l == 0 else hs[l - 1], hs[l])
            h_trace[l].append(hs[l])
    v = head_velocity(params, context[:, T - 1, :], hs[-1])
    if single:
        v = v[0] if isinstance(v, np.ndarray) else v
    return v, h_trace


def head_velocity(params, z, h):
    """Linear velocity head v = W1 z + W2 h + b."""
    return z @ params.head_W1.T + h @ params.head_W2.T + params.head_b


def psn_step(params, context, z_t, dt, channels=None, tol=1e-10, max_iter=50):
    """Advance z_t by the implicit midpoint rule under the head velocity.

    The hidden state is frozen at its value after the context; the head is
    re-evaluated at the midpoint state.  ``channels`` restricts the evolved
    coordinates (None = all; then the head must be square).  Returns the full
    advanced vector.
    """
    z_t = np.asarray(z_t, float)
    _, h_trace = encoder_forward(params, np.asarray(context, float))
    h_top = h_trace[-1][-1] if h_trace[-1] else np.zeros((1, params.hidden_dim))
    if channels is None:
        channels = np.arange(z_t.size)
    channels = np.asarray(channels, int)
    if channels.size != params.out_dim:
        raise ValueError(f"head outputs {params.out_dim} channels but "
                         f"{channels.size} are being evolved")

    def vfield(sub, t):
        z_in = z_t.copy()
        z_in[channels] = sub
        return head_velocity(params, z_in[None], h_top)[0]

    advanced = implicit_midpoint_step(vfield, z_t[channels], 0.0, dt,
                                      tol=tol, max_iter=max_iter)
    out = z_t.copy()
    out[channels] = advanced
    return out


# -- symplectic step predictor ------------------------------------------------

def up_module(q, p, K, a, b, scale=1.0):
    """(q, p) -> (q, p + scale * K^T (a * tanh(K q + b))); exactly symplectic."""
    return q, p + scale * ((tanh(q @ K.T + b) * a) @ K)


def low_module(q, p, K, a, b, scale=1.0):
    """(q, p) -> (q + scale * K^T (a * tanh(K p + b)), p); exactly symplectic."""
    return q + scale * ((tanh(p @ K.T + b) * a) @ K), p


def sympnet_apply(params, Q, P, dt):
    """Apply the preconditioned module stack to position/momentum blocks.

    Each module's additive update is scaled by dt, so dt = 0 is the identity
    and the whole map is a composition of exactly-symplectic shears.
    """
    c = params.precond_center
    s = params.precond_scale
    N = s.shape[0]
    inv_s = 1.0 / s
    Qy = (Q - c[:N]) * inv_s
    Py = (P - c[N:]) * s
    for mod in params.modules:
        if mod.kind == "up":
            Qy, Py = up_module(Qy, Py, mod.K, mod.a, mod.b, scale=dt)
        else:
            Qy, Py = low_module(Qy, Py, mod.K, mod.a, mod.b, scale=dt)
    return Qy * s + c[:N], Py * inv_s + c[N:]


def sympnet_apply_inverse(params, Q, P, dt):
    """Exact inverse of sympnet_apply (modules are invertible shears)."""
    c = params.precond_center
    s = params.precond_scale
    N = s.shape[0]
    inv_s = 1.0 / s
    Qy = (Q - c[:N]) * inv_s
    Py = (P - c[N:]) * s
    for mod in reversed(params.modules):
        if mod.kind == "up":
            Py = Py - dt * ((tanh(Qy @ mod.K.T + mod.b) * mod.a) @ mod.K)
        else:
            Qy = Qy - dt * ((tanh(Py @ mod.K.T + mod.b) * mod.a) @ mod.K)
    return Qy * s + c[:N], Py * inv_s + c[N:]


def _split_lifted(flat, N):
    return flat[..., :N], flat[..., N:]


def sympnet_step(params, z, dt):
    """One symplectic step on a LiftedPoint (or flat lifted vector)."""
    if isinstance(z, LiftedPoint):
        flat = z.flatten()
        N = flat.size // 2
        Q, P = sympnet_apply(params, flat[:N], flat[N:], dt)
        out = np.concatenate([Q, P])
        return unflatten_lifted(out, len(z.q), len(z.p), len(z.lam))
    flat = np.asarray(z, float)
    N = flat.shape[-1] // 2
    Q, P = sympnet_apply(params, flat[..., :N], flat[..., N:], dt)
    return concat([Q, P], axis=-1)


def sympnet_map(params, dt):
    """The step as a plain map on flat lifted vectors (for Jacobian checks)."""
    def phi(flat):
        return sympnet_step(params, flat, dt)
    return phi


# -- gradients ----------------------------------------------------------------

def param_gradients(model, loss_closure):
    """Reverse-mode gradients of a scalar loss closure over a parameter tree.

    Returns a container of the same shape with the accumulated gradients
    (zeros for parameters the loss does not touch).
    """
    tmodel = tree_map(Tensor, model)
    loss = loss_closure(tmodel)
    if not isinstance(loss, Tensor):
        raise TypeError("loss closure must return an autodiff Tensor scalar")
    if not np.all(np.isfinite(loss.value)):
        raise NumericalError("non-finite loss")
    loss.backward()
    return tree_map(
        lambda t: t.grad if t.grad is not None else np.zeros_like(t.value),
        tmodel)


def finite_difference_gradients(model, loss_closure, step=1e-5):
    """Central-difference gradients, coordinate by coordinate (small models)."""
    leaves = trainable_arrays(model)
    grads = [np.zeros_like(a) for a in leaves]
    for li, arr in enumerate(leaves):
        flat = arr.ravel()
        for j in range(flat.size):
            plus = [a.copy() for a in leaves]
            minus = [a.copy() for a in leaves]
            plus[li].ravel()[j] += step
            minus[li].ravel()[j] -= step
            f_plus = float(value_of(loss_closure(rebuild_from_arrays(model, plus))))
            f_minus = float(value_of(loss_closure(rebuild_from_arrays(model, minus))))
            grads[li].ravel()[j] = (f_plus - f_minus) / (2.0 * step)
    return rebuild_from_arrays(model, grads)


def batch_mse(pred, target):
    """Mean over batch rows of the squared channel-residual norm."""
    r = pred - target
    B = value_of(pred).shape[0]
    return ssum(square(r)) * (1.0 / B)
