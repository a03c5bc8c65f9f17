"""Flow-matching training of the recurrent encoder, one-step training of the
symplectic predictor, the Adam optimizer, and rollout evaluation.

The encoder is trained with an inpainting objective: its input windows carry
(t, p_ctrl, q, p) — the withheld p0 channel is replaced by the control-work
channel p_ctrl — and the supervised target is the data velocity of p0 (or of
all channels, per the selector).  The symplectic predictor is trained on
consecutive pairs of gauge-lifted states while the encoder stays frozen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import nets
from .autodiff import value_of
from .errors import DataValidationError, NumericalError
from .geometry import extended_hamiltonian, unflatten_lifted
from . import systems as _systems


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 200
    context_len: int = 10
    dt: float = 0.01
    seed: int = 0
    channels: str = "p0"            # 'p0' or 'full'
    through_midpoint: bool = False  # supervise through the midpoint layer

    def __post_init__(self):
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2 (velocities need differences)")
        if min(self.learning_rate, self.beta1, self.beta2, self.eps) <= 0:
            raise ValueError("optimizer rates must be positive")
        if self.channels not in ("p0", "full"):
            raise ValueError("channels selector must be 'p0' or 'full'")


@dataclass
class OptimizerState:
    m: object
    v: object
    step: int = 0
    skipped: int = 0


def init_optimizer(params):
    zeros = lambda a: np.zeros_like(value_of(a))
    return OptimizerState(m=nets.tree_map(zeros, params),
                          v=nets.tree_map(zeros, params))


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update; deterministic given its inputs."""
    flat = nets.trainable_arrays(grads)
    if any(not np.all(np.isfinite(g)) for g in flat):
        return params, replace(state, skipped=state.skipped + 1)
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    m = nets.tree_multimap(lambda m, g: b1 * m + (1 - b1) * g, state.m, grads)
    v = nets.tree_multimap(lambda v, g: b2 * v + (1 - b2) * g * g, state.v, grads)
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t

    def upd(p, m_, v_):
        return p - cfg.learning_rate * (m_ / c1) / (np.sqrt(v_ / c2) + cfg.eps)

    return (nets.tree_multimap(upd, params, m, v),
            OptimizerState(m=m, v=v, step=t, skipped=state.skipped))


# -- channel layout -----------------------------------------------------------

def lifted_channels(lt):
    """(N+1, C) matrix of the flow-matched channels (t, p0, q, p)."""
    return np.concatenate([lt.q0[:, None], lt.p0[:, None], lt.q, lt.p], axis=1)


def masked_channels(lt):
    """Input view of the channels: the p0 slot carries p_ctrl (inpainting)."""
    return np.concatenate([lt.q0[:, None], lt.p_ctrl[:, None], lt.q, lt.p], axis=1)


P0_SLOT = 1


def channel_indices(selector, n_channels):
    if selector == "p0":
        return np.array([P0_SLOT])
    if selector == "full":
        return np.arange(n_channels)
    raise ValueError(f"unknown channel selector {selector!r}")


def data_velocity(lt, k, channels=None):
    """Data velocity at step k on the selected channels.

    Central difference for 1 <= k <= N-1, one-sided at the ends.
    """
    z = lifted_channels(lt)
    N = len(lt) - 1
    if not 0 <= k <= N:
        raise IndexError(f"step {k} outside trajectory of {N + 1} samples")
    if k == 0:
        v = (z[1] - z[0]) / lt.dt
    elif k == N:
        v = (z[N] - z[N - 1]) / lt.dt
    else:
        v = (z[k + 1] - z[k - 1]) / (2.0 * lt.dt)
    if channels is None:
        return v
    return v[np.asarray(channels, int)]


@dataclass
class FlowMatchBatch:
    """Stacked inpainting windows: contexts carry the masked view, targets the
    data velocity of the supervised channels, target_p0 the ground truth."""

    contexts: np.ndarray   # (S, T, C)
    targets: np.ndarray    # (S, K)
    target_p0: np.ndarray  # (S,)

    def __len__(self):
        return self.contexts.shape[0]

    def subset(self, idx):
        return FlowMatchBatch(self.contexts[idx], self.targets[idx],
                              self.target_p0[idx])


def make_flow_samples(lifted_list, T, selector, stride=1):
    """Sliding windows over each trajectory; targets use central differences,
    so window ends run over [T-1, N-1].  stride > 1 subsamples the heavily
    overlapping windows (training cost control)."""
    ctxs, tgts, tp0 = [], [], []
    for lt in lifted_list:
        z = lifted_channels(lt)
        zin = masked_channels(lt)
        chans = channel_indices(selector, z.shape[1])
        N = len(lt) - 1
        vel = np.empty((N + 1, len(chans)))
        vel[1:N] = (z[2:] - z[:-2])[:, chans] / (2.0 * lt.dt)
        vel[0] = (z[1] - z[0])[chans] / lt.dt
        vel[N] = (z[N] - z[N - 1])[chans] / lt.dt
        for k_end in range(T - 1, N, stride):
            ctxs.append(zin[k_end - T + 1:k_end + 1])
            tgts.append(vel[k_end])
            tp0.append(lt.p0[k_end])
    if not ctxs:
        raise DataValidationError("no training windows; trajectories shorter "
                                  "than the context length?")
    return FlowMatchBatch(np.stack(ctxs), np.stack(tgts), np.asarray(tp0))


def _scatter_slot(base_last, evolved, channels):
    """Head input with the evolved channels written into the final context
    entry; channels must be a contiguous index block."""
    lo, hi = int(channels[0]), int(channels[-1]) + 1
    if hi - lo != len(channels):
        raise ValueError("evolved channels must be contiguous")
    if lo == 0 and hi == base_last.shape[1]:
        return evolved
    from .autodiff import concat
    return concat([base_last[:, :lo], evolved, base_last[:, hi:]], axis=1)


def _midpoint_velocity(params, contexts, channels, dt, iters=12):
    """Velocity consistent with the implicit midpoint update on the selected
    channels, hidden state frozen; differentiable (unrolled fixed point)."""
    _, h_trace = nets.encoder_forward(params, contexts)
    h_top = h_trace[-1][-1]
    base_last = contexts[:, -1, :]
    z0 = base_last[:, channels]
    v = nets.head_velocity(params, base_last, h_top)
    for _ in range(iters):
        z_mid = z0 + (0.5 * dt) * v
        v = nets.head_velocity(params, _scatter_slot(base_last, z_mid, channels),
                               h_top)
    return v


def flow_matching_loss(params, batch, selector="p0", dt=None,
                       through_midpoint=False):
    """Mean over the batch of the squared velocity residual."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    chans = channel_indices(selector, batch.contexts.shape[2])
    if through_midpoint:
        if dt is None:
            raise ValueError("dt required when supervising through the midpoint")
        v = _midpoint_velocity(params, batch.contexts, chans, dt)
    else:
        v, _ = nets.encoder_forward(params, batch.contexts)
    loss = nets.batch_mse(v, batch.targets)
    if not np.all(np.isfinite(value_of(loss))):
        raise NumericalError("non-finite flow-matching prediction")
    return loss


def make_sympnet_pairs(lifted_list):
    """Consecutive flattened lifted-state pairs from every trajectory."""
    Z, Znext = [], []
    for lt in lifted_list:
        flat = lt.flat_states()
        Z.append(flat[:-1])
        Znext.append(flat[1:])
    return np.concatenate(Z), np.concatenate(Znext)


def prediction_loss(params, Z_t, Z_next, dt):
    """Mean squared one-step prediction error of the symplectic map."""
    return nets.batch_mse(nets.sympnet_step(params, Z_t, dt), Z_next)


# -- training loops -----------------------------------------------------------

def split_by_trajectory(n, seed, val_fraction=0.2):
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _epoch_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _copy_params(params):
    return nets.tree_map(lambda a: value_of(a).copy(), params)


def train_psn(dataset, cfg, hidden_dim=64, n_layers=3, window_stride=1):
    """Minibatch Adam on the flow-matching loss; returns best-val parameters
    and the per-epoch history (epoch, train_loss, val_loss, wall_time_s)."""
    if len(dataset) == 0:
        raise DataValidationError("empty dataset")
    tr_idx, va_idx = split_by_trajectory(len(dataset), cfg.seed)
    train = make_flow_samples([dataset[i] for i in tr_idx], cfg.context_len,
                              cfg.channels, stride=window_stride)
    val = (make_flow_samples([dataset[i] for i in va_idx], cfg.context_len,
                             cfg.channels, stride=window_stride)
           if len(va_idx) else train)
    C = train.contexts.shape[2]
    chans = channel_indices(cfg.channels, C)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params = nets.init_psn(C, hidden_dim, len(chans), rng, n_layers=n_layers)
    state = init_optimizer(params)

    def loss_on(p, batch):
        return flow_matching_loss(p, batch, selector=cfg.channels, dt=cfg.dt,
                                  through_midpoint=cfg.through_midpoint)

    best = (_copy_params(params), np.inf)
    history = []
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        tot, cnt = 0.0, 0
        for idx in _epoch_batches(len(train), cfg.batch_size, rng):
            batch = train.subset(idx)
            seen = []

            def closure(p):
                loss = loss_on(p, batch)
                seen.append(float(value_of(loss)))
                return loss

            grads = nets.param_gradients(params, closure)
            params, state = adam_step(params, grads, state, cfg)
            tot += seen[0] * len(idx)
            cnt += len(idx)
        if state.step == 0 and state.skipped > 0:
            raise NumericalError("all batches non-finite; training aborted")
        val_loss = float(value_of(loss_on(params, val)))
        if val_loss < best[1]:
            best = (_copy_params(params), val_loss)
        history.append({"epoch": epoch, "train_loss": tot / cnt,
                        "val_loss": val_loss,
                        "wall_time_s": time.perf_counter() - t_start})
    return best[0], history


def train_sympnet(dataset, cfg, n_modules=6, width=32, psn=None, a_scale=None):
    """Adam on the one-step prediction loss over gauge-lifted pairs.

    The default init scales the module amplitudes by 0.1/dt so the effective
    per-step update (which carries a dt factor) starts at the near-identity
    0.1 level while leaving the parameters at a trainable magnitude.

    The encoder (when given) is never touched: its parameters receive no
    gradients and the caller can byte-compare its serialized form.
    """
    if len(dataset) == 0:
        raise DataValidationError("empty dataset")
    tr_idx, va_idx = split_by_trajectory(len(dataset), cfg.seed)
    Z_tr, Zn_tr = make_sympnet_pairs([dataset[i] for i in tr_idx])
    if len(va_idx):
        Z_va, Zn_va = make_sympnet_pairs([dataset[i] for i in va_idx])
    else:
        Z_va, Zn_va = Z_tr, Zn_tr
    n_pos = Z_tr.shape[1] // 2
    center, scale = nets.precondition_from_data(Z_tr)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    if a_scale is None:
        a_scale = 0.1 / cfg.dt
    params = nets.init_sympnet(n_pos, rng, n_modules=n_modules, width=width,
                               a_scale=a_scale, center=center, scale=scale)
    state = init_optimizer(params)
    best = (_copy_params(params), np.inf)
    history = []
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        tot, cnt = 0.0, 0
        for idx in _epoch_batches(Z_tr.shape[0], cfg.batch_size, rng):
            zb, znb = Z_tr[idx], Zn_tr[idx]
            seen = []

            def closure(p):
                loss = prediction_loss(p, zb, znb, cfg.dt)
                seen.append(float(value_of(loss)))
                return loss

            grads = nets.param_gradients(params, closure)
            params, state = adam_step(params, grads, state, cfg)
            tot += seen[0] * len(idx)
            cnt += len(idx)
        if state.step == 0 and state.skipped > 0:
            raise NumericalError("all batches non-finite; training aborted")
        val_loss = float(value_of(prediction_loss(params, Z_va, Zn_va, cfg.dt)))
        if val_loss < best[1]:
            best = (_copy_params(params), val_loss)
        history.append({"epoch": epoch, "train_loss": tot / cnt,
                        "val_loss": val_loss,
                        "wall_time_s": time.perf_counter() - t_start})
    return best[0], history


# -- inference / evaluation ---------------------------------------------------

def _batched_midpoint_increments(params, contexts, channels, dt,
                                 tol=1e-10, max_iter=50):
    """Implicit-midpoint increments of the selected channels for a stack of
    observation windows (S, T, C); hidden state frozen per window."""
    _, h_trace = nets.encoder_forward(params, contexts)
    h_top = h_trace[-1][-1]
    base_last = contexts[:, -1, :]
    z0 = base_last[:, channels]
    z_new = z0.copy()
    bound = tol * (1.0 + np.linalg.norm(z0, axis=1))
    alpha = 1.0
    for it in range(max_iter):
        if 2 * it >= max_iter:
            alpha = 0.5
        v = nets.head_velocity(
            params, _scatter_slot(base_last, 0.5 * (z0 + z_new), channels), h_top)
        delta = alpha * (z0 + dt * v - z_new)
        z_new = z_new + delta
        if np.all(np.linalg.norm(delta, axis=1) <= bound):
            return z_new - z0
    raise NumericalError("midpoint increments did not converge during inference")


def predict_p0_series(psn, lt, cfg):
    """Inpainted p0 along a lifted trajectory, anchored at the true p0[0].

    The first T entries are the observation warm-up (ground truth); each
    later entry adds the encoder's midpoint increment computed from the
    observed window ending at the previous step.
    """
    T = cfg.context_len
    zin = masked_channels(lt)
    N = len(lt) - 1
    if N + 1 <= T:
        raise DataValidationError("trajectory shorter than the context length")
    chans = channel_indices(cfg.channels, zin.shape[1])
    windows = np.stack([zin[k - T + 1:k + 1] for k in range(T - 1, N)])
    inc = _batched_midpoint_increments(psn, windows, chans, cfg.dt)
    p0_slot_inc = inc[:, list(chans).index(P0_SLOT)]
    p0 = np.empty(N + 1)
    p0[:T] = lt.p0[:T]
    p0[T:] = p0[T - 1] + np.cumsum(p0_slot_inc)
    return p0


def rollout_sympnet(stepper, z0, n_steps, dt):
    """Iterate a one-step lifted map; stepper is SympNetParams or a callable."""
    if isinstance(stepper, nets.SympNetParams):
        phi = lambda z: nets.sympnet_step(stepper, z, dt)
    else:
        phi = stepper
    out = np.empty((n_steps + 1, z0.shape[-1]))
    out[0] = z0
    z = z0
    for k in range(n_steps):
        z = phi(z)
        out[k + 1] = z
    return out


def one_step_predictions(stepper, base, dt):
    """Predicted trajectory built from single-step forecasts of each observed
    state (the one-step rollout the predictor is trained for)."""
    out = np.empty_like(base)
    out[0] = base[0]
    if isinstance(stepper, nets.SympNetParams):
        out[1:] = nets.sympnet_step(stepper, base[:-1], dt)
    else:
        for k in range(base.shape[0] - 1):
            out[k + 1] = stepper(base[k])
    return out


def evaluate_rollout(psn, sympnet, lt, sys, horizon, cfg, start=None,
                     mode="one_step"):
    """Metrics for a predicted rollout against a held-out lifted trajectory.

    mode 'one_step' scores single-step forecasts along the horizon (the
    quantity the predictor is trained for; inputs carry the encoder-supplied
    p0 when an encoder is given).  mode 'autonomous' iterates the predictor
    from the initial state without looking at the data again.

    Returns p0 error stats (encoder inpainting), per-coordinate trajectory
    RMSE and dynamic ranges over the horizon, extended-Hamiltonian drift,
    constraint drift, and gauge residuals along the prediction.
    """
    N = len(lt) - 1
    T = cfg.context_len
    k0 = T if start is None else int(start)
    if horizon < 0 or k0 + horizon > N:
        raise ValueError(f"horizon {horizon} from step {k0} exceeds the "
                         f"{N + 1}-sample trajectory")
    if mode not in ("one_step", "autonomous"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    actual = lt.flat_states()
    metrics = {}

    if psn is not None:
        p0_pred = predict_p0_series(psn, lt, cfg)
        err = p0_pred[T:] - lt.p0[T:]
        metrics["p0_rmse"] = float(np.sqrt(np.mean(err ** 2)))
        metrics["p0_max_err"] = float(np.max(np.abs(err)))
        metrics["p0_pred"] = p0_pred
    else:
        metrics["p0_rmse"] = 0.0
        metrics["p0_max_err"] = 0.0
        metrics["p0_pred"] = lt.p0.copy()

    n_pos = actual.shape[1] // 2
    stepper = sympnet if sympnet is not None else (lambda z: z)
    if mode == "autonomous":
        z0 = actual[k0].copy()
        if psn is not None:
            z0[n_pos] = metrics["p0_pred"][k0]
        pred = rollout_sympnet(stepper, z0, horizon, cfg.dt)
    else:
        base = actual[k0:k0 + horizon + 1].copy()
        if psn is not None:
            base[:, n_pos] = metrics["p0_pred"][k0:k0 + horizon + 1]
        pred = one_step_predictions(stepper, base, cfg.dt)
    ref = actual[k0:k0 + horizon + 1]
    err = pred - ref
    metrics["coord_rmse"] = np.sqrt(np.mean(err ** 2, axis=0))
    metrics["coord_range"] = ref.max(axis=0) - ref.min(axis=0)
    metrics["pred_states"] = pred
    metrics["start"] = k0

    n_q, m = lt.q.shape[1], lt.lam.shape[1]
    hext = np.empty(horizon + 1)
    r0 = np.empty(horizon + 1)
    r_pi = np.empty(horizon + 1)
    phi_max = np.empty(horizon + 1)
    for i, flat in enumerate(pred):
        z = unflatten_lifted(flat, n_q, lt.p.shape[1], m)
        hext[i] = extended_hamiltonian(z, sys)
        H = _systems.hamiltonian(sys, z.q, z.p)
        phi = sys.constraints(z.q)
        r0[i] = z.p0 + H + float(z.lam @ phi)
        r_pi[i] = float(np.max(np.abs(z.pi))) if m else 0.0
        phi_max[i] = float(np.max(np.abs(phi))) if m else 0.0
    metrics["hext_drift"] = float(np.max(np.abs(hext - hext[0])))
    metrics["phi_drift"] = float(np.max(phi_max))
    metrics["gauge_r0_max"] = float(np.max(np.abs(r0)))
    metrics["gauge_rpi_max"] = float(np.max(r_pi))
    return metrics
