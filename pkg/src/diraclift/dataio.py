"""Serialization and reproducibility substrate: trajectory CSV files with
metadata sidecars, versioned JSON weight archives, the strict run
configuration format, and seeded randomness.

Numbers are written as decimals with 17 significant digits, which round-trip
64-bit floats exactly; rerunning any pipeline stage with the same
configuration and seed therefore reproduces its output files byte for byte.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import sys as _sysmod

import numpy as np

from . import nets, systems, training
from .errors import ConfigError, DataValidationError
from .geometry import LiftedTrajectory, Trajectory

FORMAT_VERSION = 1


def seeded_rng(seed):
    """Deterministic generator: PCG64 (O'Neill's permuted congruential
    generator, 128-bit state) under numpy's Generator interface.  Identical
    seeds yield identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def fmt(x):
    """17-significant-digit decimal; exact float64 round trip."""
    return format(float(x), ".17g")


# -- trajectory CSV -----------------------------------------------------------

def _columns(n_q, n_p, n_u, m, lifted):
    cols = ["traj_id", "k", "t"]
    cols += [f"q_{i}" for i in range(n_q)]
    cols += [f"p_{i}" for i in range(n_p)]
    cols += [f"u_{i}" for i in range(n_u)]
    if lifted:
        cols += [f"lambda_{i}" for i in range(m)]
        cols += [f"pi_{i}" for i in range(m)]
        cols += ["p0", "p_ctrl", "p_diss"]
    return cols


def _write_meta(path, meta, dims, lifted, n_traj):
    lines = [f"format_version={FORMAT_VERSION}", f"lifted={int(lifted)}",
             f"n_trajectories={n_traj}"]
    for key in ("n_q", "n_p", "n_u", "m"):
        lines.append(f"{key}={dims[key]}")
    for key in ("dt", "t0"):
        lines.append(f"{key}={fmt(meta.get(key, 0.0))}")
    lines.append(f"system_kind={meta.get('system_kind', '')}")
    for name, val in sorted(meta.get("system_params", {}).items()):
        lines.append(f"system_params.{name}={fmt(val)}")
    with open(_meta_path(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _meta_path(path):
    return os.fspath(path) + ".meta"


def _read_meta(path):
    meta = {}
    try:
        with open(_meta_path(path)) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                key, _, val = line.partition("=")
                meta[key] = val
    except FileNotFoundError as exc:
        raise DataValidationError(f"missing metadata sidecar for {path}") from exc
    return meta


def save_trajectories(trajs, path):
    """Write plain or lifted trajectories as CSV plus a metadata sidecar."""
    lifted = bool(trajs) and isinstance(trajs[0], LiftedTrajectory)
    if not trajs:
        with open(path, "w") as fh:
            fh.write("traj_id,k,t\n")
        _write_meta(path, {"dt": 0.0}, dict(n_q=0, n_p=0, n_u=0, m=0),
                    False, 0)
        return
    first = trajs[0]
    n_q, n_p, n_u = first.q.shape[1], first.p.shape[1], first.u.shape[1]
    m = first.lam.shape[1] if lifted else 0
    cols = _columns(n_q, n_p, n_u, m, lifted)
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    for tid, tr in enumerate(trajs):
        times = tr.q0 if lifted else tr.times
        for k in range(len(tr)):
            row = [str(tid), str(k), fmt(times[k])]
            row += [fmt(x) for x in tr.q[k]]
            row += [fmt(x) for x in tr.p[k]]
            row += [fmt(x) for x in tr.u[k]]
            if lifted:
                row += [fmt(x) for x in tr.lam[k]]
                row += [fmt(x) for x in tr.pi[k]]
                row += [fmt(tr.p0[k]), fmt(tr.p_ctrl[k]), fmt(tr.p_diss[k])]
            buf.write(",".join(row) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())
    meta = dict(first.meta)
    meta["dt"] = first.dt
    meta["t0"] = first.meta.get("t0", 0.0 if lifted else first.t0)
    _write_meta(path, meta, dict(n_q=n_q, n_p=n_p, n_u=n_u, m=m),
                lifted, len(trajs))


def _rebuild_system(meta):
    kind = meta.get("system_kind", "")
    if not kind:
        return None
    params = {k.split(".", 1)[1]: float(v) for k, v in meta.items()
              if k.startswith("system_params.")}
    return systems.make_system(kind, **params)


def load_trajectories(path, validate=True):
    """Load a trajectory CSV written by save_trajectories.

    Validates the header column for column, the uniform time grid, finiteness,
    and (for lifted files, when the system is reconstructible) the gauge
    residual.  Fails loudly with the offending line or column.
    """
    meta = _read_meta(path)
    if int(meta.get("format_version", -1)) != FORMAT_VERSION:
        raise DataValidationError(
            f"unsupported trajectory format version {meta.get('format_version')}")
    lifted = bool(int(meta.get("lifted", 0)))
    n_q, n_p = int(meta["n_q"]), int(meta["n_p"])
    n_u, m = int(meta["n_u"]), int(meta["m"])
    dt, t0 = float(meta["dt"]), float(meta["t0"])
    n_traj = int(meta["n_trajectories"])
    expect = _columns(n_q, n_p, n_u, m, lifted) if n_traj else ["traj_id", "k", "t"]

    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != expect:
            for i, (got, want) in enumerate(zip(header, expect)):
                if got != want:
                    raise DataValidationError(
                        f"header mismatch at column {i}: expected {want!r}, "
                        f"found {got!r}")
            raise DataValidationError(
                f"header has {len(header)} columns, expected {len(expect)}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(expect):
                raise DataValidationError(
                    f"line {lineno}: {len(parts)} fields, expected {len(expect)}")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise DataValidationError(f"line {lineno}: {exc}") from exc
    if not rows:
        return []
    data = np.asarray(rows)
    sysm = _rebuild_system(meta) if validate else None
    sys_meta = {"system_kind": meta.get("system_kind", ""),
                "system_params": {k.split(".", 1)[1]: float(v)
                                  for k, v in meta.items()
                                  if k.startswith("system_params.")},
                "t0": t0}
    out = []
    for tid in range(n_traj):
        block = data[data[:, 0] == tid]
        if block.shape[0] == 0:
            raise DataValidationError(f"trajectory {tid} missing from file")
        ks = block[:, 1].astype(int)
        if not np.array_equal(ks, np.arange(block.shape[0])):
            raise DataValidationError(f"trajectory {tid}: non-contiguous steps")
        t_expect = t0 + ks * dt
        if not np.array_equal(block[:, 2], t_expect):
            bad = int(np.argmax(block[:, 2] != t_expect))
            raise DataValidationError(
                f"trajectory {tid}: non-uniform dt at step {bad}")
        if not np.all(np.isfinite(block)):
            raise DataValidationError(f"trajectory {tid}: non-finite entries")
        i = 3
        q = block[:, i:i + n_q]; i += n_q
        p = block[:, i:i + n_p]; i += n_p
        u = block[:, i:i + n_u]; i += n_u
        if lifted:
            lam = block[:, i:i + m]; i += m
            pi = block[:, i:i + m]; i += m
            p0, p_ctrl, p_diss = block[:, i], block[:, i + 1], block[:, i + 2]
            lt = LiftedTrajectory(dt=dt, q0=block[:, 2], q=q, lam=lam, p0=p0,
                                  p=p, pi=pi, p_ctrl=p_ctrl, p_diss=p_diss,
                                  u=u, meta=dict(sys_meta))
            if validate and sysm is not None:
                lt.validate(sysm)
            out.append(lt)
        else:
            tr = Trajectory(dt=dt, q=q, p=p, u=u, t0=t0, meta=dict(sys_meta))
            if validate:
                tr.validate(sysm)
            out.append(tr)
    return out


# -- weight archives ----------------------------------------------------------

def _model_kind(params):
    if isinstance(params, nets.PsnParams):
        return "psn"
    if isinstance(params, nets.SympNetParams):
        return "sympnet"
    raise TypeError(f"unknown model container {type(params).__name__}")


def save_weights(params, path, config_fingerprint=""):
    """Versioned JSON archive: per-tensor records plus rebuild structure."""
    kind = _model_kind(params)
    records = []
    for name, leaf in nets.tree_leaves(params):
        if not isinstance(leaf, np.ndarray):
            continue
        if not np.all(np.isfinite(leaf)):
            raise DataValidationError(f"non-finite tensor {name!r}; refusing to save")
        records.append({"name": name, "shape": list(leaf.shape),
                        "data": leaf.ravel().tolist()})
    if kind == "psn":
        structure = {"n_layers": len(params.cells),
                     "input_dim": params.input_dim,
                     "hidden_dim": params.hidden_dim,
                     "out_dim": params.out_dim}
    else:
        structure = {"kinds": [mod.kind for mod in params.modules],
                     "n_pos": params.n_pos,
                     "width": params.modules[0].K.shape[0]}
    archive = {"format_version": FORMAT_VERSION, "model_kind": kind,
               "config_fingerprint": config_fingerprint,
               "structure": structure, "tensors": records}
    with open(path, "w") as fh:
        json.dump(archive, fh)
        fh.write("\n")


def load_weights(path, expect_kind=None, config_fingerprint=None):
    """Load a weight archive; returns (params, archive_header_dict)."""
    try:
        with open(path) as fh:
            archive = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataValidationError(f"corrupt weight archive {path}: {exc}") from exc
    if archive.get("format_version") != FORMAT_VERSION:
        raise DataValidationError(
            f"unknown weight archive version {archive.get('format_version')!r}")
    kind = archive.get("model_kind")
    if expect_kind is not None and kind != expect_kind:
        raise DataValidationError(
            f"expected a {expect_kind!r} archive, found {kind!r}")
    if (config_fingerprint and archive.get("config_fingerprint")
            and archive["config_fingerprint"] != config_fingerprint):
        print(f"WARN config fingerprint mismatch for {path}", file=_sysmod.stderr)
    tensors = {}
    for rec in archive.get("tensors", []):
        arr = np.asarray(rec["data"], dtype=float)
        if arr.size != int(np.prod(rec["shape"])):
            raise DataValidationError(
                f"tensor {rec['name']!r}: {arr.size} values for shape {rec['shape']}")
        tensors[rec["name"]] = arr.reshape(rec["shape"])
    st = archive.get("structure", {})
    if kind == "psn":
        rng = seeded_rng(0)
        params = nets.init_psn(st["input_dim"], st["hidden_dim"], st["out_dim"],
                               rng, n_layers=st["n_layers"])
    elif kind == "sympnet":
        kinds = st["kinds"]
        if any(k != ("up" if i % 2 == 0 else "low") for i, k in enumerate(kinds)):
            raise DataValidationError("module kinds must alternate starting 'up'")
        rng = seeded_rng(0)
        params = nets.init_sympnet(st["n_pos"], rng, n_modules=len(kinds),
                                   width=st["width"])
    else:
        raise DataValidationError(f"unknown model kind {kind!r}")
    expected = [(n, leaf) for n, leaf in nets.tree_leaves(params)
                if isinstance(leaf, np.ndarray)]
    if len(expected) != len(tensors):
        raise DataValidationError(
            f"{len(tensors)} tensor records, expected {len(expected)}")
    arrays = []
    for name, leaf in expected:
        if name not in tensors:
            raise DataValidationError(f"missing tensor record {name!r}")
        if tensors[name].shape != leaf.shape:
            raise DataValidationError(
                f"tensor {name!r}: shape {tensors[name].shape} != {leaf.shape}")
        arrays.append(tensors[name])
    filled = _fill_tree(params, dict(zip([n for n, _ in expected], arrays)))
    return filled, {"model_kind": kind,
                    "config_fingerprint": archive.get("config_fingerprint", ""),
                    "structure": st}


def _fill_tree(params, by_name):
    import dataclasses

    def fill(tree, prefix=""):
        if dataclasses.is_dataclass(tree):
            kwargs = {}
            for f in dataclasses.fields(tree):
                name = f"{prefix}.{f.name}" if prefix else f.name
                kwargs[f.name] = fill(getattr(tree, f.name), name)
            return type(tree)(**kwargs)
        if isinstance(tree, (tuple, list)):
            return type(tree)(fill(x, f"{prefix}.{i}") for i, x in enumerate(tree))
        if isinstance(tree, np.ndarray):
            return by_name[prefix]
        return tree

    return fill(params)


# -- run configuration --------------------------------------------------------

SCHEMA = {
    "system": {"kind": str, "mass": float, "stiffness": float, "damping": float,
               "length": float, "gravity": float, "mass1": float,
               "mass2": float, "length1": float, "length2": float,
               "damping1": float, "damping2": float},
    "control": {"kind": str, "amplitude": float, "frequency": float,
                "hold": float},
    "integrator": {"dt": float, "n_steps": int, "substeps": int},
    "dataset": {"n_trajectories": int, "seed": int, "init_q_range": float,
                "init_p_range": float, "init_angle_range": float,
                "init_omega_range": float},
    "psn": {"hidden_size": int, "layers": int, "context_len": int,
            "channels": str, "through_midpoint": bool, "window_stride": int},
    "sympnet": {"modules": int, "width": int},
    "train": {"learning_rate": float, "beta1": float, "beta2": float,
              "eps": float, "batch_size": int, "epochs": int, "seed": int},
}

DEFAULTS = {
    "control": {"kind": "zero", "amplitude": 0.0, "frequency": 1.0, "hold": 0.5},
    "integrator": {"substeps": 10},
    "dataset": {"seed": 0},
    "psn": {"hidden_size": 64, "layers": 3, "context_len": 10,
            "channels": "p0", "through_midpoint": False, "window_stride": 1},
    "sympnet": {"modules": 6, "width": 32},
    "train": {"learning_rate": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
              "batch_size": 64, "epochs": 200, "seed": 0},
}


def _parse_value(section, key, raw):
    typ = SCHEMA[section][key]
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


class RunConfig:
    """Flat, typed key-value configuration with sections.

    Unknown sections or keys are rejected; values round-trip losslessly
    through the text format.
    """

    def __init__(self, data=None):
        self.data = {section: dict(DEFAULTS.get(section, {}))
                     for section in SCHEMA}
        for section, vals in (data or {}).items():
            for key, val in vals.items():
                self.set(section, key, val)

    def set(self, section, key, value):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        self.data.setdefault(section, {})[key] = value

    def get(self, section, key, default=None):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config entry [{section}] {key}")
        if key not in self.data.get(section, {}):
            if default is None:
                raise ConfigError(f"missing required config entry [{section}] {key}")
            return default
        return self.data[section][key]

    def has(self, section, key):
        return key in self.data.get(section, {})

    @classmethod
    def parse(cls, text):
        cfg = cls()
        section = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(f"line {lineno}: unknown section [{section}]")
                continue
            if section is None:
                raise ConfigError(f"line {lineno}: key outside any section")
            key, eq, raw = line.partition("=")
            if not eq:
                raise ConfigError(f"line {lineno}: expected key = value")
            key = key.strip()
            if key not in SCHEMA[section]:
                raise ConfigError(f"line {lineno}: unknown key {key!r} "
                                  f"in section [{section}]")
            cfg.data[section][key] = _parse_value(section, key, raw)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.parse(fh.read())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc

    def dumps(self):
        lines = []
        for section in SCHEMA:
            vals = self.data.get(section, {})
            if not vals:
                continue
            lines.append(f"[{section}]")
            for key in sorted(vals):
                val = vals[key]
                if isinstance(val, bool):
                    text = "true" if val else "false"
                elif isinstance(val, float):
                    text = fmt(val)
                else:
                    text = str(val)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    def fingerprint(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.data == other.data


# -- config -> objects --------------------------------------------------------

_SYSTEM_KEYS = {
    "damped_oscillator": ("mass", "stiffness", "damping"),
    "pendulum_on_circle": ("mass", "length", "gravity", "damping"),
    "two_link_pinned": ("mass1", "mass2", "length1", "length2", "gravity",
                        "damping1", "damping2"),
}


def build_system(cfg):
    kind = cfg.get("system", "kind")
    if kind not in _SYSTEM_KEYS:
        raise ConfigError(f"unknown system kind {kind!r}")
    kwargs = {k: cfg.data["system"][k] for k in _SYSTEM_KEYS[kind]
              if k in cfg.data["system"]}
    return systems.make_system(kind, **kwargs)


def build_controls(cfg, n, n_u, base_seed):
    """One independent, reproducible control signal per trajectory."""
    sig = {k: cfg.data["control"][k] for k in ("kind", "amplitude",
                                               "frequency", "hold")}
    out = []
    for idx in range(n):
        child = int(np.random.SeedSequence((base_seed, 2, idx)).generate_state(1)[0])
        out.append(systems.ControlSignal(n_u=n_u, seed=child, **sig))
    return out


def sample_initial_conditions(cfg, sysm, n, base_seed):
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((base_seed, 1))))
    if sysm.kind == "damped_oscillator":
        return sysm.sample_states(n, rng,
                                  q_range=cfg.get("dataset", "init_q_range", 1.0),
                                  p_range=cfg.get("dataset", "init_p_range", 1.0))
    return sysm.sample_states(
        n, rng,
        angle_range=cfg.get("dataset", "init_angle_range", 1.5),
        omega_range=cfg.get("dataset", "init_omega_range", 1.5))


def train_config_from(cfg, seed_override=None):
    return training.TrainConfig(
        learning_rate=cfg.get("train", "learning_rate"),
        beta1=cfg.get("train", "beta1"),
        beta2=cfg.get("train", "beta2"),
        eps=cfg.get("train", "eps"),
        batch_size=cfg.get("train", "batch_size"),
        epochs=cfg.get("train", "epochs"),
        context_len=cfg.get("psn", "context_len"),
        dt=cfg.get("integrator", "dt"),
        seed=cfg.get("train", "seed") if seed_override is None else seed_override,
        channels=cfg.get("psn", "channels"),
        through_midpoint=cfg.get("psn", "through_midpoint"))


def write_metrics(history, path):
    """Per-epoch metrics CSV (epoch, train_loss, val_loss).

    Wall time stays in the in-memory history only, so rerunning a training
    command with the same seed reproduces this file byte for byte.
    """
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for row in history:
            fh.write(f"{row['epoch']},{fmt(row['train_loss'])},"
                     f"{fmt(row['val_loss'])}\n")
