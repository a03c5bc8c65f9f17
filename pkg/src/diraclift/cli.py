"""Pipeline command line: generate | lift | train-psn | train-sympnet |
rollout | verify.

Every subcommand is a deterministic function of its input files, the
configuration, and the seed; rerunning with identical inputs reproduces the
output files byte for byte.  Numerical failures exit with code 3 and print a
machine-parsable diagnostic line prefixed "ERR " on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dataio, geometry, integrators, systems, training, verification
from .errors import (ConfigError, DataValidationError, NoConvergenceError,
                     NumericalError)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
EXIT_INTERNAL = 4


def _err(msg):
    print(f"ERR {msg}", file=sys.stderr)


def _say(args, msg):
    if not getattr(args, "quiet", False):
        print(msg)


def _load_config(args):
    cfg = dataio.RunConfig.load(args.config)
    if args.seed is not None:
        cfg.set("dataset", "seed", int(args.seed))
        cfg.set("train", "seed", int(args.seed))
    return cfg


def cmd_generate(args):
    cfg = _load_config(args)
    sysm = dataio.build_system(cfg)
    n = cfg.get("dataset", "n_trajectories")
    seed = cfg.get("dataset", "seed")
    n_steps = cfg.get("integrator", "n_steps")
    dt = cfg.get("integrator", "dt")
    substeps = cfg.get("integrator", "substeps")
    q0, p0 = dataio.sample_initial_conditions(cfg, sysm, n, seed)
    ctrls = dataio.build_controls(cfg, n, sysm.n_u, seed)
    trajs = integrators.generate_trajectories(sysm, q0, p0, ctrls, n_steps, dt,
                                              substeps=substeps)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "trajectories.csv")
    dataio.save_trajectories(trajs, out_csv)
    cfg.write(os.path.join(args.out, "config_resolved.cfg"))
    worst = 0.0
    for tid, tr in enumerate(trajs):
        H = systems.hamiltonian(sysm, tr.q, tr.p)
        resid = float(np.max(np.abs(H - H[0] - (tr.w_ctrl - tr.w_diss))))
        worst = max(worst, resid)
        _say(args, f"traj {tid}: energy-bookkeeping residual {resid:.3e}")
    _say(args, f"wrote {out_csv} ({n} trajectories); "
               f"max energy-bookkeeping residual {worst:.3e}")
    return EXIT_OK


def cmd_lift(args):
    cfg = _load_config(args)
    sysm = dataio.build_system(cfg)
    trajs = dataio.load_trajectories(args.traj)
    lifted = [geometry.dirac_lift(tr, sysm) for tr in trajs]
    dataio.save_trajectories(lifted, args.out)
    worst_r0 = worst_pi = worst_drift = 0.0
    for lt in lifted:
        H = systems.hamiltonian(sysm, lt.q, lt.p)
        phi = sysm.constraints(lt.q)
        hext = lt.p0 + H + np.sum(lt.lam * phi, axis=-1)
        worst_r0 = max(worst_r0, float(np.max(np.abs(hext))))
        if lt.pi.shape[1]:
            worst_pi = max(worst_pi, float(np.max(np.abs(lt.pi))))
        worst_drift = max(worst_drift, float(np.max(np.abs(hext - hext[0]))))
    _say(args, f"wrote {args.out} ({len(lifted)} lifted trajectories)")
    _say(args, f"max gauge residual r0 {worst_r0:.3e}, r_pi {worst_pi:.3e}; "
               f"max extended-Hamiltonian drift {worst_drift:.3e}")
    return EXIT_OK


def cmd_train_psn(args):
    cfg = _load_config(args)
    dataset = dataio.load_trajectories(args.lifted)
    tcfg = dataio.train_config_from(cfg)
    params, history = training.train_psn(
        dataset, tcfg,
        hidden_dim=cfg.get("psn", "hidden_size"),
        n_layers=cfg.get("psn", "layers"),
        window_stride=cfg.get("psn", "window_stride"))
    os.makedirs(args.out, exist_ok=True)
    dataio.save_weights(params, os.path.join(args.out, "psn_weights.json"),
                        config_fingerprint=cfg.fingerprint())
    dataio.write_metrics(history, os.path.join(args.out, "psn_metrics.csv"))
    best = min(history, key=lambda row: row["val_loss"])
    _say(args, f"best val loss {best['val_loss']:.6e} at epoch {best['epoch']}")
    print(f"wall time {history[-1]['wall_time_s']:.1f}s", file=sys.stderr)
    return EXIT_OK


def cmd_train_sympnet(args):
    cfg = _load_config(args)
    dataset = dataio.load_trajectories(args.lifted)
    with open(args.psn, "rb") as fh:
        psn_bytes_before = fh.read()
    psn_params, _ = dataio.load_weights(args.psn, expect_kind="psn")
    tcfg = dataio.train_config_from(cfg)
    params, history = training.train_sympnet(
        dataset, tcfg,
        n_modules=cfg.get("sympnet", "modules"),
        width=cfg.get("sympnet", "width"),
        psn=psn_params)
    with open(args.psn, "rb") as fh:
        if fh.read() != psn_bytes_before:
            raise NumericalError("frozen encoder archive changed during training")
    os.makedirs(args.out, exist_ok=True)
    dataio.save_weights(params, os.path.join(args.out, "sympnet_weights.json"),
                        config_fingerprint=cfg.fingerprint())
    dataio.write_metrics(history, os.path.join(args.out, "sympnet_metrics.csv"))
    best = min(history, key=lambda row: row["val_loss"])
    _say(args, f"best val loss {best['val_loss']:.6e} at epoch {best['epoch']}")
    print(f"wall time {history[-1]['wall_time_s']:.1f}s", file=sys.stderr)
    return EXIT_OK


def _lifted_coord_names(lt):
    names = ["q0"]
    names += [f"q_{i}" for i in range(lt.q.shape[1])]
    names += [f"lambda_{i}" for i in range(lt.lam.shape[1])]
    names += ["p0"]
    names += [f"p_{i}" for i in range(lt.p.shape[1])]
    names += [f"pi_{i}" for i in range(lt.pi.shape[1])]
    return names


def cmd_rollout(args):
    cfg = _load_config(args)
    if args.psn is None and args.sympnet is None:
        raise ConfigError("rollout needs --psn and/or --sympnet weights")
    sysm = dataio.build_system(cfg)
    dataset = dataio.load_trajectories(args.lifted)
    if not 0 <= args.traj_index < len(dataset):
        raise ConfigError(f"--traj-index {args.traj_index} outside the "
                          f"{len(dataset)}-trajectory file")
    lt = dataset[args.traj_index]
    tcfg = dataio.train_config_from(cfg)
    k0 = tcfg.context_len
    if args.horizon < 1 or k0 + args.horizon > len(lt) - 1:
        _err(f"usage: horizon must be in [1, {len(lt) - 1 - k0}] for this file")
        return EXIT_USAGE
    psn = sympnet = None
    if args.psn:
        psn, _ = dataio.load_weights(args.psn, expect_kind="psn",
                                     config_fingerprint=cfg.fingerprint())
    if args.sympnet:
        sympnet, _ = dataio.load_weights(args.sympnet, expect_kind="sympnet",
                                         config_fingerprint=cfg.fingerprint())
    metrics = training.evaluate_rollout(psn, sympnet, lt, sysm,
                                        args.horizon, tcfg,
                                        mode=args.mode.replace("-", "_"))
    names = _lifted_coord_names(lt)
    actual = lt.flat_states()
    pred = metrics["pred_states"]
    with open(args.out, "w") as fh:
        cols = ["k", "t"]
        cols += [f"actual_{n}" for n in names]
        cols += [f"pred_{n}" for n in names]
        if psn is not None:
            cols.append("psn_p0")
        fh.write(",".join(cols) + "\n")
        for i in range(args.horizon + 1):
            k = metrics["start"] + i
            row = [str(k), dataio.fmt(lt.q0[k])]
            row += [dataio.fmt(x) for x in actual[k]]
            row += [dataio.fmt(x) for x in pred[i]]
            if psn is not None:
                row.append(dataio.fmt(metrics["p0_pred"][k]))
            fh.write(",".join(row) + "\n")
    with open(args.out + ".metrics", "w") as fh:
        fh.write(f"p0_rmse={dataio.fmt(metrics['p0_rmse'])}\n")
        fh.write(f"p0_max_err={dataio.fmt(metrics['p0_max_err'])}\n")
        for name, rmse, rng_ in zip(names, metrics["coord_rmse"],
                                    metrics["coord_range"]):
            fh.write(f"rmse_{name}={dataio.fmt(rmse)}\n")
            fh.write(f"range_{name}={dataio.fmt(rng_)}\n")
        fh.write(f"hext_drift={dataio.fmt(metrics['hext_drift'])}\n")
        fh.write(f"phi_drift={dataio.fmt(metrics['phi_drift'])}\n")
        fh.write(f"gauge_r0_max={dataio.fmt(metrics['gauge_r0_max'])}\n")
        fh.write(f"gauge_rpi_max={dataio.fmt(metrics['gauge_rpi_max'])}\n")
    _say(args, f"wrote {args.out}; p0 RMSE {metrics['p0_rmse']:.4e}, "
               f"Hext drift {metrics['hext_drift']:.4e}, "
               f"phi drift {metrics['phi_drift']:.4e}")
    return EXIT_OK


def cmd_verify(args):
    scopes = args.scope or list(verification.SCOPES)
    if "all" in scopes:
        scopes = list(verification.SCOPES)
    sympnet = None
    if args.sympnet:
        sympnet, _ = dataio.load_weights(args.sympnet, expect_kind="sympnet")
    seed = 0 if args.seed is None else int(args.seed)
    records = verification.run_suite(scopes, seed=seed, sympnet=sympnet)
    width = max(len(r["name"]) for r in records)
    all_ok = True
    for r in records:
        status = "PASS" if r["ok"] else "FAIL"
        line = (f"{r['name']:<{width}}  {r['value']:>12.4e} "
                f"{r['op']} {r['bound']:<10.2e} {status}")
        if r["ok"]:
            _say(args, line)
        else:
            print(line)
            all_ok = False
    if not all_ok:
        _err("verification failed")
        return EXIT_NUMERICAL
    _say(args, f"all {len(records)} checks passed")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="diraclift",
        description="Symplectification-lift pipeline over CSV files")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="run configuration file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seeds")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("generate", help="simulate reference trajectories")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("lift", help="lift trajectories into the extended space")
    common(p)
    p.add_argument("--traj", required=True, help="trajectory CSV")
    p.add_argument("--out", required=True, help="lifted CSV path")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("train-psn", help="train the momentum-inpainting encoder")
    common(p)
    p.add_argument("--lifted", required=True, help="lifted CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train_psn)

    p = sub.add_parser("train-sympnet", help="train the symplectic step predictor")
    common(p)
    p.add_argument("--lifted", required=True, help="lifted CSV")
    p.add_argument("--psn", required=True, help="frozen encoder archive")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train_sympnet)

    p = sub.add_parser("rollout", help="predict and score a held-out trajectory")
    common(p)
    p.add_argument("--lifted", required=True, help="lifted CSV")
    p.add_argument("--psn", default=None, help="encoder archive")
    p.add_argument("--sympnet", default=None, help="step predictor archive")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--traj-index", type=int, default=0)
    p.add_argument("--mode", choices=["one-step", "autonomous"],
                   default="one-step",
                   help="score single-step forecasts along the horizon "
                        "(default) or iterate the predictor freely")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("verify", help="run the property suites")
    common(p, config_required=False)
    p.add_argument("--scope", action="append",
                   choices=sorted(verification.SCOPES) + ["all"],
                   help="repeatable; default all")
    p.add_argument("--sympnet", default=None,
                   help="check a stored step-predictor archive")
    p.set_defaults(func=cmd_verify)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config: {exc}")
        return EXIT_USAGE
    except (DataValidationError, OSError) as exc:
        _err(f"data: {exc}")
        return EXIT_DATA
    except (NoConvergenceError, NumericalError, np.linalg.LinAlgError) as exc:
        step = getattr(exc, "step", None)
        suffix = f" (step {step})" if step is not None else ""
        _err(f"numerical: {exc}{suffix}")
        return EXIT_NUMERICAL
    except Exception as exc:  # pragma: no cover - internal failure surface
        _err(f"internal: {type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


def main():
    sys.exit(run())
