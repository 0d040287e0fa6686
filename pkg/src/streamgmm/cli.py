"""Command-line surface.

Subcommands: ``simulate`` dumps generator output, ``estimate`` runs one
method over a CSV stream of batches, ``test`` screens a stream against a
reference batch, ``bench`` runs experiment config files, ``replay``
resumes from a serialized state snapshot.

CSV layout: header row names the columns ``y,x1..xp[,z1..zq]``; the
instrument block is optional.  Exit codes: 0 success, 2 usage error,
3 numeric failure.
"""

import argparse
import json
import sys

import numpy as np

from . import offline
from .core import Batch, OgmmState, Weighting, init_state, update_batch
from .errors import StreamGmmError
from .harness import ExperimentConfig, run_experiment
from .inference import (AnomalySnapshot, anomaly_full, anomaly_unrestricted,
                        contrast_interval, sargan_hansen)
from .moments import (IvMoment, OlsMoment, SmoothedQuantileMoment,
                      quantile_bandwidth)
from .simgen import SimModel, generate, moment_model, theta_star


class UsageError(Exception):
    pass


def _read_csv(path):
    fh = sys.stdin if path in (None, "-") else open(path)
    try:
        header = fh.readline().strip()
        if not header:
            raise UsageError("empty input")
        names = [c.strip() for c in header.split(",")]
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names):
                raise UsageError(f"line {lineno}: expected {len(names)} fields, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise UsageError(f"line {lineno}: {exc}") from None
        if not rows:
            raise UsageError("no data rows")
        return names, np.array(rows)
    finally:
        if fh is not sys.stdin:
            fh.close()


def _layout(names):
    if names[0] != "y":
        raise UsageError("first column must be named y")
    p = sum(1 for c in names if c.startswith("x"))
    q = sum(1 for c in names if c.startswith("z"))
    expected = ["y"] + [f"x{i}" for i in range(1, p + 1)] + [f"z{i}" for i in range(1, q + 1)]
    if names != expected:
        raise UsageError(f"columns must be {','.join(expected)}")
    return p, q


def _model_from(args, p, q):
    if args.model == "ols":
        if q:
            raise UsageError("ols layout cannot contain instrument columns")
        return OlsMoment(p)
    if args.model == "iv":
        if not q:
            raise UsageError("iv layout needs instrument columns")
        return IvMoment(p, q)
    if args.model == "sqr":
        if q:
            raise UsageError("sqr layout cannot contain instrument columns")
        return SmoothedQuantileMoment(p, args.tau)
    raise UsageError(f"unknown model {args.model!r}")


def _weighting_from(args, q):
    if args.weighting == "fixed":
        return Weighting.identity(q)
    if args.weighting == "welford":
        return Weighting.welford(q)
    return Weighting.kernel_lrv(q, lam=args.lam, phi=args.phi)


def _batches(data, size, model, quantile):
    n_prev = 0
    for start in range(0, data.shape[0], size):
        chunk = data[start:start + size]
        aux = None
        if quantile:
            ref = n_prev if n_prev > 0 else chunk.shape[0]
            aux = {"bandwidth": quantile_bandwidth(model.p, ref)}
        yield Batch(chunk, aux=aux)
        n_prev += chunk.shape[0]


def _initial_fit(model, batch, args):
    obs = batch.obs
    if args.model == "ols":
        return np.linalg.lstsq(obs[:, 1:1 + model.p], obs[:, 0], rcond=None)[0]
    if args.model == "iv":
        return offline.tsls(obs[:, 0], obs[:, 1:1 + model.p],
                            obs[:, 1 + model.p:])
    return offline.initial_quantile_fit(obs[:, 0], obs[:, 1:1 + model.p],
                                        args.tau)


def _print_state(state, alpha, stream=sys.stdout):
    q, p = state.Uprime.shape[0], state.theta.shape[0]
    cis = []
    try:
        sigma = state.weighting.sigma()
        for j in range(p):
            e = np.zeros(p)
            e[j] = 1.0
            cis.append(contrast_interval(state, sigma, e, alpha))
    except StreamGmmError:
        cis = [(float("nan"), float("nan"))] * p
    fields = [f"b={state.b}", f"N={state.N}"]
    for j in range(p):
        fields.append(f"theta{j + 1}={state.theta[j]:.6g}"
                      f" [{cis[j][0]:.6g}, {cis[j][1]:.6g}]")
    if q > p:
        rep = sargan_hansen(state)
        fields.append(f"J={rep.statistic:.4g} (p={rep.p_value:.4g})")
    print("  ".join(fields), file=stream)


def cmd_simulate(args):
    sim = SimModel(variant=args.model, seed=args.seed, theta2=args.theta2,
                   tau=args.tau)
    rows = generate(sim, args.n)
    m = moment_model(sim)
    names = ["y"] + [f"x{i}" for i in range(1, m.p + 1)]
    if rows.shape[1] > 1 + m.p:
        names += [f"z{i}" for i in range(1, rows.shape[1] - m.p)]
    out = sys.stdout if args.out in (None, "-") else open(args.out, "w")
    try:
        print(",".join(names), file=out)
        for r in rows:
            print(",".join(repr(v) for v in r), file=out)
    finally:
        if out is not sys.stdout:
            out.close()
    print(f"# theta* = {theta_star(sim).tolist()}", file=sys.stderr)
    return 0


def cmd_estimate(args):
    names, data = _read_csv(args.data)
    p, q = _layout(names)
    model = _model_from(args, p, q)
    state = None
    for batch in _batches(data, args.batches, model, args.model == "sqr"):
        if state is None:
            theta1 = _initial_fit(model, batch, args)
            state = init_state(model, batch, theta1,
                               _weighting_from(args, model.q))
        else:
            state = update_batch(state, model, batch)
        _print_state(state, args.alpha)
    if args.save_snapshot:
        with open(args.save_snapshot, "w") as fh:
            fh.write(state.to_json())
    return 0


def cmd_test(args):
    names, data = _read_csv(args.data)
    p, q = _layout(names)
    model = _model_from(args, p, q)
    batches = list(_batches(data, args.batches, model, args.model == "sqr"))
    if len(batches) < 2:
        raise UsageError("need at least a reference batch and one test batch")
    theta1 = _initial_fit(model, batches[0], args)
    state = init_state(model, batches[0], theta1, _weighting_from(args, model.q))

    def offline_gmm(mdl, batch):
        obs = batch.obs
        return offline.twostep_linear_iv(obs[:, 0], obs[:, 1:1 + mdl.p],
                                         obs[:, 1 + mdl.p:], lrv="sample")

    for b, batch in enumerate(batches[1:], start=2):
        ref = AnomalySnapshot.from_state(state)
        candidate = update_batch(state, model, batch)
        parts = [f"b={b}"]
        rep_f = anomaly_full(ref, candidate, model, batch)
        parts.append(f"T_full={rep_f.statistic:.4g} (p={rep_f.p_value:.4g})")
        if model.q > model.p:
            rep_u = anomaly_unrestricted(ref, model, batch, offline_gmm)
            parts.append(f"T_unres={rep_u.statistic:.4g} (p={rep_u.p_value:.4g})")
            rep_s = sargan_hansen(candidate)
            parts.append(f"J={rep_s.statistic:.4g} (p={rep_s.p_value:.4g})")
        rejected = rep_f.reject_at(args.alpha)
        parts.append("ANOMALY" if rejected else "ok")
        if not rejected:
            state = candidate
        print("  ".join(parts))
    return 0


def cmd_bench(args):
    cfg = ExperimentConfig.from_file(args.config)
    if args.out:
        cfg.out = args.out
    if args.reps:
        cfg.reps = args.reps
    rows, failures = run_experiment(cfg, progress=True)
    if not cfg.out:
        from .harness import metrics_csv
        sys.stdout.write(metrics_csv(rows))
    if failures:
        print(f"# {len(failures)} replication failures", file=sys.stderr)
    return 0


def cmd_replay(args):
    with open(args.snapshot) as fh:
        state = OgmmState.from_json(fh.read())
    names, data = _read_csv(args.data)
    p, q = _layout(names)
    model = _model_from(args, p, q)
    if model.p != state.theta.shape[0] or model.q != state.Uprime.shape[0]:
        raise UsageError("snapshot dimensions do not match the data layout")
    for batch in _batches(data, args.batches, model, args.model == "sqr"):
        state = update_batch(state, model, batch)
        _print_state(state, args.alpha)
    if args.save_snapshot:
        with open(args.save_snapshot, "w") as fh:
            fh.write(state.to_json())
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="streamgmm",
                                 description="streaming GMM estimation and inference")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="dump simulated observations as CSV")
    sim.add_argument("--model", required=True,
                     choices=[f"m{i}" for i in range(1, 9)])
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--theta2", type=float, default=0.0)
    sim.add_argument("--tau", type=float, default=0.1)
    sim.add_argument("--out", default=None)
    sim.set_defaults(func=cmd_simulate)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, choices=["ols", "iv", "sqr"])
    common.add_argument("--data", default="-", help="CSV path or - for stdin")
    common.add_argument("--batches", type=int, default=500,
                        help="observations per batch")
    common.add_argument("--weighting", default="klrv",
                        choices=["fixed", "welford", "klrv"])
    common.add_argument("--lambda", dest="lam", type=int, default=1)
    common.add_argument("--phi", type=float, default=1.0)
    common.add_argument("--tau", type=float, default=0.5)
    common.add_argument("--alpha", type=float, default=0.05)

    est = sub.add_parser("estimate", parents=[common],
                         help="stream batches, print estimates and CIs")
    est.add_argument("--save-snapshot", default=None)
    est.set_defaults(func=cmd_estimate)

    tst = sub.add_parser("test", parents=[common],
                         help="anomaly screening against the first batch")
    tst.set_defaults(func=cmd_test)

    ben = sub.add_parser("bench", help="run an experiment config file")
    ben.add_argument("config")
    ben.add_argument("--out", default=None)
    ben.add_argument("--reps", type=int, default=None)
    ben.set_defaults(func=cmd_bench)

    rep = sub.add_parser("replay", parents=[common],
                         help="resume from a state snapshot")
    rep.add_argument("--snapshot", required=True)
    rep.add_argument("--save-snapshot", default=None)
    rep.set_defaults(func=cmd_replay)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StreamGmmError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
