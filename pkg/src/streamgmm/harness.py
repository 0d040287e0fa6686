"""Experiment orchestration: seeded replications across methods with
CSV/JSON output.

A config names a simulation design, a batch schedule, a list of methods
and a replication count.  Each replication streams the batches through
every method, recording at each checkpoint the tracked-contrast error, CI
membership of the target, over-identification decisions and wall time of
the update call.  Aggregation is a deterministic fold in replication
order; metrics files are byte-identical across runs up to the timing
column.
"""

import concurrent.futures
import json
import platform
import time
from dataclasses import dataclass

import numpy as np

from . import offline
from .core import Weighting, init_state, update_batch, update_batch_implicit
from .inference import contrast_interval, sargan_hansen
from .moments import LeqrEstimator, quantile_bandwidth
from .sgmm import SgmmEstimator
from .simgen import SimModel, batch_stream, moment_model, theta_star

SCHEMA_VERSION = 1

CSV_COLUMNS = ["method", "b", "N", "mse", "mae", "coverage",
               "rejection_rate", "mean_time_s"]


@dataclass
class ExperimentConfig:
    model: dict
    methods: list
    batch_sizes: list
    reps: int = 1
    seed: int = 0
    alpha: float = 0.05
    n_jobs: int = 1
    out: str | None = None

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if any(s < 1 for s in self.batch_sizes):
            raise ValueError("batch sizes must be positive")

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "model": self.model,
                "methods": self.methods, "batch_sizes": list(self.batch_sizes),
                "reps": self.reps, "seed": self.seed, "alpha": self.alpha,
                "n_jobs": self.n_jobs, "out": self.out}

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {version!r}")
        return cls(model=d["model"], methods=d["methods"],
                   batch_sizes=d["batch_sizes"], reps=d.get("reps", 1),
                   seed=d.get("seed", 0), alpha=d.get("alpha", 0.05),
                   n_jobs=d.get("n_jobs", 1), out=d.get("out"))

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _sim_for(cfg, rep):
    m = dict(cfg.model)
    variant = m.pop("variant")
    return SimModel(variant=variant, seed=cfg.seed + rep, **m)


def _tracked_contrast(sim):
    """Scalar the experiment reports on: theta_1 for regression designs,
    the summed coefficient for quantile designs."""
    p = moment_model(sim).p
    if sim.variant in ("m5", "m6"):
        return np.ones(p)
    w = np.zeros(p)
    w[0] = 1.0
    return w


def _initial_estimate(sim, model, batch):
    if sim.variant in ("m5", "m6"):
        return offline.initial_quantile_fit(batch.obs[:, 0], batch.obs[:, 1:],
                                            sim.tau)
    Y = batch.obs[:, 0]
    X = batch.obs[:, 1:1 + model.p]
    Z = batch.obs[:, 1 + model.p:]
    if sim.variant == "m1":
        return offline.tsls(Y, X, Z)
    theta, _ = offline.twostep_linear_iv(Y, X, Z, lrv="bartlett")
    return theta


def _make_weighting(spec, q):
    kind = spec.get("weighting", "klrv")
    if kind == "fixed":
        return Weighting.identity(q)
    if kind == "welford":
        return Weighting.welford(q)
    if kind == "klrv":
        return Weighting.kernel_lrv(q, lam=spec.get("lam", 1),
                                    phi=spec.get("phi", 1.0),
                                    pilot=spec.get("pilot", 0))
    raise ValueError(f"unknown weighting {kind!r}")


def _quantile_aux(model):
    def aux_fn(b, n_prev):
        n_ref = n_prev if n_prev > 0 else None
        return None if n_ref is None else {"bandwidth": quantile_bandwidth(model.p, n_ref)}
    return aux_fn


class _OgmmRunner:
    def __init__(self, spec, sim, model, alpha):
        self.spec = spec
        self.sim = sim
        self.model = model
        self.alpha = alpha
        self.state = None
        self.implicit = spec.get("implicit", False)

    def start(self, batch):
        theta1 = _initial_estimate(self.sim, self.model, batch)
        w = _make_weighting(self.spec, self.model.q)
        t0 = time.perf_counter()
        self.state = init_state(self.model, batch, theta1, w)
        return time.perf_counter() - t0

    def step(self, batch):
        t0 = time.perf_counter()
        if self.implicit:
            self.state = update_batch_implicit(self.state, self.model, batch)
        else:
            self.state = update_batch(self.state, self.model, batch)
        return time.perf_counter() - t0

    def record(self, contrast, target):
        est = float(contrast @ self.state.theta)
        lo, hi = contrast_interval(self.state, self.state.weighting.sigma(),
                                   contrast, self.alpha)
        reject = None
        if self.model.q > self.model.p:
            reject = sargan_hansen(self.state).reject_at(self.alpha)
        return est - target, lo <= target <= hi, reject


class _SgmmRunner:
    def __init__(self, spec, sim, model, alpha):
        self.spec = spec
        self.sim = sim
        self.model = model
        self.alpha = alpha
        self.est = None
        self._aux = None

    def start(self, batch):
        theta0 = _initial_estimate(self.sim, self.model, batch)
        t0 = time.perf_counter()
        self.est = SgmmEstimator(self.model, batch, theta0,
                                 kappa=self.spec.get("kappa", 0.5),
                                 a=self.spec.get("a", 0.501))
        return time.perf_counter() - t0

    def step(self, batch):
        t0 = time.perf_counter()
        self.est.step_batch(batch.obs, aux=batch.aux)
        return time.perf_counter() - t0

    def record(self, contrast, target):
        est = float(contrast @ self.est.theta_bar)
        lo, hi = self.est.contrast_interval(contrast, self.alpha)
        reject = None
        if self.model.q > self.model.p and self.est.k > 0:
            reject = self.est.overident_report().reject_at(self.alpha)
        return est - target, lo <= target <= hi, reject


class _OfflineRunner:
    """Re-fits on all data seen so far at every checkpoint."""

    def __init__(self, spec, sim, model, alpha):
        self.kind = spec["method"]
        self.sim = sim
        self.model = model
        self.alpha = alpha
        self.rows = []
        self.theta = None
        self.Sigma = None

    def start(self, batch):
        return self.step(batch)

    def step(self, batch):
        self.rows.append(batch.obs)
        data = np.vstack(self.rows)
        Y, X = data[:, 0], data[:, 1:1 + self.model.p]
        Z = data[:, 1 + self.model.p:]
        t0 = time.perf_counter()
        if self.kind == "tsls":
            self.theta = offline.tsls(Y, X, Z)
            from .lrv import bartlett_lrv, pd_adjust
            g = Z * (Y - X @ self.theta)[:, None]
            self.Sigma = pd_adjust(bartlett_lrv(g))
        else:
            self.theta, self.Sigma = offline.twostep_linear_iv(Y, X, Z)
        self._n = data.shape[0]
        self._Z, self._X = Z, X
        return time.perf_counter() - t0

    def record(self, contrast, target):
        from .inference import normal_quantile
        from .lrv import pd_adjust
        est = float(contrast @ self.theta)
        V = -self._Z.T @ self._X / self._n
        S = V.T @ np.linalg.solve(self.Sigma, V)
        var = float(contrast @ np.linalg.solve(pd_adjust(S), contrast)) / self._n
        z = normal_quantile(1.0 - self.alpha / 2.0)
        half = z * np.sqrt(var)
        reject = None
        if self.model.q > self.model.p:
            resid = np.vstack(self.rows)[:, 0] - self._X @ self.theta
            gbar = (self._Z * resid[:, None]).mean(axis=0)
            stat = self._n * float(gbar @ np.linalg.solve(self.Sigma, gbar))
            from .inference import _report
            reject = _report(stat, self.model.q - self.model.p,
                             "offline_j").reject_at(self.alpha)
        return est - target, est - half <= target <= est + half, reject


class _LeqrRunner:
    def __init__(self, spec, sim, model, alpha):
        self.spec = spec
        self.sim = sim
        self.model = model
        self.alpha = alpha
        self.est = None

    def start(self, batch):
        theta0 = _initial_estimate(self.sim, self.model, batch)
        memory = self.spec.get("memory", batch.n)
        t0 = time.perf_counter()
        self.est = LeqrEstimator(self.model.p, self.sim.tau, theta0, memory)
        self.est.update(batch.obs)
        return time.perf_counter() - t0

    def step(self, batch):
        t0 = time.perf_counter()
        self.est.update(batch.obs)
        return time.perf_counter() - t0

    def record(self, contrast, target):
        est = float(contrast @ self.est.theta)
        return est - target, None, None


_RUNNERS = {"ogmm": _OgmmRunner, "sgmm": _SgmmRunner, "gmm": _OfflineRunner,
            "tsls": _OfflineRunner, "leqr": _LeqrRunner}


def method_label(spec):
    base = spec["method"]
    extra = []
    if base == "ogmm":
        extra.append(spec.get("weighting", "klrv"))
        if spec.get("implicit"):
            extra.append("implicit")
    if base == "sgmm" and "kappa" in spec:
        extra.append(f"k{spec['kappa']}")
    return "-".join([base] + extra) if extra else base


def _run_replication(cfg, rep):
    sim = _sim_for(cfg, rep)
    model = moment_model(sim)
    contrast = _tracked_contrast(sim)
    target = float(contrast @ theta_star(sim))
    aux_fn = _quantile_aux(model) if sim.variant in ("m5", "m6") else None

    runners = []
    for spec in cfg.methods:
        runners.append((method_label(spec),
                        _RUNNERS[spec["method"]](spec, sim, model, cfg.alpha)))

    records = []
    N = 0
    for b, batch in enumerate(batch_stream(sim, cfg.batch_sizes, aux_fn), start=1):
        if b == 1 and aux_fn is not None:
            batch.aux = {"bandwidth": quantile_bandwidth(model.p, batch.n)}
        N += batch.n
        for label, runner in runners:
            try:
                dt = runner.start(batch) if b == 1 else runner.step(batch)
                err, covered, reject = runner.record(contrast, target)
                records.append({"method": label, "rep": rep, "b": b, "N": N,
                                "err": err, "covered": covered,
                                "reject": reject, "time": dt})
            except Exception as exc:  # per-replication failures do not abort
                records.append({"method": label, "rep": rep, "b": b, "N": N,
                                "err": None, "covered": None, "reject": None,
                                "time": None, "error": f"{type(exc).__name__}: {exc}"})
    return records


def run_experiment(cfg, progress=False):
    """Run all replications; returns (aggregated rows, failures)."""
    if cfg.n_jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.n_jobs) as ex:
            all_recs = list(ex.map(_run_replication, [cfg] * cfg.reps,
                                   range(cfg.reps)))
    else:
        all_recs = []
        for rep in range(cfg.reps):
            all_recs.append(_run_replication(cfg, rep))
            if progress and (rep + 1) % 25 == 0:
                print(f"  replication {rep + 1}/{cfg.reps}")

    by_key = {}
    failures = []
    for rep_recs in all_recs:                      # fixed replication order
        for r in rep_recs:
            if "error" in r:
                failures.append(r)
                continue
            by_key.setdefault((r["method"], r["b"]), []).append(r)

    rows = []
    for (method, b), recs in sorted(by_key.items()):
        errs = np.array([r["err"] for r in recs], dtype=float)
        cov = [r["covered"] for r in recs if r["covered"] is not None]
        rej = [r["reject"] for r in recs if r["reject"] is not None]
        times = np.array([r["time"] for r in recs], dtype=float)
        rows.append({
            "method": method, "b": b, "N": recs[0]["N"],
            "mse": float(np.mean(errs ** 2)),
            "mae": float(np.median(np.abs(errs))),
            "coverage": float(np.mean(cov)) if cov else float("nan"),
            "rejection_rate": float(np.mean(rej)) if rej else float("nan"),
            "mean_time_s": float(np.mean(times)),
        })

    if cfg.out:
        write_outputs(cfg, rows, failures)
    return rows, failures


def metrics_csv(rows, include_timing=True):
    cols = CSV_COLUMNS if include_timing else CSV_COLUMNS[:-1]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                              for c in cols))
    return "\n".join(lines) + "\n"


def write_outputs(cfg, rows, failures):
    out = cfg.out
    with open(out, "w") as fh:
        fh.write(metrics_csv(rows))
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "failures": failures,
        "environment": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "platform": platform.platform(),
        },
    }
    with open(out + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, default=str)
