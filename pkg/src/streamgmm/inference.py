"""Hypothesis tests and interval estimation on top of the streaming state.

All quadratic forms are computed through Cholesky solves of pd-adjusted
variance estimates, never explicit inverses.
"""

from dataclasses import dataclass

import numpy as np
import scipy.special as sps

from ._linalg import chol_factor, chol_solve
from .core import Batch, OgmmState, update_batch
from .errors import (DomainError, ExactIdentification, OfflineFitFailed,
                     OptimizerFailed, RankDeficientV, SingularSigma1)
from .lrv import pd_adjust


# -- chi-square utilities ----------------------------------------------------

def chisq_cdf(x, df):
    if df < 1:
        raise DomainError("df must be >= 1")
    if x < 0:
        raise DomainError("x must be >= 0")
    return float(sps.gammainc(df / 2.0, x / 2.0))


def chisq_quantile(u, df):
    if df < 1:
        raise DomainError("df must be >= 1")
    if not 0.0 < u < 1.0:
        raise DomainError("u must lie in (0, 1)")
    return float(2.0 * sps.gammaincinv(df / 2.0, u))


def normal_quantile(u):
    # z_u via the chi-square 1-df quantile, sign from u
    if not 0.0 < u < 1.0:
        raise DomainError("u must lie in (0, 1)")
    tail = chisq_quantile(abs(2.0 * u - 1.0), 1) ** 0.5
    return tail if u >= 0.5 else -tail


@dataclass
class TestReport:
    statistic: float
    df: int
    p_value: float
    name: str = ""

    def reject_at(self, alpha):
        return self.statistic > chisq_quantile(1.0 - alpha, self.df)

    def to_dict(self):
        return {"name": self.name, "statistic": self.statistic, "df": self.df,
                "p_value": self.p_value}


def _report(stat, df, name):
    stat = float(max(stat, 0.0))
    return TestReport(statistic=stat, df=df, p_value=1.0 - chisq_cdf(stat, df),
                      name=name)


# -- over-identification and confidence sets --------------------------------

def sargan_hansen(state: OgmmState, Sigma=None):
    """Online over-identifying restrictions test.

    statistic = N * U'_b' Sigma^{-1} U'_b, chi-square with q - p degrees of
    freedom; U'_b is the running estimate of the mean moment at theta_b.
    """
    q = state.Uprime.shape[0]
    p = state.theta.shape[0]
    if q == p:
        raise ExactIdentification("q = p leaves no over-identifying restrictions")
    Sigma = state.weighting.sigma() if Sigma is None else pd_adjust(Sigma)
    factor = chol_factor(Sigma)
    stat = state.N * float(state.Uprime @ chol_solve(factor, state.Uprime))
    return _report(stat, q - p, "sargan_hansen")


@dataclass
class ConfidenceRegion:
    """Ellipsoid {theta: N (c-theta)' S (c-theta) <= chi2_{p,1-a}}."""

    center: np.ndarray
    shape: np.ndarray
    level: float
    N: int

    def contains(self, theta):
        d = self.center - np.asarray(theta, dtype=float)
        crit = chisq_quantile(1.0 - self.level, self.center.shape[0])
        return self.N * float(d @ self.shape @ d) <= crit


def _vsv(state, Sigma):
    factor = chol_factor(pd_adjust(Sigma))
    V = state.Vprime
    if np.linalg.matrix_rank(V) < V.shape[1]:
        raise RankDeficientV("moment gradient is rank deficient")
    return V.T @ chol_solve(factor, V)


def confidence_region(state: OgmmState, Sigma, alpha):
    return ConfidenceRegion(center=state.theta.copy(),
                            shape=_vsv(state, Sigma),
                            level=alpha, N=state.N)


def contrast_interval(state: OgmmState, Sigma, weights, alpha):
    """CI for weights' theta using the plug-in variance (V'S^{-1}V)^{-1}/N."""
    weights = np.asarray(weights, dtype=float)
    S = _vsv(state, Sigma)
    var = float(weights @ np.linalg.solve(S, weights)) / state.N
    z = normal_quantile(1.0 - alpha / 2.0)
    center = float(weights @ state.theta)
    half = z * np.sqrt(var)
    return center - half, center + half


def marginal_interval(state: OgmmState, Sigma, coord, alpha):
    e = np.zeros(state.theta.shape[0])
    e[coord] = 1.0
    return contrast_interval(state, Sigma, e, alpha)


# -- anomaly and structural stability ----------------------------------------

@dataclass
class AnomalySnapshot:
    """Frozen reference summary: direct-form U_1, V_1, the reference
    estimate, its long-run variance and sample size.  The reference may be
    the first batch or a cumulative state."""

    U1: np.ndarray
    V1: np.ndarray
    theta1: np.ndarray
    Sigma1: np.ndarray
    n1: int

    @classmethod
    def from_state(cls, state: OgmmState, Sigma=None):
        U, V = state.direct_form()
        Sigma = state.weighting.sigma() if Sigma is None else Sigma
        return cls(U1=U, V1=V, theta1=state.theta.copy(),
                   Sigma1=pd_adjust(Sigma), n1=state.N)

    def _factor(self):
        try:
            return chol_factor(self.Sigma1)
        except np.linalg.LinAlgError as exc:
            raise SingularSigma1("reference variance not PD") from exc


def anomaly_full(ref: AnomalySnapshot, state_after: OgmmState, model, batch):
    """Full-sample statistic: needs only the snapshot and the new batch.

    T = n1 (U1 + V1 tF)' S1^{-1} (U1 + V1 tF)
      + nb^{-1} G(tF; Db)' S1^{-1} G(tF; Db),     chi-square(2q - p),

    where tF is the estimate after folding Db in, and S1 reuses the
    reference long-run variance (stable-dependence assumption).
    """
    batch = batch if isinstance(batch, Batch) else Batch(batch)
    factor = ref._factor()
    tF = state_after.theta
    m1 = ref.U1 + ref.V1 @ tF
    term1 = ref.n1 * float(m1 @ chol_solve(factor, m1))
    G = model.moments(tF, batch.obs, batch.aux).sum(axis=0)
    term2 = float(G @ chol_solve(factor, G)) / batch.n
    q, p = model.q, model.p
    return _report(term1 + term2, 2 * q - p, "anomaly_full")


def anomaly_unrestricted(ref: AnomalySnapshot, model, batch, offline_gmm,
                         offline_lrv=None):
    """Unrestricted statistic separating misspecification from parameter
    change.

    T = n1 (U1 + V1 t1)' S1^{-1} (U1 + V1 t1)
      + nb^{-1} G(tU; Db)' SU^{-1} G(tU; Db),     chi-square(2(q-p)),

    with (tU, SU) fit on the new batch alone.  ``offline_gmm`` maps
    (model, batch) to either theta or (theta, Sigma); ``offline_lrv`` maps
    a moment matrix to a variance when the former returns theta only.
    """
    batch = batch if isinstance(batch, Batch) else Batch(batch)
    q, p = model.q, model.p
    if q <= p:
        raise ExactIdentification("unrestricted statistic needs q > p")
    factor = ref._factor()
    m1 = ref.U1 + ref.V1 @ ref.theta1
    term1 = ref.n1 * float(m1 @ chol_solve(factor, m1))
    try:
        fit = offline_gmm(model, batch)
    except Exception as exc:
        raise OfflineFitFailed("unrestricted fit on new batch failed") from exc
    if isinstance(fit, tuple):
        thetaU, SigmaU = fit
    else:
        thetaU = fit
        if offline_lrv is None:
            raise OfflineFitFailed("need offline_lrv when offline_gmm returns theta only")
        SigmaU = offline_lrv(model.moments(thetaU, batch.obs, batch.aux))
    fU = chol_factor(pd_adjust(SigmaU))
    G = model.moments(thetaU, batch.obs, batch.aux).sum(axis=0)
    term2 = float(G @ chol_solve(fU, G)) / batch.n
    return _report(term1 + term2, 2 * (q - p), "anomaly_unrestricted")


def anomaly_restricted(batch1, batch_b, model, theta0=None):
    """Stored-reference benchmark: restricted estimation over both batches.

    Minimizes sum_i n_i^{-1} G(t; D_i)' C_i(t)^{-1} G(t; D_i) over t with
    C_i(t) the per-batch sample covariance of the moments at t
    (continuously updated), then reports the minimum, chi-square(2q - p).
    """
    from scipy.optimize import minimize

    b1 = batch1 if isinstance(batch1, Batch) else Batch(batch1)
    bb = batch_b if isinstance(batch_b, Batch) else Batch(batch_b)
    q, p = model.q, model.p

    def term(batch, theta):
        g = model.moments(np.atleast_1d(theta), batch.obs, batch.aux)
        gc = g - g.mean(axis=0)
        C = pd_adjust(gc.T @ gc / batch.n)
        G = g.sum(axis=0)
        return float(G @ chol_solve(chol_factor(C), G)) / batch.n

    def objective(theta):
        return term(b1, theta) + term(bb, theta)

    if theta0 is None:
        theta0 = np.zeros(p)
    res = minimize(objective, np.asarray(theta0, dtype=float),
                   method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 4000})
    if not np.all(np.isfinite(res.x)):
        raise OptimizerFailed("restricted estimator diverged")
    return _report(res.fun, 2 * q - p, "anomaly_restricted")


class AnomalyMonitor:
    """Batch-wise anomaly screening against a reference state.

    strategy "initial" keeps the first-batch reference; "cumulative" folds
    batches into the reference whenever the monitored statistic does not
    reject.  ``decide_on`` selects which statistic drives the folding.
    """

    def __init__(self, state: OgmmState, model, offline_gmm=None, alpha=0.05,
                 strategy="cumulative", decide_on="full"):
        if strategy not in ("initial", "cumulative"):
            raise ValueError("strategy must be 'initial' or 'cumulative'")
        self.state = state
        self.model = model
        self.offline_gmm = offline_gmm
        self.alpha = alpha
        self.strategy = strategy
        self.decide_on = decide_on

    def step(self, batch):
        """Returns (full_report, unrestricted_report_or_None, folded)."""
        ref = AnomalySnapshot.from_state(self.state)
        candidate = update_batch(self.state, self.model, batch)
        rep_full = anomaly_full(ref, candidate, self.model, batch)
        rep_unres = None
        if self.offline_gmm is not None and self.model.q > self.model.p:
            rep_unres = anomaly_unrestricted(ref, self.model, batch,
                                             self.offline_gmm)
        chosen = rep_full if self.decide_on == "full" else rep_unres
        folded = False
        if (self.strategy == "cumulative" and chosen is not None
                and not chosen.reject_at(self.alpha)):
            self.state = candidate
            folded = True
        return rep_full, rep_unres, folded
