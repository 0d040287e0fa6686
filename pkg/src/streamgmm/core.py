"""Streaming GMM estimation with batch-wise explicit updates.

The estimator consumes data in batches and keeps a constant-size summary:

* ``theta``  -- current estimate,
* ``Uprime`` -- running estimate of E{g(theta*, x)} in telescoped form,
* ``Vprime`` -- running estimate of the moment gradient expectation,
* a weighting handle (fixed matrix, Welford inverse, or kernel-LRV inverse).

Each batch update linearizes the new batch's moment sum at the previous
estimate (a lagged linearization), solves one weighted least squares
system in closed form, optionally refreshes the weighting matrix with
moments evaluated at the new estimate, and finally re-centers the running
summaries at the new estimate.  No learning rate or step size is involved.

An implicit variant re-linearizes within the batch until a quadratic-form
stopping rule fires; for moments linear in theta it coincides with the
explicit update after one inner iteration.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ._linalg import chol_factor, chol_solve, solve_spd_ridge, sym
from .errors import InitializationError, NonFiniteUpdate, Underflow
from .lrv import KernelLrv, WelfordAccumulator, pd_adjust

SNAPSHOT_VERSION = 1


class MomentModel:
    """A q-vector moment function g(theta, x) with gradient, p <= q.

    Subclasses set ``p`` (parameters), ``q`` (moments), ``d`` (observation
    length) and implement ``moments`` returning an (n, q) array and
    ``gradients`` returning (n, q, p).  ``gradient_sum`` may be overridden
    when the summed gradient has a cheaper closed form.  ``aux`` carries
    per-batch side data such as a smoothing bandwidth.
    """

    p: int
    q: int
    d: int

    def moments(self, theta, obs, aux=None):
        raise NotImplementedError

    def gradients(self, theta, obs, aux=None):
        raise NotImplementedError

    def gradient_sum(self, theta, obs, aux=None):
        return self.gradients(theta, obs, aux).sum(axis=0)


@dataclass
class Batch:
    """One batch of observations, rows of length d, plus auxiliary data."""

    obs: np.ndarray
    aux: dict | None = None

    def __post_init__(self):
        self.obs = np.atleast_2d(np.asarray(self.obs, dtype=float))
        if self.obs.shape[0] < 1:
            raise ValueError("batch must contain at least one observation")
        if not np.all(np.isfinite(self.obs)):
            raise ValueError("batch contains non-finite entries")

    @property
    def n(self):
        return self.obs.shape[0]


def split_batch(batch, limit):
    """Split a batch into chunks of at most ``limit`` rows.

    Used to enforce n_b <= N_{b-1} when a stream delivers oversized
    batches; off by default in the update entry points.
    """
    limit = max(int(limit), 1)
    out = []
    for start in range(0, batch.n, limit):
        out.append(Batch(batch.obs[start:start + limit], aux=batch.aux))
    return out


class Weighting:
    """Handle for the GMM weighting matrix.

    Modes: ``fixed`` (a constant PSD matrix), ``welford`` (inverse of the
    one-pass sample variance of pushed moment vectors) and ``klrv``
    (inverse of the recursive kernel long-run variance).  Inverse modes
    apply ``pd_adjust`` before factorization and are used through Cholesky
    solves; ``current_W`` materializes the matrix on demand.

    ``pilot`` delays variance queries until at least that many moment
    vectors have been pushed; until then the handle applies the identity.
    """

    def __init__(self, mode, q, W=None, acc=None, pilot=0):
        self.mode = mode
        self.q = q
        self.pilot = int(pilot)
        self._W = None
        self._sigma = None
        self._factor = None
        self.acc = acc
        if mode == "fixed":
            W = np.asarray(W, dtype=float)
            if W.shape != (q, q):
                raise ValueError("fixed weighting has wrong shape")
            self._W = sym(W)
        elif mode not in ("welford", "klrv"):
            raise ValueError(f"unknown weighting mode {mode!r}")

    @classmethod
    def fixed(cls, W):
        W = np.asarray(W, dtype=float)
        return cls("fixed", W.shape[0], W=W)

    @classmethod
    def identity(cls, q):
        return cls("fixed", q, W=np.eye(q))

    @classmethod
    def welford(cls, q, pilot=0):
        return cls("welford", q, acc=WelfordAccumulator(q), pilot=pilot)

    @classmethod
    def kernel_lrv(cls, q, lam=1, phi=1.0, Psi=1.0, Xi=1.0, psi=None, xi=None,
                   pilot=0):
        acc = KernelLrv(q, lam=lam, phi=phi, Psi=Psi, Xi=Xi, psi=psi, xi=xi)
        return cls("klrv", q, acc=acc, pilot=pilot)

    def copy(self):
        out = Weighting.__new__(Weighting)
        out.mode = self.mode
        out.q = self.q
        out.pilot = self.pilot
        out._W = None if self._W is None else self._W.copy()
        out._sigma = None if self._sigma is None else self._sigma.copy()
        out._factor = self._factor
        out.acc = None if self.acc is None else self.acc.copy()
        return out

    def push(self, moments):
        if self.acc is not None:
            self.acc.push_batch(moments)

    def refresh(self):
        """Recompute the factorized inverse from the accumulated variance."""
        if self.mode == "fixed":
            return
        if self.acc.n < max(self.pilot, 2):
            return
        if self.mode == "welford":
            sigma = pd_adjust(self.acc.variance())
        else:
            sigma = self.acc.query(adjust=True)
        self._sigma = sigma
        self._factor = chol_factor(sigma)

    def apply(self, M):
        """W @ M without materializing W."""
        if self.mode == "fixed":
            return self._W @ M
        if self._factor is None:
            return np.array(M, dtype=float, copy=True)
        return chol_solve(self._factor, M)

    def sigma(self):
        """The variance estimate whose inverse the handle applies."""
        if self.mode == "fixed":
            return np.linalg.solve(self._W, np.eye(self.q))
        if self._sigma is None:
            raise Underflow("weighting has not seen enough moments")
        return self._sigma

    @property
    def current_W(self):
        return self.apply(np.eye(self.q))

    def to_dict(self):
        d = {"mode": self.mode, "q": self.q, "pilot": self.pilot}
        if self.mode == "fixed":
            d["W"] = self._W.tolist()
        else:
            d["acc"] = self.acc.to_dict()
            d["kind"] = type(self.acc).__name__
        return d

    @classmethod
    def from_dict(cls, d):
        if d["mode"] == "fixed":
            return cls("fixed", d["q"], W=np.array(d["W"]), pilot=d["pilot"])
        acc_cls = WelfordAccumulator if d["kind"] == "WelfordAccumulator" else KernelLrv
        out = cls(d["mode"], d["q"], acc=acc_cls.from_dict(d["acc"]),
                  pilot=d["pilot"])
        out.refresh()
        return out


@dataclass
class OgmmState:
    """Constant-size summary replacing raw history."""

    N: int
    b: int
    theta: np.ndarray
    Uprime: np.ndarray
    Vprime: np.ndarray
    weighting: Weighting
    meta: dict = field(default_factory=dict)

    def direct_form(self):
        """(U_b, V_b) of the direct bookkeeping: U_b = U'_b - V'_b theta."""
        return self.Uprime - self.Vprime @ self.theta, self.Vprime

    def to_dict(self):
        return {
            "version": SNAPSHOT_VERSION,
            "N": int(self.N),
            "b": int(self.b),
            "theta": self.theta.tolist(),
            "Uprime": self.Uprime.tolist(),
            "Vprime": self.Vprime.tolist(),
            "weighting": self.weighting.to_dict(),
            "meta": dict(self.meta),
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {d.get('version')!r}")
        return cls(
            N=d["N"], b=d["b"],
            theta=np.array(d["theta"], dtype=float),
            Uprime=np.array(d["Uprime"], dtype=float),
            Vprime=np.array(d["Vprime"], dtype=float),
            weighting=Weighting.from_dict(d["weighting"]),
            meta=dict(d.get("meta", {})),
        )

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


@dataclass
class ImplicitConfig:
    max_iters: int = 50
    tol: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


def _as_batch(batch):
    return batch if isinstance(batch, Batch) else Batch(batch)


def init_state(model, first_batch, theta1, weighting):
    """Initialize the stream from a caller-supplied first estimate.

    theta1 must come from a root-N consistent fit of the first batch (the
    offline module provides 2SLS, two-step GMM and quantile initializers);
    the library never self-initializes.
    """
    first_batch = _as_batch(first_batch)
    n1 = first_batch.n
    theta1 = np.asarray(theta1, dtype=float).reshape(-1)
    if theta1.shape[0] != model.p:
        raise InitializationError("theta1 has wrong length")
    if first_batch.obs.shape[1] != model.d:
        raise InitializationError("observation width does not match model")
    if n1 < model.p:
        raise InitializationError("first batch smaller than parameter count")
    g = model.moments(theta1, first_batch.obs, first_batch.aux)
    Vprime = model.gradient_sum(theta1, first_batch.obs, first_batch.aux) / n1
    Uprime = g.mean(axis=0)
    weighting = weighting.copy()
    weighting.push(g)
    weighting.refresh()
    A = sym(Vprime.T @ weighting.apply(Vprime))
    vals = np.linalg.eigvalsh(A)
    if vals.min() <= 1e-12 * max(1.0, vals.max()):
        raise InitializationError("V'WV singular at initialization")
    return OgmmState(N=n1, b=1, theta=theta1, Uprime=Uprime, Vprime=Vprime,
                     weighting=weighting)


def _finish_update(state, model, batch, theta_new, update_weighting, meta=None):
    """Weighting refresh at the new estimate, then summary refresh."""
    n_b = batch.n
    N_new = state.N + n_b
    g_new = model.moments(theta_new, batch.obs, batch.aux)
    weighting = state.weighting.copy()
    if update_weighting:
        weighting.push(g_new)
        weighting.refresh()
    grad_new = model.gradient_sum(theta_new, batch.obs, batch.aux)
    delta = theta_new - state.theta
    Uprime = (state.N * state.Uprime + state.N * (state.Vprime @ delta)
              + g_new.sum(axis=0)) / N_new
    Vprime = (state.N * state.Vprime + grad_new) / N_new
    new_meta = dict(state.meta)
    if meta:
        new_meta.update(meta)
    return OgmmState(N=N_new, b=state.b + 1, theta=theta_new, Uprime=Uprime,
                     Vprime=Vprime, weighting=weighting, meta=new_meta)


def update_batch(state, model, batch, update_weighting=True):
    """One explicit update; returns a new state, the input is untouched."""
    batch = _as_batch(batch)
    N_new = state.N + batch.n
    Ghat = model.moments(state.theta, batch.obs, batch.aux).sum(axis=0)
    Vhat = (state.N * state.Vprime
            + model.gradient_sum(state.theta, batch.obs, batch.aux)) / N_new
    Uhat = (state.N * state.Uprime + Ghat) / N_new
    WV = state.weighting.apply(Vhat)
    step = solve_spd_ridge(Vhat.T @ WV, WV.T @ Uhat)
    theta_new = state.theta - step
    if not np.all(np.isfinite(theta_new)):
        raise NonFiniteUpdate("estimate became non-finite")
    return _finish_update(state, model, batch, theta_new, update_weighting)


def update_batch_implicit(state, model, batch, cfg=None, update_weighting=True):
    """Newton-Raphson variant: re-linearize at the running inner iterate.

    Each inner pass rebuilds the batch moment and gradient sums at the
    current iterate; the loop stops once the step's quadratic form drops
    below cfg.tol or cfg.max_iters passes ran.  Non-convergence is recorded
    in the state metadata, not raised.
    """
    batch = _as_batch(batch)
    cfg = cfg or ImplicitConfig()
    N_new = state.N + batch.n
    theta_r = state.theta.copy()
    converged = False
    iters = 0
    for _ in range(cfg.max_iters):
        iters += 1
        Vhat = (state.N * state.Vprime
                + model.gradient_sum(theta_r, batch.obs, batch.aux)) / N_new
        Uhat = (state.N * state.Uprime
                + state.N * (state.Vprime @ (theta_r - state.theta))
                + model.moments(theta_r, batch.obs, batch.aux).sum(axis=0)) / N_new
        WV = state.weighting.apply(Vhat)
        rhs = WV.T @ Uhat
        step = solve_spd_ridge(Vhat.T @ WV, rhs)
        theta_r = theta_r - step
        if not np.all(np.isfinite(theta_r)):
            raise NonFiniteUpdate("estimate became non-finite")
        if float(rhs @ step) < cfg.tol:
            converged = True
            break
    meta = {"implicit_converged": converged, "implicit_iters": iters}
    return _finish_update(state, model, batch, theta_r, update_weighting, meta)
