"""Seeded data generators for the benchmark simulation designs.

Eight designs: heteroskedastic IV with many instruments (m1), an
ARMA-driven IV regression (m2), over-identified designs with a possible
misspecification term under independent (m3) and VAR(1) (m4) shocks,
quantile regression designs with independent (m5) and VAR(1) (m6)
regressors, and the m3/m4 designs with indexed instability windows (m7,
m8).  A composite AR(1)+noise signal generator feeds the wavelet moment
model.

Randomness comes from numpy's PCG64 ``default_rng``; identical seeds give
identical streams.  Autoregressions burn in 1000 discarded draws.  The
"uniform regressors with geometric correlation" designs use a Gaussian
copula (probability integral transform of an AR-correlated Gaussian
vector), whose induced uniform correlation is close to, not exactly,
0.5^|i-j|.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.special import ndtr  # Gaussian cdf

from .core import Batch
from .errors import BadParams
from .moments import IvMoment, SmoothedQuantileMoment

BURN_IN = 1000

M7_INNER = (range(2001, 2501), range(6001, 6501))   # parameter-change windows
M7_OUTER = (range(4001, 4501), range(8001, 8501))   # misspecification windows


@dataclass
class SimModel:
    """A simulation design plus its parameters and seed."""

    variant: str
    seed: int = 0
    theta2: float = 0.0          # m3/m4/m7/m8 instability size
    rho: float = 0.5             # m1 instrument correlation
    tau: float = 0.1             # m5/m6 quantile level
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in ("m1", "m2", "m3", "m4", "m5", "m6", "m7", "m8"):
            raise BadParams(f"unknown variant {self.variant!r}")
        if self.variant == "m1" and not 0 <= self.rho < 1:
            raise BadParams("rho must lie in [0, 1)")


def moment_model(sim: SimModel):
    if sim.variant == "m1":
        return IvMoment(5, 20)
    if sim.variant == "m2":
        return IvMoment(2, 4)
    if sim.variant in ("m3", "m4", "m7", "m8"):
        return IvMoment(1, 2)
    return SmoothedQuantileMoment(10, sim.tau)


def theta_star(sim: SimModel):
    """Target of the estimating equations under the null design."""
    if sim.variant == "m1":
        return np.ones(5)
    if sim.variant == "m2":
        return np.array([1.4, -0.6])
    if sim.variant in ("m3", "m4", "m7", "m8"):
        return np.array([1.0])
    p = 10
    theta = np.ones(p)
    sd = 1.0 if sim.variant == "m5" else math.sqrt(4.0 / 3.0)
    from .inference import normal_quantile
    theta[0] = 1.0 + sd * normal_quantile(sim.tau)
    return theta


def _geom_corr_chol(dim, rho):
    idx = np.arange(dim)
    C = rho ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(C)


def _var1_path(rng, n, coeff, noise_chol):
    """Diagonal-coefficient VAR(1) with burn-in, row t = state at time t."""
    dim = noise_chol.shape[0]
    w = rng.standard_normal((n + BURN_IN, dim)) @ noise_chol.T
    out = np.empty_like(w)
    for j in range(dim):
        out[:, j] = lfilter([1.0], [1.0, -coeff], w[:, j])
    return out[BURN_IN:]


def generate(sim: SimModel, count, start_index=1, rng=None):
    """``count`` observation rows; layout depends on the design family.

    ``start_index`` is the 1-based position of the first returned row in
    the full stream, which matters for the indexed instability windows of
    m7/m8.  Generation is deterministic given (variant, seed) only when
    rows are drawn in one call or resumed with an externally kept rng.
    """
    rng = np.random.default_rng(sim.seed) if rng is None else rng
    v = sim.variant
    if v == "m1":
        return _gen_m1(sim, count, rng)
    if v == "m2":
        return _gen_m2(count, rng)
    if v in ("m3", "m4", "m7", "m8"):
        return _gen_m3_family(sim, count, start_index, rng)
    return _gen_m5_family(sim, count, rng)


def _gen_m1(sim, n, rng):
    p, q = 5, 20
    L = _geom_corr_chol(q, sim.rho)
    Z = rng.standard_normal((n, q)) @ L.T
    nu = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    X = np.empty((n, p))
    X[:, 1:p] = Z[:, 0:p - 1]                     # x_j = z_{j-1}, j = 2..p
    X[:, 0] = 0.1 * X[:, 1:p].sum(axis=1) + 0.5 * Z[:, p - 1:q].sum(axis=1) + nu
    y = X @ np.ones(p) + 5.0 * np.exp(Z[:, q - 1]) * (nu + eps)
    return np.column_stack([y, X, Z])


def _gen_m2(n, rng):
    t1, t2, f1, f2 = 1.4, -0.6, 0.6, -0.3
    lags = 6
    eps = rng.standard_normal(n + lags + BURN_IN)
    yfull = lfilter([1.0, f1, f2], [1.0, -t1, -t2], eps)[BURN_IN:]
    i = np.arange(lags, lags + n)
    cols = [yfull[i - off] for off in (0, 1, 2, 3, 4, 5, 6)]
    return np.column_stack(cols)


_M3_COV = np.eye(4)
_M3_COV[0, 1] = _M3_COV[1, 0] = 0.5
_M3_COV[2, 3] = _M3_COV[3, 2] = 0.5


def _gen_m3_family(sim, n, start_index, rng):
    chol = np.linalg.cholesky(_M3_COV)
    if sim.variant in ("m3", "m7"):
        U = rng.standard_normal((n, 4)) @ chol.T
    else:
        U = _var1_path(rng, n, 0.5, chol)
    z1, z2, nu, eps = U[:, 0], U[:, 1], U[:, 2], U[:, 3]
    x = z1 + z2 + nu
    theta1 = 1.0
    if sim.variant in ("m3", "m4"):
        y = theta1 * x + sim.theta2 * z1 + eps
    else:
        k = np.arange(start_index, start_index + n)
        inner = np.zeros(n, dtype=bool)
        outer = np.zeros(n, dtype=bool)
        for w in M7_INNER:
            inner |= (k >= w.start) & (k < w.stop)
        for w in M7_OUTER:
            outer |= (k >= w.start) & (k < w.stop)
        y = (theta1 + sim.theta2 * inner) * x + sim.theta2 * outer * z1 + eps
    return np.column_stack([y, x, z1, z2])


def _gen_m5_family(sim, n, rng):
    p = 10
    if sim.variant == "m5":
        L = _geom_corr_chol(p - 1, 0.5)
        G = rng.standard_normal((n, p - 1)) @ L.T
        U = ndtr(G)
        eps = rng.standard_normal(n)
    else:
        cov = np.zeros((p, p))
        cov[0, 0] = 1.0
        idx = np.arange(p - 1)
        cov[1:, 1:] = 0.5 ** np.abs(idx[:, None] - idx[None, :])
        path = _var1_path(rng, n, 0.5, np.linalg.cholesky(cov))
        eps = path[:, 0]
        sd = math.sqrt(4.0 / 3.0)                 # stationary sd under AR(0.5)
        U = ndtr(path[:, 1:] / sd)
    X = np.column_stack([np.ones(n), U])
    y = X @ np.ones(p) + eps
    return np.column_stack([y, X])


def batch_stream(sim: SimModel, sizes, aux_fn=None):
    """Yield Batch objects of the given sizes from one seeded stream.

    ``aux_fn(batch_index, n_prev)`` may attach auxiliary data (for example
    the quantile smoothing bandwidth).
    """
    rng = np.random.default_rng(sim.seed)
    total = int(np.sum(sizes))
    rows = generate(sim, total, rng=rng)
    pos = 0
    n_prev = 0
    for b, size in enumerate(sizes, start=1):
        chunk = rows[pos:pos + size]
        aux = aux_fn(b, n_prev) if aux_fn is not None else None
        yield Batch(chunk, aux=aux)
        pos += size
        n_prev += size


def gmwm_signal(theta, n, seed=0):
    """Composite signal: sum of latent AR(1) components plus white noise.

    theta = (rho_1, s1, ..., rho_k, sk, s_noise) with s* variances.  Burns
    in ceil(10 / (1 - max rho)) steps.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.shape[0] % 2 == 0:
        raise BadParams("theta must be (rho, sigma2) pairs plus a noise variance")
    n_ar = (theta.shape[0] - 1) // 2
    rhos = theta[0:2 * n_ar:2]
    sig2 = theta[1:2 * n_ar:2]
    if np.any(sig2 < 0) or theta[-1] < 0:
        raise BadParams("variances must be non-negative")
    if np.any((rhos <= -1) | (rhos >= 1)):
        raise BadParams("AR coefficients must lie in (-1, 1)")
    burn = int(math.ceil(10.0 / (1.0 - np.abs(rhos).max()))) if n_ar else 0
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(n) * math.sqrt(theta[-1])
    for rho, s2 in zip(rhos, sig2):
        if s2 == 0.0:
            continue
        u = rng.standard_normal(n + burn) * math.sqrt(s2)
        z = lfilter([1.0], [1.0, -rho], u)
        y = y + z[burn:]
    return y
