"""Concrete moment models: least squares, instrumental variables,
smoothed quantile regression, and wavelet-variance matching.

Observation layouts (one row per observation):

* OLS      ``[y, x_1..x_p]``
* IV       ``[y, x_1..x_p, z_1..z_q]``
* quantile ``[y, x_1..x_p]`` with the smoothing bandwidth carried in the
  batch aux channel under ``"bandwidth"``
* wavelet  ``[w_1..w_q]`` -- one wavelet coefficient per scale

Every analytic gradient is validated against central finite differences in
the test suite; that contract is what allows the streaming estimator's
Taylor updates.
"""

import numpy as np

from .core import MomentModel
from .errors import DomainError


class OlsMoment(MomentModel):
    """g(theta, {x, y}) = x (y - x'theta); gradient -x x'."""

    def __init__(self, n_regressors):
        self.p = n_regressors
        self.q = n_regressors
        self.d = n_regressors + 1

    def _split(self, obs):
        return obs[:, 0], obs[:, 1:1 + self.p]

    def moments(self, theta, obs, aux=None):
        y, X = self._split(obs)
        return X * (y - X @ theta)[:, None]

    def gradients(self, theta, obs, aux=None):
        _, X = self._split(obs)
        return -np.einsum("ni,nj->nij", X, X)

    def gradient_sum(self, theta, obs, aux=None):
        _, X = self._split(obs)
        return -(X.T @ X)


class IvMoment(MomentModel):
    """g(theta, {x, y, z}) = z (y - x'theta); gradient -z x'."""

    def __init__(self, n_regressors, n_instruments):
        if n_instruments < n_regressors:
            raise ValueError("need at least as many instruments as regressors")
        self.p = n_regressors
        self.q = n_instruments
        self.d = 1 + n_regressors + n_instruments

    def _split(self, obs):
        y = obs[:, 0]
        X = obs[:, 1:1 + self.p]
        Z = obs[:, 1 + self.p:1 + self.p + self.q]
        return y, X, Z

    def moments(self, theta, obs, aux=None):
        y, X, Z = self._split(obs)
        return Z * (y - X @ theta)[:, None]

    def gradients(self, theta, obs, aux=None):
        _, X, Z = self._split(obs)
        return -np.einsum("ni,nj->nij", Z, X)

    def gradient_sum(self, theta, obs, aux=None):
        _, X, Z = self._split(obs)
        return -(Z.T @ X)


def smooth_cdf(u):
    """Quintic smoother H: 0 below -1, 1 above 1, C^2 in between."""
    u = np.asarray(u, dtype=float)
    core = 0.5 + (15.0 / 16.0) * (u - 2.0 * u ** 3 / 3.0 + u ** 5 / 5.0)
    return np.where(u <= -1.0, 0.0, np.where(u >= 1.0, 1.0, core))


def smooth_pdf(u):
    """dH/du = (15/16)(1-u^2)^2 on [-1, 1], zero outside."""
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1.0
    return np.where(inside, (15.0 / 16.0) * (1.0 - u ** 2) ** 2, 0.0)


def quantile_bandwidth(p, n_prev):
    """Per-batch bandwidth h = sqrt(p / N_prev)."""
    return float(np.sqrt(p / n_prev))


class SmoothedQuantileMoment(MomentModel):
    """Smoothed quantile regression moments at level tau.

    g(theta, {x, y, h}) = x [H{(y - x'theta)/h} + tau - 1]
    grad  = -(x x'/h) H'{(y - x'theta)/h}

    The bandwidth h is fixed per batch and read from the aux channel.
    """

    def __init__(self, n_regressors, tau):
        if not 0.0 < tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        self.p = n_regressors
        self.q = n_regressors
        self.d = n_regressors + 1
        self.tau = float(tau)

    def _split(self, obs, aux):
        if aux is None or "bandwidth" not in aux:
            raise ValueError("quantile moments need aux['bandwidth']")
        h = float(aux["bandwidth"])
        if h <= 0:
            raise ValueError("bandwidth must be positive")
        return obs[:, 0], obs[:, 1:1 + self.p], h

    def moments(self, theta, obs, aux=None):
        y, X, h = self._split(obs, aux)
        u = (y - X @ theta) / h
        return X * (smooth_cdf(u) + self.tau - 1.0)[:, None]

    def gradients(self, theta, obs, aux=None):
        y, X, h = self._split(obs, aux)
        u = (y - X @ theta) / h
        w = smooth_pdf(u) / h
        return -np.einsum("n,ni,nj->nij", w, X, X)

    def gradient_sum(self, theta, obs, aux=None):
        y, X, h = self._split(obs, aux)
        u = (y - X @ theta) / h
        w = smooth_pdf(u) / h
        return -(X * w[:, None]).T @ X


# ---------------------------------------------------------------------------
# Wavelet-variance moments for composite AR(1) + white noise models
# ---------------------------------------------------------------------------

# Scale j (1-based) corresponds to pyramid level j-1 and an effective
# averaging length of 2^j raw observations; the Haar coefficient at that
# level differences two adjacent means of 2^{j-1} points.


def ar1_wavelet_variance(rho, sigma2, scale_len):
    """Model-implied Haar wavelet variance of an AR(1) component.

    ``scale_len`` is the effective averaging length (2^j at scale j).
    """
    t = float(scale_len)
    if np.any(np.asarray(rho) <= 0.0) or np.any(np.asarray(rho) >= 1.0):
        raise DomainError("rho must lie in (0, 1)")
    num = (0.5 * t - 3.0 * rho - 0.5 * t * rho ** 2
           + 4.0 * rho ** (1.0 + 0.5 * t) - rho ** (1.0 + t))
    den = 0.5 * t ** 2 * (1.0 - rho) ** 2 * (1.0 - rho ** 2)
    return num * sigma2 / den


def _ar1_wv_drho(rho, sigma2, scale_len):
    # quotient rule on ar1_wavelet_variance in rho
    t = float(scale_len)
    num = (0.5 * t - 3.0 * rho - 0.5 * t * rho ** 2
           + 4.0 * rho ** (1.0 + 0.5 * t) - rho ** (1.0 + t))
    dnum = (-3.0 - t * rho + 4.0 * (1.0 + 0.5 * t) * rho ** (0.5 * t)
            - (1.0 + t) * rho ** t)
    den = 0.5 * t ** 2 * (1.0 - rho) ** 2 * (1.0 - rho ** 2)
    dden = -t ** 2 * (1.0 - rho) ** 2 * (1.0 + 2.0 * rho)
    return sigma2 * (dnum * den - num * dden) / den ** 2


class WaveletMoment(MomentModel):
    """Moment j: w_{t,j}^2 minus the model-implied wavelet variance.

    Parameter layout (rho_1, sigma_1^2, ..., rho_k, sigma_k^2, sigma_wn^2)
    for k latent AR(1) components plus white noise; the default k = 2 gives
    the five-parameter composite model.
    """

    def __init__(self, n_scales, n_ar=2):
        if n_scales < 1:
            raise ValueError("need at least one scale")
        self.n_ar = int(n_ar)
        self.p = 2 * self.n_ar + 1
        self.q = int(n_scales)
        self.d = int(n_scales)
        self.scale_lens = 2.0 ** np.arange(1, self.q + 1)

    def nu(self, theta, j):
        """Model-implied wavelet variance at scale j (1-based)."""
        t = self.scale_lens[j - 1]
        out = theta[-1] / t
        for i in range(self.n_ar):
            out += ar1_wavelet_variance(theta[2 * i], theta[2 * i + 1], t)
        return float(out)

    def nu_vector(self, theta):
        return np.array([self.nu(theta, j) for j in range(1, self.q + 1)])

    def nu_jacobian(self, theta):
        """d nu / d theta, shape (q, p)."""
        J = np.zeros((self.q, self.p))
        for j, t in enumerate(self.scale_lens):
            for i in range(self.n_ar):
                rho, sig2 = theta[2 * i], theta[2 * i + 1]
                J[j, 2 * i] = _ar1_wv_drho(rho, sig2, t)
                J[j, 2 * i + 1] = ar1_wavelet_variance(rho, 1.0, t)
            J[j, -1] = 1.0 / t
        return J

    def moments(self, theta, obs, aux=None):
        return obs ** 2 - self.nu_vector(theta)[None, :]

    def gradients(self, theta, obs, aux=None):
        J = -self.nu_jacobian(theta)
        return np.broadcast_to(J, (obs.shape[0],) + J.shape).copy()

    def gradient_sum(self, theta, obs, aux=None):
        return -obs.shape[0] * self.nu_jacobian(theta)


# ---------------------------------------------------------------------------
# Interval-scheduled online quantile baseline
# ---------------------------------------------------------------------------


def interval_starts(memory, count):
    """First observation index (1-based) of each of the first ``count``
    intervals: b_l = floor(m^{c_{l-1}}) + 1 with c_1, c_2, ... =
    1.5, 1.75, 2.5, 2.75, 4.5, 4.75, ... (c_0 = -inf so b_1 = 1)."""
    starts = [1]
    cap = 10.0 ** 18
    for ell in range(2, count + 1):
        idx = ell - 1  # uses c_{l-1}
        k = (idx + 1) // 2
        c = 2.0 ** (k - 1) + (0.5 if idx % 2 == 1 else 0.75)
        if c * np.log10(float(memory)) > 18:
            starts.append(int(cap))
            break
        starts.append(int(np.floor(float(memory) ** c)) + 1)
    return starts


class LeqrEstimator:
    """Linearized online quantile regression with interval scheduling.

    Summary statistics accumulate within index intervals whose boundaries
    grow as powers of the memory constraint m.  The linearization point is
    refreshed only when a new interval starts, and the estimate is solved
    from the previous plus current interval sums:

        theta = [sum (x x'/h) H'(u)]^{-1} sum x [(y/h) H'(u) + H(u) + tau - 1]

    with u = (y - x'theta_lin)/h.  This differs from the streaming GMM
    update by the (y/h) term where the latter carries (x'theta_lin/h), and
    by the much rarer refresh of theta_lin.
    """

    def __init__(self, n_regressors, tau, theta_init, memory):
        self.p = n_regressors
        self.tau = float(tau)
        self.memory = int(memory)
        self.theta_lin = np.asarray(theta_init, dtype=float).copy()
        self.n_seen = 0
        self.interval = 1
        self._starts = interval_starts(self.memory, 64)
        self.h = quantile_bandwidth(self.p, self.memory)
        self._prev = (np.zeros((self.p, self.p)), np.zeros(self.p))
        self._cur = (np.zeros((self.p, self.p)), np.zeros(self.p))

    def _next_start(self):
        if self.interval < len(self._starts):
            return self._starts[self.interval]
        return np.inf

    def _accumulate(self, rows):
        y, X = rows[:, 0], rows[:, 1:1 + self.p]
        u = (y - X @ self.theta_lin) / self.h
        dH = smooth_pdf(u)
        V, U = self._cur
        V += (X * (dH / self.h)[:, None]).T @ X
        U += X.T @ ((y / self.h) * dH + smooth_cdf(u) + self.tau - 1.0)

    def _begin_interval(self):
        self.theta_lin = self.theta
        self.interval += 1
        self.h = quantile_bandwidth(self.p, self._starts[self.interval - 1] - 1)
        self._prev = self._cur
        self._cur = (np.zeros((self.p, self.p)), np.zeros(self.p))

    def update(self, rows):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        pos = 0
        while pos < rows.shape[0]:
            nxt = self._next_start()
            room = int(min(rows.shape[0] - pos, nxt - 1 - self.n_seen))
            if room > 0:
                chunk = rows[pos:pos + room]
                self._accumulate(chunk)
                self.n_seen += room
                pos += room
            if self.n_seen + 1 == self._next_start():
                self._begin_interval()

    @property
    def theta(self):
        V = self._prev[0] + self._cur[0]
        U = self._prev[1] + self._cur[1]
        if not np.any(V):
            return self.theta_lin.copy()
        try:
            return np.linalg.solve(V, U)
        except np.linalg.LinAlgError:
            return self.theta_lin.copy()
