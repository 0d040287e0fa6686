"""Stochastic-approximation GMM baseline with Polyak averaging.

Per-observation updates

    theta_{k+1} = theta_k - eta_{k+1} (V'WV)^{-1} V'W g(theta_k, x_{k+1})

with eta_k = eta0 * k^{-a}, V the running gradient average and W the
inverse second moment of the moments, maintained by Sherman-Morrison
rank-one updates.  The over-identification statistic N gbar' W gbar uses
moments evaluated at the running average of iterates and carries no
first-order correction for the drifting sequence of estimates.
"""

import numpy as np

from .core import Batch
from .errors import DegenerateScale, NonFiniteUpdate
from .lrv import pd_adjust


def select_learning_rate(model, init_batch, theta0, kappa=0.5):
    """eta0 = 1 / quantile_kappa{ p^{-1} || (V'WV)^{-1} V'W grad_g(x) ||_2 }.

    Spectral norms of the per-observation mapped gradients over the
    initialization batch; quantile by lower-interpolated order statistic.
    Raises DegenerateScale when the quantile is zero (common for quantile
    moments, where most gradients vanish).
    """
    batch = init_batch if isinstance(init_batch, Batch) else Batch(init_batch)
    theta0 = np.asarray(theta0, dtype=float)
    grads = model.gradients(theta0, batch.obs, batch.aux)
    V0 = grads.mean(axis=0)
    g0 = model.moments(theta0, batch.obs, batch.aux)
    M0 = pd_adjust(g0.T @ g0 / batch.n)
    W0 = np.linalg.solve(M0, np.eye(model.q))
    H = np.linalg.solve(V0.T @ W0 @ V0, V0.T @ W0)
    norms = np.array([np.linalg.norm(H @ grads[i], 2) for i in range(batch.n)])
    scale = float(np.quantile(norms / model.p, kappa, method="lower"))
    if scale <= 0.0:
        raise DegenerateScale("gradient scale quantile is zero")
    return 1.0 / scale


class SgmmEstimator:
    """Streaming SGMM state.

    The initialization batch contributes to the gradient and second-moment
    averages; subsequent observations arrive one at a time through
    ``step`` (or in bulk through ``step_batch``).
    """

    def __init__(self, model, init_batch, theta0, eta0=None, kappa=0.5,
                 a=0.501):
        batch = init_batch if isinstance(init_batch, Batch) else Batch(init_batch)
        self.model = model
        self.a = float(a)
        self.theta = np.asarray(theta0, dtype=float).copy()
        self.theta_bar = self.theta.copy()
        grads = model.gradients(self.theta, batch.obs, batch.aux)
        self.V = grads.mean(axis=0)
        g0 = model.moments(self.theta, batch.obs, batch.aux)
        self.M = pd_adjust(g0.T @ g0 / batch.n)   # second moment average
        self.W = np.linalg.solve(self.M, np.eye(model.q))
        self.count = batch.n                      # observations in averages
        self.k = 0                                # stochastic updates taken
        self.gbar = np.zeros(model.q)             # sum of g(theta_bar_k, x_k)
        if eta0 is None:
            eta0 = select_learning_rate(model, batch, theta0, kappa=kappa)
        self.eta0 = float(eta0)

    def step(self, x, aux=None):
        x = np.asarray(x, dtype=float).reshape(1, -1)
        self.k += 1
        eta = self.eta0 * self.k ** (-self.a)
        g = self.model.moments(self.theta, x, aux)[0]
        grad = self.model.gradients(self.theta, x, aux)[0]
        WV = self.W @ self.V
        direction = np.linalg.solve(self.V.T @ WV, WV.T @ g)
        self.theta = self.theta - eta * direction
        if not np.all(np.isfinite(self.theta)):
            raise NonFiniteUpdate("SGMM iterate became non-finite")
        self.theta_bar = self.theta_bar + (self.theta - self.theta_bar) / self.k \
            if self.k > 1 else self.theta.copy()

        # rank-one refresh of the inverse second moment (Sherman-Morrison)
        c = self.count
        A_inv = self.W * (c + 1.0) / c  # inverse of c/(c+1) * M
        Au = A_inv @ g
        denom = 1.0 + float(g @ Au) / (c + 1.0)
        self.W = A_inv - np.outer(Au, Au) / ((c + 1.0) * denom)
        self.M = (c * self.M + np.outer(g, g)) / (c + 1.0)
        self.V = (c * self.V + grad) / (c + 1.0)
        self.count = c + 1

        self.gbar += self.model.moments(self.theta_bar, x, aux)[0]

    def step_batch(self, rows, aux=None):
        for i in range(rows.shape[0]):
            self.step(rows[i], aux=aux)

    def overident_report(self):
        """N gbar' W gbar with df = q - p (no lag correction)."""
        from .inference import _report
        if self.k == 0:
            raise ValueError("no stochastic updates taken yet")
        gb = self.gbar / self.k
        stat = self.k * float(gb @ self.W @ gb)
        return _report(stat, self.model.q - self.model.p, "sgmm_overident")

    def contrast_interval(self, weights, alpha, Sigma=None):
        """Plug-in CI for weights' theta_bar; Sigma defaults to the second
        moment estimate (appropriate under independence)."""
        from .inference import normal_quantile
        weights = np.asarray(weights, dtype=float)
        Sigma = self.M if Sigma is None else Sigma
        H = np.linalg.solve(self.V.T @ self.W @ self.V, (self.W @ self.V).T)
        var = float(weights @ H @ Sigma @ H.T @ weights) / max(self.k, 1)
        z = normal_quantile(1.0 - alpha / 2.0)
        center = float(weights @ self.theta_bar)
        half = z * np.sqrt(var)
        return center - half, center + half
