"""Offline estimators: initializers for the streaming loop and oracles
for benchmarking.

Covers two-stage least squares, closed-form linear GMM, a generic two-step
GMM with a Gauss-Newton inner loop, an initial smoothed-quantile fit, and
a box-constrained two-step fit for the wavelet-variance model.
"""

import numpy as np

from ._linalg import chol_factor, chol_solve, sym
from .errors import NoConvergence, OfflineFitFailed, RankDeficient
from .lrv import bartlett_lrv, pd_adjust
from .moments import (SmoothedQuantileMoment, WaveletMoment,
                      ar1_wavelet_variance, quantile_bandwidth)


def tsls(Y, X, Z):
    """Two-stage least squares: theta = (Xh'Xh)^{-1} Xh'Y with
    Xh = Z (Z'Z)^{-1} Z'X."""
    Y = np.asarray(Y, dtype=float).reshape(-1)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    ZtZ = Z.T @ Z
    try:
        coef = np.linalg.solve(ZtZ, Z.T @ X)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient("Z'Z singular") from exc
    Xh = Z @ coef
    XtX = Xh.T @ Xh
    try:
        return np.linalg.solve(XtX, Xh.T @ Y)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient("fitted design rank deficient") from exc


def linear_gmm(Y, X, Z, W):
    """Closed-form linear GMM: (X'Z W Z'X)^{-1} X'Z W Z'Y."""
    Y = np.asarray(Y, dtype=float).reshape(-1)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    W = np.asarray(W, dtype=float)
    XtZ = X.T @ Z
    A = XtZ @ W @ XtZ.T
    b = XtZ @ W @ (Z.T @ Y)
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient("X'Z W Z'X singular") from exc


def _gauss_newton(model, data, w_factor, theta0, aux=None, max_iters=100,
                  tol=1e-10):
    """Minimize gbar(theta)' W gbar(theta) by Gauss-Newton with backtracking."""
    theta = np.asarray(theta0, dtype=float).copy()
    n = data.shape[0]

    def objective(th):
        gbar = model.moments(th, data, aux).mean(axis=0)
        return float(gbar @ chol_solve(w_factor, gbar)) if w_factor is not None \
            else float(gbar @ gbar), gbar

    obj, gbar = objective(theta)
    for _ in range(max_iters):
        J = model.gradient_sum(theta, data, aux) / n
        WJ = chol_solve(w_factor, J) if w_factor is not None else J
        A = sym(J.T @ WJ)
        rhs = WJ.T @ gbar
        try:
            step = np.linalg.solve(A + 1e-12 * np.trace(A) / model.p * np.eye(model.p), rhs)
        except np.linalg.LinAlgError as exc:
            raise OfflineFitFailed("Gauss-Newton system singular") from exc
        lam = 1.0
        for _ in range(20):
            cand = theta - lam * step
            cand_obj, cand_g = objective(cand)
            if cand_obj <= obj:
                break
            lam *= 0.5
        else:
            return theta, obj
        moved = np.linalg.norm(theta - cand)
        theta, obj, gbar = cand, cand_obj, cand_g
        if moved < tol * (1.0 + np.linalg.norm(theta)):
            break
    return theta, obj


def twostep_gmm(model, data, lrv="bartlett", theta0=None, aux=None):
    """Two-step GMM on one data matrix.

    Step 1 uses W = I, step 2 inverts the estimated long-run variance of
    the step-1 moments.  ``lrv`` is "bartlett", "sample", or a callable
    mapping an (n, q) moment matrix to a (q, q) variance.  Returns
    (theta, Sigma) with Sigma the step-2 variance estimate.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if theta0 is None:
        theta0 = np.zeros(model.p)
    theta1, _ = _gauss_newton(model, data, None, theta0, aux=aux)
    g1 = model.moments(theta1, data, aux)
    if callable(lrv):
        Sigma = lrv(g1)
    elif lrv == "bartlett":
        Sigma = bartlett_lrv(g1)
    elif lrv == "sample":
        g1c = g1 - g1.mean(axis=0)
        Sigma = g1c.T @ g1c / g1.shape[0]
    else:
        raise ValueError(f"unknown lrv choice {lrv!r}")
    factor = chol_factor(pd_adjust(Sigma))
    theta2, _ = _gauss_newton(model, data, factor, theta1, aux=aux)
    g2 = model.moments(theta2, data, aux)
    if lrv == "bartlett":
        Sigma2 = bartlett_lrv(g2)
    elif lrv == "sample":
        g2c = g2 - g2.mean(axis=0)
        Sigma2 = g2c.T @ g2c / g2.shape[0]
    else:
        Sigma2 = lrv(g2)
    return theta2, pd_adjust(Sigma2)


def twostep_linear_iv(Y, X, Z, lrv="bartlett"):
    """Two-step GMM specialized to linear IV moments (closed forms)."""
    Y = np.asarray(Y, dtype=float).reshape(-1)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    q = Z.shape[1]
    theta1 = linear_gmm(Y, X, Z, np.eye(q))
    g1 = Z * (Y - X @ theta1)[:, None]
    if lrv == "bartlett":
        Sigma = bartlett_lrv(g1)
    else:
        g1c = g1 - g1.mean(axis=0)
        Sigma = g1c.T @ g1c / g1.shape[0]
    factor = chol_factor(pd_adjust(Sigma))
    W = chol_solve(factor, np.eye(q))
    theta2 = linear_gmm(Y, X, Z, W)
    g2 = Z * (Y - X @ theta2)[:, None]
    if lrv == "bartlett":
        Sigma2 = bartlett_lrv(g2)
    else:
        g2c = g2 - g2.mean(axis=0)
        Sigma2 = g2c.T @ g2c / g2.shape[0]
    return theta2, pd_adjust(Sigma2)


def initial_quantile_fit(Y, X, tau, tol=1e-8, max_iters=200):
    """Damped Newton on the smoothed quantile estimating equation.

    Bandwidth h = sqrt(p/n).  Warm-started from the least squares fit with
    the intercept shifted to the empirical tau-quantile of its residuals.
    """
    Y = np.asarray(Y, dtype=float).reshape(-1)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, p = X.shape
    if n < 5 * p:
        raise NoConvergence("too few observations for quantile initialization")
    model = SmoothedQuantileMoment(p, tau)
    h = quantile_bandwidth(p, n)
    aux = {"bandwidth": h}
    data = np.column_stack([Y, X])

    theta = np.linalg.lstsq(X, Y, rcond=None)[0]
    resid = Y - X @ theta
    shift = np.quantile(resid, tau)
    const_col = np.flatnonzero(np.all(X == X[0, :], axis=0) & (X[0, :] != 0))
    if const_col.size:
        theta[const_col[0]] += shift / X[0, const_col[0]]

    m = model.moments(theta, data, aux).mean(axis=0)
    norm0 = np.linalg.norm(m)
    for _ in range(max_iters):
        if norm0 < tol:
            return theta
        J = model.gradient_sum(theta, data, aux) / n
        A = J.T @ J + 1e-12 * np.eye(p)
        step = np.linalg.solve(A, J.T @ m)
        lam = 1.0
        for _ in range(30):
            cand = theta - lam * step
            m_c = model.moments(cand, data, aux).mean(axis=0)
            if np.linalg.norm(m_c) < norm0:
                theta, m, norm0 = cand, m_c, np.linalg.norm(m_c)
                break
            lam *= 0.5
        else:
            break
    if norm0 >= max(tol, 1e-6):
        raise NoConvergence(f"quantile fit stalled at ||m|| = {norm0:.2e}")
    return theta


# ---------------------------------------------------------------------------
# Wavelet-variance model fit
# ---------------------------------------------------------------------------

RHO_BOUNDS = (1e-4, 0.9999)
SIG_BOUNDS = (1e-13, 1e-5)


def _project_wavelet_theta(theta, n_ar):
    out = np.asarray(theta, dtype=float).copy()
    for i in range(n_ar):
        out[2 * i] = np.clip(out[2 * i], *RHO_BOUNDS)
        out[2 * i + 1] = np.clip(out[2 * i + 1], *SIG_BOUNDS)
    out[-1] = np.clip(out[-1], *SIG_BOUNDS)
    return out


def _wavelet_objective(model, nu_hat, w_factor, theta):
    m = nu_hat - model.nu_vector(theta)
    return float(m @ chol_solve(w_factor, m))


def _wavelet_gn(model, nu_hat, w_factor, theta0, max_iters=200):
    """Projected Gauss-Newton in (rho, log sigma^2) coordinates."""
    n_ar = model.n_ar
    theta = _project_wavelet_theta(theta0, n_ar)
    obj = _wavelet_objective(model, nu_hat, w_factor, theta)
    sig_idx = [2 * i + 1 for i in range(n_ar)] + [model.p - 1]
    for _ in range(max_iters):
        m = nu_hat - model.nu_vector(theta)
        J = model.nu_jacobian(theta)
        scale = np.ones(model.p)
        scale[sig_idx] = theta[sig_idx]  # d/d log sigma^2
        Js = J * scale[None, :]
        WJ = chol_solve(w_factor, Js)
        A = sym(Js.T @ WJ) + 1e-10 * np.eye(model.p)
        rhs = WJ.T @ m
        try:
            step = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        improved = False
        for _ in range(25):
            cand = theta.copy()
            cand += lam * step * scale
            cand[sig_idx] = theta[sig_idx] * np.exp(lam * step[sig_idx])
            cand = _project_wavelet_theta(cand, n_ar)
            cand_obj = _wavelet_objective(model, nu_hat, w_factor, cand)
            if cand_obj < obj - 1e-14 * (1 + abs(obj)):
                theta, obj = cand, cand_obj
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
    return theta, obj


def _wavelet_starts(model, nu_hat):
    """Heuristic starts: grid the AR coefficients, solve the variance
    weights by least squares (nu is linear in the sigma^2 block)."""
    starts = []
    rho_grid = [(0.8, 0.1), (0.95, 0.3), (0.99, 0.05), (0.99, 0.5), (0.9, 0.6)]
    t = model.scale_lens
    for rhos in rho_grid:
        cols = [np.array([ar1_wavelet_variance(r, 1.0, ti) for ti in t])
                for r in rhos[:model.n_ar]]
        cols.append(1.0 / t)
        A = np.column_stack(cols)
        sig, *_ = np.linalg.lstsq(A, nu_hat, rcond=None)
        theta = np.empty(model.p)
        for i in range(model.n_ar):
            theta[2 * i] = rhos[i]
            theta[2 * i + 1] = sig[i]
        theta[-1] = sig[-1]
        starts.append(_project_wavelet_theta(theta, model.n_ar))
    return starts


def fit_wavelet_model(wavelet_obs, n_ar=2, lrv="bartlett"):
    """Two-step fit of the composite AR(1)+noise model to wavelet rows.

    Step 1 weights by the diagonal of the empirical second moments (the
    scales differ by orders of magnitude); step 2 by the inverse estimated
    long-run variance, floored on the correlation scale.  Multi-start
    projected Gauss-Newton inside the feasible box.
    """
    Wv = np.atleast_2d(np.asarray(wavelet_obs, dtype=float))
    model = WaveletMoment(Wv.shape[1], n_ar=n_ar)
    nu_hat = (Wv ** 2).mean(axis=0)

    def corr_floored_factor(Sigma):
        dd = np.sqrt(np.clip(np.diag(Sigma), 1e-300, None))
        corr = Sigma / np.outer(dd, dd)
        corr = pd_adjust(corr)
        return chol_factor(corr * np.outer(dd, dd))

    w1 = chol_factor(np.diag(np.maximum(nu_hat ** 2, 1e-300)))
    fits = [_wavelet_gn(model, nu_hat, w1, th) for th in _wavelet_starts(model, nu_hat)]
    theta1 = min(fits, key=lambda f: f[1])[0]

    g1 = model.moments(theta1, Wv)
    Sigma = bartlett_lrv(g1) if lrv == "bartlett" else (lambda gc: gc.T @ gc / len(gc))(g1 - g1.mean(0))
    factor = corr_floored_factor(Sigma)
    theta2, obj2 = _wavelet_gn(model, nu_hat, factor, theta1)
    obj1 = _wavelet_objective(model, nu_hat, factor, theta1)
    if obj2 > obj1 + 1e-12:
        raise OfflineFitFailed("second step failed to improve the objective")
    g2 = model.moments(theta2, Wv)
    Sigma2 = bartlett_lrv(g2) if lrv == "bartlett" else (lambda gc: gc.T @ gc / len(gc))(g2 - g2.mean(0))
    return theta2, Sigma2
