"""Long-run variance estimation for streaming moment vectors.

Three estimators live here:

* ``WelfordAccumulator`` -- one-pass sample variance, appropriate when the
  moment sequence is independent.
* ``KernelLrv`` -- a recursive kernel long-run variance estimator.  The
  kernel weight between observations i and j is
  ``(1 - |i-j|^lam / t_n^lam) * 1{|i-j| <= s'_{max(i,j)}}`` where the
  truncation sequence ``s'`` follows a bandwidth recursion driven by
  ``s_n = min(floor(Psi n^psi), n-1)`` and ``t_n = min(ceil(Xi n^xi), n)``.
  Because the indicator binds at the later index of each pair, past pair
  contributions are final, so the full double sum telescopes into a handful
  of running sums that are updated in O(bandwidth) per observation.
* ``bartlett_lrv`` -- an offline Bartlett (Newey-West style) benchmark with
  an AR(1) plug-in bandwidth.

All estimated variance matrices pass through ``pd_adjust`` before being
inverted elsewhere.
"""

import math

import numpy as np

from .errors import DegenerateSeries, Underflow


def pd_adjust(M):
    """Clip eigenvalues of a symmetric matrix to a small positive floor.

    The floor is ``1e-8 * (1 + trace(M)/q)``, guarded below by 1e-12 so the
    output is positive definite even for pathologically indefinite input.
    """
    M = np.asarray(M, dtype=float)
    q = M.shape[0]
    floor = 1e-8 * (1.0 + np.trace(M) / q)
    floor = max(floor, 1e-12)
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    if vals.min() > floor:
        return M
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


class WelfordAccumulator:
    """One-pass mean / covariance of q-dimensional vectors.

    Uses the population divisor n, matching the limiting quantity; the
    difference from the n-1 convention is O(1/n).
    """

    def __init__(self, q):
        self.q = q
        self.n = 0
        self.mean = np.zeros(q)
        self.M2 = np.zeros((q, q))

    def copy(self):
        out = WelfordAccumulator(self.q)
        out.n = self.n
        out.mean = self.mean.copy()
        out.M2 = self.M2.copy()
        return out

    def push(self, x):
        self.push_batch(np.asarray(x, dtype=float)[None, :])

    def push_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = X.shape[0]
        if m == 0:
            return
        bmean = X.mean(axis=0)
        Xc = X - bmean
        bM2 = Xc.T @ Xc
        delta = bmean - self.mean
        tot = self.n + m
        self.M2 += bM2 + np.outer(delta, delta) * (self.n * m / tot)
        self.mean = self.mean + delta * (m / tot)
        self.n = tot

    def variance(self):
        if self.n == 0:
            raise Underflow("no observations pushed")
        return self.M2 / self.n

    def to_dict(self):
        return {"q": self.q, "n": self.n, "mean": self.mean.tolist(),
                "M2": self.M2.tolist()}

    @classmethod
    def from_dict(cls, d):
        out = cls(d["q"])
        out.n = d["n"]
        out.mean = np.array(d["mean"], dtype=float)
        out.M2 = np.array(d["M2"], dtype=float)
        return out


def _bandwidth_s(k, Psi, psi):
    # s_k = min(floor(Psi * k^psi), k - 1); k may be an array
    k = np.asarray(k)
    return np.minimum(np.floor(Psi * np.power(k, psi)).astype(np.int64), k - 1)


def sprime_sequence(n, Psi, psi, phi):
    """The truncation sequence s'_1..s'_n.

    Recursion: s'_k = s'_{k-1} + 1 while s_{k-1} <= s'_{k-1} + 1 < phi*s_{k-1};
    s'_k = s_k once s'_{k-1} + 1 >= phi*s_{k-1}; s'_1 = s_1.  The remaining
    case (s'_{k-1} + 1 < s_{k-1}) cannot occur after initialization because
    s grows by at most one per step; it is folded into the increment branch.
    With phi = 1 the recursion collapses to s'_k = s_k.
    """
    ks = np.arange(1, n + 1)
    s = _bandwidth_s(ks, Psi, psi)
    if phi == 1.0:
        return s
    sp = np.empty(n, dtype=np.int64)
    sp[0] = s[0]
    for k in range(1, n):
        cand = sp[k - 1] + 1
        if cand >= phi * s[k - 1]:
            sp[k] = s[k]
        else:
            sp[k] = cand
    return sp


class KernelLrv:
    """Streaming kernel long-run variance estimator.

    Maintains, for r in {0, lam}, the pair sums

        A_r = sum_{i,j} |i-j|^r 1{|i-j| <= s'_{max(i,j)}} X_i X_j'
        B_r = sum_{i,j} |i-j|^r 1{...} X_i
        c_r = sum_{i,j} |i-j|^r 1{...}

    over ordered pairs including the diagonal, plus the running sum of X.
    The query assembles the mean-corrected estimator from these sums, which
    is exact because the truncation indicator freezes past contributions.

    Memory is the ring of the most recent s' vectors: O(n^psi q + q^2).
    Defaults Psi = Xi = 1 and psi = xi = 1/(1+2*lam); lam = 1 suits strong
    serial dependence (lam = 3 weak), phi = 1 abundant memory (phi = 2
    scarce).
    """

    def __init__(self, q, lam=1, phi=1.0, Psi=1.0, Xi=1.0, psi=None, xi=None):
        if lam < 1 or int(lam) != lam:
            raise ValueError("lam must be a positive integer")
        if phi < 1.0:
            raise ValueError("phi must be >= 1")
        self.q = q
        self.lam = int(lam)
        self.phi = float(phi)
        self.Psi = float(Psi)
        self.Xi = float(Xi)
        self.psi = float(psi) if psi is not None else 1.0 / (1 + 2 * self.lam)
        self.xi = float(xi) if xi is not None else 1.0 / (1 + 2 * self.lam)
        self.n = 0
        self.s_prime = 0
        self.sum_x = np.zeros(q)
        self.A0 = np.zeros((q, q))
        self.Al = np.zeros((q, q))
        self.B0 = np.zeros(q)
        self.Bl = np.zeros(q)
        self.c0 = 0.0
        self.cl = 0.0
        self.tail = np.zeros((0, q))

    def copy(self):
        out = KernelLrv(self.q, self.lam, self.phi, self.Psi, self.Xi,
                        self.psi, self.xi)
        out.n = self.n
        out.s_prime = self.s_prime
        out.sum_x = self.sum_x.copy()
        out.A0, out.Al = self.A0.copy(), self.Al.copy()
        out.B0, out.Bl = self.B0.copy(), self.Bl.copy()
        out.c0, out.cl = self.c0, self.cl
        out.tail = self.tail.copy()
        return out

    # -- streaming updates ------------------------------------------------

    def push(self, x):
        self.push_batch(np.asarray(x, dtype=float)[None, :])

    def _sprime_for(self, ks):
        """s'_k for the new global indices ks, continuing the recursion."""
        if self.phi == 1.0:
            return _bandwidth_s(ks, self.Psi, self.psi)
        s_prev = self.s_prime if self.n > 0 else None
        out = np.empty(len(ks), dtype=np.int64)
        for i, k in enumerate(ks):
            if k == 1:
                out[i] = int(_bandwidth_s(np.array([1]), self.Psi, self.psi)[0])
            else:
                s_km1 = int(_bandwidth_s(np.array([k - 1]), self.Psi, self.psi)[0])
                cand = s_prev + 1
                if cand >= self.phi * s_km1:
                    out[i] = int(_bandwidth_s(np.array([k]), self.Psi, self.psi)[0])
                else:
                    out[i] = cand
            s_prev = out[i]
        return out

    def push_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = X.shape[0]
        if m == 0:
            return
        ks = np.arange(self.n + 1, self.n + m + 1)
        w = self._sprime_for(ks)

        combined = np.vstack([self.tail, X]) if self.tail.shape[0] else X
        base = self.n - self.tail.shape[0]  # combined[i] is global index base+1+i
        loc = ks - base - 1                 # row of k within combined
        if np.any(loc - w < 0):
            raise RuntimeError("ring buffer shorter than required window")

        # prefix sums give the unweighted window sums C0_k
        S = np.vstack([np.zeros(self.q), np.cumsum(combined, axis=0)])
        C0 = S[loc] - S[loc - w]

        lam = self.lam
        wmax = int(w.max()) if m else 0
        powsum = np.concatenate([[0.0], np.cumsum(np.arange(1, wmax + 1, dtype=float) ** lam)])
        lagsum = powsum[w]

        # lag-power weighted window sums Cl_k, grouped by runs of equal width
        Cl = np.zeros_like(C0)
        if wmax > 0:
            starts = np.flatnonzero(np.r_[True, np.diff(w) != 0])
            ends = np.r_[starts[1:], m]
            for a, b in zip(starts, ends):
                width = int(w[a])
                if width == 0:
                    continue
                lo = loc[a] - width
                hi = loc[b - 1]
                seg = combined[lo:hi]
                view = np.lib.stride_tricks.sliding_window_view(seg, width, axis=0)
                wts = np.arange(width, 0, -1, dtype=float) ** lam
                Cl[a:b] = np.einsum("nqt,t->nq", view, wts)

        XA0 = X.T @ C0
        self.A0 += XA0 + XA0.T + X.T @ X
        XAl = X.T @ Cl
        self.Al += XAl + XAl.T
        self.B0 += ((w + 1.0)[:, None] * X).sum(axis=0) + C0.sum(axis=0)
        self.Bl += (lagsum[:, None] * X).sum(axis=0) + Cl.sum(axis=0)
        self.c0 += float((2 * w + 1).sum())
        self.cl += 2.0 * float(lagsum.sum())

        self.sum_x += X.sum(axis=0)
        self.n += m
        self.s_prime = int(w[-1])

        s_now = int(_bandwidth_s(np.array([self.n]), self.Psi, self.psi)[0])
        keep = min(self.n, max(self.s_prime, s_now) + 2)
        full = combined if self.tail.shape[0] else X
        self.tail = full[-keep:].copy() if keep > 0 else np.zeros((0, self.q))

    # -- queries -----------------------------------------------------------

    def query(self, adjust=True):
        """Assemble the long-run variance estimate from the running sums."""
        if self.n < 2:
            raise Underflow("need at least two observations")
        t = min(math.ceil(self.Xi * self.n ** self.xi), self.n)
        tfac = float(t) ** self.lam
        A = self.A0 - self.Al / tfac
        B = self.B0 - self.Bl / tfac
        c = self.c0 - self.cl / tfac
        mean = self.sum_x / self.n
        M = A - np.outer(B, mean) - np.outer(mean, B) + c * np.outer(mean, mean)
        M = 0.5 * (M + M.T) / self.n
        return pd_adjust(M) if adjust else M

    def to_dict(self):
        return {
            "q": self.q, "lam": self.lam, "phi": self.phi, "Psi": self.Psi,
            "Xi": self.Xi, "psi": self.psi, "xi": self.xi, "n": self.n,
            "s_prime": self.s_prime, "sum_x": self.sum_x.tolist(),
            "A0": self.A0.tolist(), "Al": self.Al.tolist(),
            "B0": self.B0.tolist(), "Bl": self.Bl.tolist(),
            "c0": self.c0, "cl": self.cl, "tail": self.tail.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        out = cls(d["q"], d["lam"], d["phi"], d["Psi"], d["Xi"], d["psi"], d["xi"])
        out.n = d["n"]
        out.s_prime = d["s_prime"]
        out.sum_x = np.array(d["sum_x"], dtype=float)
        out.A0 = np.array(d["A0"], dtype=float)
        out.Al = np.array(d["Al"], dtype=float)
        out.B0 = np.array(d["B0"], dtype=float)
        out.Bl = np.array(d["Bl"], dtype=float)
        out.c0, out.cl = d["c0"], d["cl"]
        out.tail = np.array(d["tail"], dtype=float).reshape(-1, d["q"])
        return out


def ar1_plugin_bandwidth(X):
    """Andrews AR(1) plug-in bandwidth for the Bartlett kernel.

    Per coordinate fit rho and innovation variance, form
    alpha(1) = sum 4 rho^2 sigma^4 / ((1-rho)^6 (1+rho)^2)
             / sum sigma^4 / (1-rho)^4,
    then bw = 1.1447 (alpha(1) N)^{1/3}, floored at 0.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N = X.shape[0]
    Xc = X - X.mean(axis=0)
    num = 0.0
    den = 0.0
    for j in range(X.shape[1]):
        x = Xc[:, j]
        d = float(x[:-1] @ x[:-1])
        if d <= 0:
            continue
        rho = float(x[1:] @ x[:-1]) / d
        rho = min(max(rho, -0.97), 0.97)
        resid = x[1:] - rho * x[:-1]
        sig2 = float(resid @ resid) / (N - 1)
        num += 4.0 * rho ** 2 * sig2 ** 2 / ((1 - rho) ** 6 * (1 + rho) ** 2)
        den += sig2 ** 2 / (1 - rho) ** 4
    if den <= 0:
        return 0.0
    alpha1 = num / den
    return max(1.1447 * (alpha1 * N) ** (1.0 / 3.0), 0.0)


def bartlett_lrv(X, bandwidth="andrews"):
    """Offline Bartlett kernel long-run variance of the rows of X.

    ``bandwidth`` is either the string "andrews" (AR(1) plug-in, no
    prewhitening) or a fixed non-negative scalar.  Lag-h terms get weight
    1 - h/(bw+1).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N, q = X.shape
    if N < 3:
        raise Underflow("need at least three observations")
    Xc = X - X.mean(axis=0)
    if not np.any(np.abs(Xc) > 0):
        raise DegenerateSeries("all rows identical")
    if bandwidth == "andrews":
        bw = ar1_plugin_bandwidth(X)
    else:
        bw = float(bandwidth)
        if bw < 0:
            raise ValueError("bandwidth must be >= 0")
    Sigma = Xc.T @ Xc / N
    L = min(int(math.floor(bw)), N - 1)
    for h in range(1, L + 1):
        Gh = Xc[h:].T @ Xc[:-h] / N
        Sigma += (1.0 - h / (bw + 1.0)) * (Gh + Gh.T)
    return 0.5 * (Sigma + Sigma.T)
