"""Online maximal overlap discrete wavelet transform with the Haar filter.

The offline pyramid computes, level by level,

    w_t = 0.5 y_t - 0.5 y_{t-tau}     (detail)
    v_t = 0.5 y_t + 0.5 y_{t-tau}     (smooth, input of the next level)

with tau = 2^j at level j, emitting detail coefficients for t >= 2^{j+1}.
The streaming version keeps, per level, a ring of the last tau smooth
values; one push then costs O(q) with no history scan, and the emitted
coefficients are bit-identical to the offline pass because the floating
point operations are the same in the same order.
"""

import numpy as np

from .errors import TooShort


class _Ring:
    """Fixed-capacity FIFO of floats with O(1) pop/push."""

    __slots__ = ("buf", "head", "cap")

    def __init__(self, values):
        self.buf = np.asarray(values, dtype=float).copy()
        self.cap = self.buf.shape[0]
        self.head = 0

    def pop_push(self, value):
        """Pop the oldest element and push ``value`` in its place."""
        old = self.buf[self.head]
        self.buf[self.head] = value
        self.head = (self.head + 1) % self.cap
        return old

    def snapshot(self):
        return np.r_[self.buf[self.head:], self.buf[:self.head]]


class ModwtState:
    """Streaming pyramid state: q levels, level j holding 2^j values."""

    def __init__(self, levels, rings, n):
        self.q = levels
        self.rings = rings
        self.n = n

    def to_dict(self):
        return {"q": self.q, "n": self.n,
                "queues": [r.snapshot().tolist() for r in self.rings]}

    @classmethod
    def from_dict(cls, d):
        rings = [_Ring(vals) for vals in d["queues"]]
        return cls(d["q"], rings, d["n"])


def modwt_init(y, levels):
    """Full pyramid pass over y; returns (state, coefficient arrays).

    Element k of the j-th returned array is the detail coefficient at time
    t = 2^{j+1} + k (1-based).  Requires len(y) > 2^levels.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    n = y.shape[0]
    if n <= 2 ** levels:
        raise TooShort(f"need more than 2^{levels} observations, got {n}")
    cur = y.copy()
    coeffs = []
    rings = []
    for j in range(levels):
        tau = 2 ** j
        w = 0.5 * cur[2 * tau - 1:n] - 0.5 * cur[tau - 1:n - tau]
        v = 0.5 * cur[2 * tau - 1:n] + 0.5 * cur[tau - 1:n - tau]
        rings.append(_Ring(cur[n - tau:n]))
        coeffs.append(w)
        nxt = np.empty_like(cur)
        nxt[2 * tau - 1:n] = v
        cur = nxt
    return ModwtState(levels, rings, n), coeffs


def modwt_push(state, y_new):
    """Consume one observation; emit one detail coefficient per level."""
    val = float(y_new)
    out = np.empty(state.q)
    for j in range(state.q):
        old = state.rings[j].pop_push(val)
        out[j] = 0.5 * val - 0.5 * old
        val = 0.5 * val + 0.5 * old
    state.n += 1
    return out


def wavelet_observations(y, levels):
    """Aligned rows of per-scale coefficients for t >= 2^levels.

    Coefficients with t < 2^levels are dropped at every level, since the
    deepest level is only defined from there on; the result is an
    (n - 2^levels + 1, levels) matrix suitable for wavelet moment models.
    """
    _, coeffs = modwt_init(y, levels)
    n = len(np.asarray(y).reshape(-1))
    t0 = 2 ** levels
    cols = []
    for j, w in enumerate(coeffs):
        start = 2 ** (j + 1)  # time of w[0] at this level
        cols.append(w[t0 - start:])
    return np.column_stack(cols)
