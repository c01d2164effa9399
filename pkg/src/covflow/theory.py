"""Deterministic kernel computations.

Everything in this module is exact arithmetic on the infinite-width side:
the ReLU dual function ``f``, the variance profile of a scaled ResNet, the
infinite-width covariance recursion, limits for series scalings, the
limiting covariance ODE (integrated with classical RK4), its Euler scheme on
a scaling-sequence time grid, and the width-first recursions used as
references for the MLP-style architectures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConvergenceError, DomainError
from .scaling import Explicit, ScalingSequence, SeriesSpec, is_normalized

_INV_PI = 1.0 / math.pi
CLAMP_SLACK = 1e-9
CS_SLACK = 1e-12


# --------------------------------------------------------------------------
# ReLU dual function
# --------------------------------------------------------------------------


def _f(c: float) -> float:
    # caller guarantees |c| <= 1
    return (c * math.asin(c) + math.sqrt(1.0 - c * c)) * _INV_PI + 0.5 * c


def relu_dual(c):
    """``f(c) = (c asin c + sqrt(1 - c^2)) / pi + c / 2``.

    This is ``2 E[relu(Z1) relu(c Z1 + sqrt(1 - c^2) Z2)]`` for independent
    standard normals. Accepts a float or an array. Inputs within ``1e-9``
    outside ``[-1, 1]`` are clamped; anything further raises ``DomainError``.
    """
    if np.ndim(c) == 0:
        c = float(c)
        if not abs(c) <= 1.0 + CLAMP_SLACK:
            raise DomainError(f"correlation {c!r} outside [-1, 1]")
        return _f(min(1.0, max(-1.0, c)))
    c = np.asarray(c, dtype=float)
    if not np.all(np.abs(c) <= 1.0 + CLAMP_SLACK):
        raise DomainError("correlation outside [-1, 1]")
    c = np.clip(c, -1.0, 1.0)
    return (c * np.arcsin(c) + np.sqrt(1.0 - c * c)) * _INV_PI + 0.5 * c


def relu_dual_prime(c, limit: bool = False):
    """``f'(c) = asin(c) / pi + 1/2`` on the open interval.

    With ``limit=True`` the one-sided limits 0 and 1 are returned at the
    endpoints instead of raising.
    """
    c = float(c)
    if abs(c) >= 1.0:
        if limit and abs(c) <= 1.0 + CLAMP_SLACK:
            return 1.0 if c > 0 else 0.0
        raise DomainError(f"derivative undefined at c={c!r}")
    return math.asin(c) * _INV_PI + 0.5


def mlp_correlation_trace(c0: float, L: int) -> np.ndarray:
    """Infinite-width correlations ``c_l = f(c_{l-1})`` of a He-initialized ReLU MLP."""
    if not abs(c0) <= 1.0:
        raise DomainError(f"c0 must lie in [-1, 1], got {c0!r}")
    out = np.empty(L + 1)
    c = float(c0)
    out[0] = c
    for l in range(1, L + 1):
        c = _f(c)
        out[l] = c
    return out


# --------------------------------------------------------------------------
# Kernel containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelTriple:
    """``(q(a, a), q(a, b), q(b, b))`` at one layer or time."""

    q_aa: float
    q_ab: float
    q_bb: float

    def correlation(self) -> float:
        return self.q_ab / math.sqrt(self.q_aa * self.q_bb)

    def clamped_correlation(self) -> float:
        return min(1.0, max(-1.0, self.correlation()))

    def satisfies_cauchy_schwarz(self, rel: float = CS_SLACK) -> bool:
        return abs(self.q_ab) <= math.sqrt(self.q_aa * self.q_bb) * (1.0 + rel)

    def as_tuple(self):
        return (self.q_aa, self.q_ab, self.q_bb)


class KernelTrace:
    """Array-backed sequence of :class:`KernelTriple` (one per layer)."""

    def __init__(self, q_aa, q_ab, q_bb, clamp_events: int = 0):
        self.q_aa = np.asarray(q_aa, dtype=float)
        self.q_ab = np.asarray(q_ab, dtype=float)
        self.q_bb = np.asarray(q_bb, dtype=float)
        if not (self.q_aa.shape == self.q_ab.shape == self.q_bb.shape):
            raise ValueError("kernel components must have equal length")
        self.clamp_events = clamp_events

    def __len__(self):
        return len(self.q_ab)

    def __getitem__(self, i):
        return KernelTriple(float(self.q_aa[i]), float(self.q_ab[i]), float(self.q_bb[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def correlation(self) -> np.ndarray:
        return self.q_ab / np.sqrt(self.q_aa * self.q_bb)

    def final(self) -> KernelTriple:
        return self[-1]


class InputPair:
    """Two inputs ``a, b`` in ``R^d`` and their initial kernel.

    The theory only ever sees the triple ``(|a|^2/d, <a,b>/d, |b|^2/d)``;
    :meth:`from_kernel` builds a pair with a prescribed triple directly.
    """

    def __init__(self, a, b, *, _q0: Optional[KernelTriple] = None):
        a = np.asarray(a, dtype=float).ravel()
        b = np.asarray(b, dtype=float).ravel()
        if a.shape != b.shape or a.size == 0:
            raise DomainError("inputs must be non-empty vectors of equal dimension")
        self.a = a
        self.b = b
        self.d = a.size
        if _q0 is None:
            _q0 = KernelTriple(float(a @ a) / self.d, float(a @ b) / self.d, float(b @ b) / self.d)
        if not (_q0.q_aa > 0 and _q0.q_bb > 0):
            raise DomainError("inputs must be nonzero")
        if _q0.q_ab == 0:
            raise DomainError("inputs must not be orthogonal")
        if not _q0.satisfies_cauchy_schwarz(1e-12):
            raise DomainError("initial kernel violates Cauchy-Schwarz")
        self.q0 = _q0

    @classmethod
    def from_kernel(cls, q_aa: float, q_ab: float, q_bb: float) -> "InputPair":
        """Pair in ``R^2`` whose initial kernel is exactly the given triple."""
        if not (q_aa > 0 and q_bb > 0):
            raise DomainError("diagonal entries must be positive")
        c = q_ab / math.sqrt(q_aa * q_bb)
        if abs(c) > 1.0 + CS_SLACK:
            raise DomainError("triple violates Cauchy-Schwarz")
        c = min(1.0, max(-1.0, c))
        a = [math.sqrt(2.0 * q_aa), 0.0]
        b = [math.sqrt(2.0 * q_bb) * c, math.sqrt(2.0 * q_bb) * math.sqrt(1.0 - c * c)]
        return cls(a, b, _q0=KernelTriple(float(q_aa), float(q_ab), float(q_bb)))

    @classmethod
    def from_correlation(cls, c0: float, q_aa: float = 1.0, q_bb: float = 1.0) -> "InputPair":
        return cls.from_kernel(q_aa, c0 * math.sqrt(q_aa * q_bb), q_bb)

    @property
    def norm_a(self) -> float:
        return math.sqrt(self.q0.q_aa * self.d)

    @property
    def norm_b(self) -> float:
        return math.sqrt(self.q0.q_bb * self.d)

    @property
    def zeta(self) -> float:
        """``|a| |b| / d``."""
        return math.sqrt(self.q0.q_aa * self.q0.q_bb)

    def scaled(self, s: float) -> "InputPair":
        """Pair with ``a`` multiplied by ``s``."""
        return InputPair(self.a * s, self.b)

    def describe(self) -> dict:
        return {
            "d": self.d,
            "a": [float(x) for x in self.a],
            "b": [float(x) for x in self.b],
            "q0": list(self.q0.as_tuple()),
        }


def sample_unit_pair(d: int, seed: int) -> InputPair:
    """Two ``N(0, I_d)`` draws rescaled to unit Euclidean norm."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x1A9B])))
    while True:
        a = rng.standard_normal(d)
        b = rng.standard_normal(d)
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
        if a @ b != 0.0:
            return InputPair(a, b)


# --------------------------------------------------------------------------
# Infinite-width recursions
# --------------------------------------------------------------------------


def variance_profile(seq: ScalingSequence, L: int, norm_sq_over_d: float) -> np.ndarray:
    """``E[Y_l^i(a)^2]`` for ``l = 0..L``: ``|a|^2/d * prod_{k<=l} (1 + alpha_k^2/2)``."""
    if L < 0:
        raise DomainError("depth must be >= 0")
    out = np.empty(L + 1)
    v = float(norm_sq_over_d)
    out[0] = v
    if L:
        for l, a2 in enumerate(seq.alpha_sq_row(L), start=1):
            v = v * (1.0 + 0.5 * a2)
            out[l] = v
    return out


def _cov_recursion(alpha_sq: Sequence[float], q0: KernelTriple):
    """Shared loop: diagonal by the variance product, off-diagonal by the f-update."""
    n = len(alpha_sq)
    qaa = np.empty(n + 1)
    qbb = np.empty(n + 1)
    qab = np.empty(n + 1)
    va, vb, q = q0.q_aa, q0.q_bb, q0.q_ab
    qaa[0], qbb[0], qab[0] = va, vb, q
    clamps = 0
    sqrt, asin = math.sqrt, math.asin
    for l, a2 in enumerate(alpha_sq, start=1):
        s = sqrt(va * vb)
        c = q / s
        if c > 1.0 or c < -1.0:
            if abs(c) - 1.0 > CLAMP_SLACK:
                clamps += 1
            c = 1.0 if c > 0 else -1.0
        q = q + a2 * 0.5 * s * ((c * asin(c) + sqrt(1.0 - c * c)) * _INV_PI + 0.5 * c)
        va = va * (1.0 + 0.5 * a2)
        vb = vb * (1.0 + 0.5 * a2)
        qaa[l], qbb[l], qab[l] = va, vb, q
    return qaa, qab, qbb, clamps


def infinite_width_trace(seq: ScalingSequence, L: int, pair: InputPair) -> KernelTrace:
    """Infinite-width covariance of a scaled ResNet at layers ``0..L``.

    Diagonal entries coincide bitwise with :func:`variance_profile`.
    """
    if L < 0:
        raise DomainError("depth must be >= 0")
    row = seq.alpha_sq_row(L) if L else np.empty(0)
    qaa, qab, qbb, clamps = _cov_recursion(row.tolist(), pair.q0)
    return KernelTrace(qaa, qab, qbb, clamp_events=clamps)


def series_tail_bound(series: SeriesSpec, L: int, q: KernelTriple) -> float:
    """Bound on ``|q_inf(a,b) - q_L(a,b)|`` given the kernel after ``L`` terms.

    Each later step adds ``zeta_l^2 / 2 * sqrt(q_aa q_bb) * f(c)`` with
    ``0 <= f <= 1``, and the diagonal can grow at most by ``exp(T / 2)``
    where ``T`` bounds the remaining squared tail.
    """
    tail = series.tail_sq(L)
    return 0.5 * math.sqrt(q.q_aa * q.q_bb) * math.exp(0.5 * tail) * tail


def series_limit_kernel(
    series: SeriesSpec,
    pair: InputPair,
    tol: float = 1e-8,
    max_terms: int = 200_000_000,
    check_every: int = 1024,
) -> KernelTriple:
    """Infinite-depth limit of the covariance for the scaling ``alpha_l = zeta_l``.

    Iterates the recursion until the analytic tail bound drops below ``tol``.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    if not series.summable:
        raise DomainError("series is not square-summable")
    q = pair.q0
    if isinstance(series, Explicit):
        qaa, qab, qbb, _ = _cov_recursion([v * v for v in series.values], q)
        return KernelTriple(float(qaa[-1]), float(qab[-1]), float(qbb[-1]))

    L = 0
    while series_tail_bound(series, L, q) >= tol:
        if L >= max_terms:
            raise ConvergenceError(
                f"tail bound {series_tail_bound(series, L, q):.3e} still above tol={tol:g} after {L} terms"
            )
        chunk = min(check_every, max_terms - L)
        terms = [series.term_sq(l) for l in range(L + 1, L + chunk + 1)]
        qaa, qab, qbb, _ = _cov_recursion(terms, q)
        q = KernelTriple(float(qaa[-1]), float(qab[-1]), float(qbb[-1]))
        L += chunk
        # grow the stride so checks stay a small fraction of the work
        check_every = min(check_every * 2, 1 << 20)
    return q


# --------------------------------------------------------------------------
# Limiting ODE
# --------------------------------------------------------------------------


def flow_functional(t: float, q: float, zeta: float) -> float:
    """``F(t, q) = e^{t/2}/2 * zeta * f(q / (zeta e^{t/2}))``."""
    g = math.exp(0.5 * t)
    c = q / (zeta * g)
    c = 1.0 if c > 1.0 else (-1.0 if c < -1.0 else c)
    return 0.5 * g * zeta * _f(c)


@dataclass
class FlowSolution:
    """RK4 solution of the covariance flow on a uniform grid."""

    t_grid: np.ndarray
    q_aa: np.ndarray
    q_ab: np.ndarray
    q_bb: np.ndarray
    step: float
    zeta: float

    @property
    def values(self) -> KernelTrace:
        return KernelTrace(self.q_aa, self.q_ab, self.q_bb)

    @property
    def correlation(self) -> np.ndarray:
        return self.q_ab / np.sqrt(self.q_aa * self.q_bb)

    def final(self) -> KernelTriple:
        return KernelTriple(float(self.q_aa[-1]), float(self.q_ab[-1]), float(self.q_bb[-1]))

    def q_ab_at(self, t) -> np.ndarray:
        """Off-diagonal value at arbitrary times via cubic Hermite interpolation.

        Slopes come from the ODE itself, so the interpolant is fourth-order
        accurate like the integrator.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        grid = self.t_grid
        if np.any(t < grid[0] - 1e-15) or np.any(t > grid[-1] + 1e-15):
            raise DomainError("time outside the solved interval")
        idx = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2)
        out = np.empty_like(t)
        for j, (tt, i) in enumerate(zip(t, idx)):
            t0, t1 = grid[i], grid[i + 1]
            y0, y1 = self.q_ab[i], self.q_ab[i + 1]
            if tt == t0:
                out[j] = y0
                continue
            if tt == t1:
                out[j] = y1
                continue
            h = t1 - t0
            s = (tt - t0) / h
            m0 = flow_functional(t0, y0, self.zeta) * h
            m1 = flow_functional(t1, y1, self.zeta) * h
            h00 = (1 + 2 * s) * (1 - s) ** 2
            h10 = s * (1 - s) ** 2
            h01 = s * s * (3 - 2 * s)
            h11 = s * s * (s - 1)
            out[j] = h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1
        return out

    def csv_rows(self):
        c = self.correlation
        for i in range(len(self.t_grid)):
            yield (self.t_grid[i], self.q_aa[i], self.q_ab[i], self.q_bb[i], c[i])


def covariance_flow(pair: InputPair, step: float = 1e-5, t_end: float = 1.0) -> FlowSolution:
    """Integrate ``dq/dt = F(t, q)`` from ``q_0 = <a,b>/d`` with fixed-step RK4.

    The step is shrunk (never grown) so that it divides ``t_end`` exactly.
    The diagonal has the closed form ``q0 * e^{t/2}`` and is reported as such.
    """
    if not step > 0:
        raise DomainError("step must be positive")
    if not (0.0 < t_end <= 1.0):
        raise DomainError("t_end must lie in (0, 1]")
    n_steps = max(1, math.ceil(t_end / step - 1e-9))
    h = t_end / n_steps
    zeta = pair.zeta
    t = t_end * np.arange(n_steps + 1) / n_steps
    q = np.empty(n_steps + 1)
    y = pair.q0.q_ab
    q[0] = y
    F = flow_functional
    for k in range(n_steps):
        tk = t[k]
        k1 = F(tk, y, zeta)
        k2 = F(tk + 0.5 * h, y + 0.5 * h * k1, zeta)
        k3 = F(tk + 0.5 * h, y + 0.5 * h * k2, zeta)
        k4 = F(tk + h, y + h * k3, zeta)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        q[k + 1] = y
    growth = np.exp(0.5 * t)
    q_aa = pair.q0.q_aa * growth
    q_bb = pair.q0.q_bb * growth
    q_aa[0], q_bb[0] = pair.q0.q_aa, pair.q0.q_bb
    return FlowSolution(t, q_aa, q, q_bb, h, zeta)


def euler_trace(seq: ScalingSequence, L: int, pair: InputPair) -> np.ndarray:
    """Euler scheme of the flow on the grid ``t_l`` with steps ``alpha_{l,L}^2``."""
    if not is_normalized(seq, L):
        raise DomainError(f"sequence is not normalized at depth {L}")
    alpha_sq = seq.alpha_sq_row(L)
    t = seq.time_grid(L)
    zeta = pair.zeta
    out = np.empty(L + 1)
    q = pair.q0.q_ab
    out[0] = q
    for l in range(1, L + 1):
        q = q + alpha_sq[l - 1] * flow_functional(t[l - 1], q, zeta)
        out[l] = q
    return out


# --------------------------------------------------------------------------
# Width-first references for MLP-style architectures
# --------------------------------------------------------------------------


def shaped_gain(L: int) -> float:
    """``E[phi_L(z)^2] / E[z^2]`` for the shaped ReLU ``z + relu(z)/sqrt(L)``."""
    return 1.0 + 1.0 / math.sqrt(L) + 0.5 / L


def shaped_relu_kernel(q: KernelTriple, L: int) -> float:
    """``E[phi_L(u) phi_L(v)]`` for a centred Gaussian pair with covariance ``q``."""
    s = math.sqrt(q.q_aa * q.q_bb)
    return q.q_ab * (1.0 + 1.0 / math.sqrt(L)) + 0.5 * s * _f(q.clamped_correlation()) / L


def width_limit_trace(arch: str, L: int, pair: InputPair, beta: float = 0.5) -> KernelTrace:
    """Width-first covariance recursion for ``mlp``, ``shaped_mlp``, ``shaped_resnet``.

    Weight variances follow :mod:`covflow.nets`: He (``2/n``) for the plain
    MLP and ``1 / (n * shaped_gain(L))`` for the shaped architectures, so the
    diagonal stays at its input value in all three cases.
    """
    qaa = np.empty(L + 1)
    qab = np.empty(L + 1)
    qbb = np.empty(L + 1)
    q = pair.q0
    qaa[0], qab[0], qbb[0] = q.as_tuple()
    for l in range(1, L + 1):
        if arch == "mlp":
            new_ab = math.sqrt(q.q_aa * q.q_bb) * _f(q.clamped_correlation())
        elif arch == "shaped_mlp":
            new_ab = shaped_relu_kernel(q, L) / shaped_gain(L)
        elif arch == "shaped_resnet":
            new_ab = beta * beta * q.q_ab + (1 - beta * beta) * shaped_relu_kernel(q, L) / shaped_gain(L)
        else:
            raise DomainError(f"no width-limit recursion for architecture {arch!r}")
        q = KernelTriple(q.q_aa, new_ab, q.q_bb)
        qaa[l], qab[l], qbb[l] = q.as_tuple()
    return KernelTrace(qaa, qab, qbb)
