"""Residual-branch scaling sequences.

A scaling sequence is a triangular array ``alpha[l, L]`` (``1 <= l <= L``)
giving the multiplier of residual block ``l`` in a network of depth ``L``.
Three families are supported:

* :class:`UniformPower` -- ``alpha[l, L] = L ** -gamma``;
* :class:`SeriesTruncation` -- ``alpha[l, L] = zeta[l]`` for a fixed
  square-summable series (:class:`InversePower`, :class:`LogDamped`,
  :class:`Explicit`);
* :class:`Custom` -- an explicit table of rows, or an arbitrary rule.

Everything here is a pure function of an immutable description.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, LayerRangeError

ANALYTIC_TOL = 1e-12
TABLE_TOL = 1e-9


def cumulative_energy(alpha_sq: Sequence[float]) -> np.ndarray:
    """Neumaier-compensated prefix sums ``[0, a1, a1 + a2, ...]``.

    The accumulation order is fixed (left to right), so the result is
    bitwise reproducible and ``out[-1]`` agrees with a one-shot sum of the
    same terms to within one rounding.
    """
    out = np.empty(len(alpha_sq) + 1)
    out[0] = 0.0
    total = 0.0
    comp = 0.0
    for i, x in enumerate(alpha_sq, start=1):
        x = float(x)
        t = total + x
        if abs(total) >= abs(x):
            comp += (total - t) + x
        else:
            comp += (x - t) + total
        total = t
        out[i] = total + comp
    return out


# --------------------------------------------------------------------------
# Series
# --------------------------------------------------------------------------


class SeriesSpec:
    """A fixed series ``zeta[1], zeta[2], ...`` of non-negative reals."""

    def term(self, l: int) -> float:
        raise NotImplementedError

    def term_sq(self, l: int) -> float:
        return self.term(l) ** 2

    @property
    def summable(self) -> bool:
        """Whether ``sum(zeta[l] ** 2)`` is finite."""
        return True

    def tail_sq(self, L: int) -> float:
        """Upper bound on ``sum_{l > L} zeta[l] ** 2``."""
        raise NotImplementedError

    def total_sq(self) -> Optional[float]:
        """Closed form of ``sum_l zeta[l] ** 2`` when one is known."""
        return None

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class InversePower(SeriesSpec):
    """``zeta[l] = l ** -p``; square-summable iff ``p > 1/2``."""

    p: float = 1.0

    def __post_init__(self):
        if not (isinstance(self.p, (int, float)) and math.isfinite(self.p) and self.p > 0):
            raise DomainError(f"p must be a positive real, got {self.p!r}")

    def term(self, l: int) -> float:
        return float(l) ** -self.p

    def term_sq(self, l: int) -> float:
        if self.p == 1.0:
            return 1.0 / (float(l) * float(l))
        return float(l) ** (-2.0 * self.p)

    @property
    def summable(self) -> bool:
        return self.p > 0.5

    def tail_sq(self, L: int) -> float:
        if not self.summable:
            return math.inf
        # integral comparison for a decreasing summand
        if L < 1:
            return 1.0 + 1.0 / (2.0 * self.p - 1.0)
        return float(L) ** (1.0 - 2.0 * self.p) / (2.0 * self.p - 1.0)

    def total_sq(self) -> Optional[float]:
        if self.p == 1.0:
            return math.pi**2 / 6.0
        return None

    def to_dict(self) -> dict:
        return {"series": "inverse_power", "p": float(self.p)}


@dataclass(frozen=True)
class LogDamped(SeriesSpec):
    """``zeta[l] = (l * log(l + 1) ** 2) ** -1/2``."""

    def term(self, l: int) -> float:
        return 1.0 / math.sqrt(self.term_sq_raw(l))

    @staticmethod
    def term_sq_raw(l: int) -> float:
        lg = math.log(l + 1.0)
        return l * lg * lg

    def term_sq(self, l: int) -> float:
        return 1.0 / self.term_sq_raw(l)

    def tail_sq(self, L: int) -> float:
        # sum_{l>L} 1/(l log^2(l+1)) <= int_L^inf dx/(x log^2 x) = 1/log L
        if L < 2:
            return self.tail_sq(2) + sum(self.term_sq(k) for k in range(L + 1, 3))
        return 1.0 / math.log(L)

    def to_dict(self) -> dict:
        return {"series": "log_damped"}


@dataclass(frozen=True)
class Explicit(SeriesSpec):
    """Finitely many explicit terms; ``zeta[l] = 0`` past the end."""

    values: tuple = ()

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        for v in vals:
            if not (math.isfinite(v) and v >= 0):
                raise DomainError(f"series values must be finite and non-negative, got {v!r}")
        object.__setattr__(self, "values", vals)

    def term(self, l: int) -> float:
        return self.values[l - 1] if l <= len(self.values) else 0.0

    def tail_sq(self, L: int) -> float:
        return math.fsum(v * v for v in self.values[L:])

    def total_sq(self) -> float:
        return math.fsum(v * v for v in self.values)

    def to_dict(self) -> dict:
        return {"series": "explicit", "values": list(self.values)}


# --------------------------------------------------------------------------
# Sequences
# --------------------------------------------------------------------------


class ScalingSequence:
    """Base class; subclasses implement :meth:`alpha_sq`."""

    #: normalization tolerance used when the caller does not supply one
    default_tol = ANALYTIC_TOL

    def alpha(self, l: int, L: int) -> float:
        return math.sqrt(self.alpha_sq(l, L))

    def alpha_sq(self, l: int, L: int) -> float:
        raise NotImplementedError

    def alpha_sq_row(self, L: int) -> np.ndarray:
        """``[alpha_sq(1, L), ..., alpha_sq(L, L)]``."""
        return np.array([self.alpha_sq(l, L) for l in range(1, L + 1)], dtype=float)

    def alpha_row(self, L: int) -> np.ndarray:
        return np.array([self.alpha(l, L) for l in range(1, L + 1)], dtype=float)

    def time_grid(self, L: int) -> np.ndarray:
        """Partial energies ``t_0 = 0, t_1, ..., t_L`` at depth ``L``."""
        return cumulative_energy(self.alpha_sq_row(L))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class UniformPower(ScalingSequence):
    """``alpha[l, L] = L ** -gamma``; normalized when ``gamma = 1/2``."""

    gamma: float = 0.5

    def __post_init__(self):
        if not (isinstance(self.gamma, (int, float)) and math.isfinite(self.gamma) and self.gamma > 0):
            raise DomainError(f"gamma must be a positive real, got {self.gamma!r}")

    def alpha(self, l: int, L: int) -> float:
        return float(L) ** -self.gamma

    def alpha_sq(self, l: int, L: int) -> float:
        if self.gamma == 0.5:
            return 1.0 / L
        return float(L) ** (-2.0 * self.gamma)

    def alpha_sq_row(self, L: int) -> np.ndarray:
        return np.full(L, self.alpha_sq(1, L))

    def alpha_row(self, L: int) -> np.ndarray:
        return np.full(L, self.alpha(1, L))

    def time_grid(self, L: int) -> np.ndarray:
        # closed form keeps t_L == 1 exactly for gamma = 1/2
        ls = np.arange(L + 1, dtype=float)
        if self.gamma == 0.5:
            return ls / L
        return ls * float(L) ** (-2.0 * self.gamma)

    def to_dict(self) -> dict:
        return {"kind": "uniform", "gamma": float(self.gamma)}


@dataclass(frozen=True)
class SeriesTruncation(ScalingSequence):
    """``alpha[l, L] = zeta[l]`` independent of depth."""

    series: SeriesSpec = field(default_factory=InversePower)

    def alpha(self, l: int, L: int) -> float:
        return self.series.term(l)

    def alpha_sq(self, l: int, L: int) -> float:
        return self.series.term_sq(l)

    def to_dict(self) -> dict:
        return {"kind": "series", **self.series.to_dict()}


@dataclass(frozen=True)
class Custom(ScalingSequence):
    """User-supplied factors.

    ``rows`` maps a depth ``L`` to its ``L`` factors; ``rule`` is an
    arbitrary callable ``(l, L) -> alpha``. Exactly one must be given.
    Rule-based sequences cannot be serialized.
    """

    rows: Optional[Mapping[int, tuple]] = None
    rule: Optional[Callable[[int, int], float]] = None
    default_tol = TABLE_TOL

    def __post_init__(self):
        if (self.rows is None) == (self.rule is None):
            raise DomainError("custom sequence needs exactly one of rows or rule")
        if self.rows is not None:
            clean = {}
            for L, row in self.rows.items():
                row = tuple(float(x) for x in row)
                if len(row) != int(L):
                    raise DomainError(f"row for depth {L} has {len(row)} entries")
                if any(not (math.isfinite(x) and x >= 0) for x in row):
                    raise DomainError(f"row for depth {L} has a negative or non-finite entry")
                clean[int(L)] = row
            object.__setattr__(self, "rows", clean)

    @classmethod
    def from_table(cls, table) -> "Custom":
        """Accepts one flat row (its length is the depth) or a list of rows."""
        table = list(table)
        if table and all(isinstance(r, (list, tuple)) for r in table):
            return cls(rows={len(r): tuple(r) for r in table})
        return cls(rows={len(table): tuple(table)})

    def depths(self):
        return sorted(self.rows) if self.rows is not None else None

    def alpha(self, l: int, L: int) -> float:
        if self.rows is not None:
            if L not in self.rows:
                raise LayerRangeError(f"custom table has no row for depth {L}")
            return self.rows[L][l - 1]
        value = float(self.rule(l, L))
        if not (math.isfinite(value) and value >= 0):
            raise DomainError(f"custom rule returned {value!r} at (l={l}, L={L})")
        return value

    def alpha_sq(self, l: int, L: int) -> float:
        a = self.alpha(l, L)
        return a * a

    def to_dict(self) -> dict:
        if self.rows is None:
            raise DomainError("rule-based custom sequences cannot be serialized")
        table = [list(self.rows[L]) for L in sorted(self.rows)]
        if len(table) == 1:
            table = table[0]
        return {"kind": "custom", "table": table}


Scaling = Union[UniformPower, SeriesTruncation, Custom]


def sequence_from_dict(desc: Mapping) -> ScalingSequence:
    """Inverse of ``seq.to_dict()``. Raises ``DomainError`` naming the bad key."""
    if not isinstance(desc, Mapping):
        raise DomainError("scaling description must be a mapping")
    kind = desc.get("kind")
    allowed = {
        "uniform": {"kind", "gamma"},
        "series": {"kind", "series", "p", "values"},
        "custom": {"kind", "table"},
    }
    if kind not in allowed:
        raise DomainError(f"kind: unknown scaling kind {kind!r}")
    extra = set(desc) - allowed[kind]
    if extra:
        raise DomainError(f"{sorted(extra)[0]}: unexpected key for {kind} scaling")
    if kind == "uniform":
        gamma = desc.get("gamma", 0.5)
        if isinstance(gamma, bool) or not isinstance(gamma, (int, float)) or not gamma > 0:
            raise DomainError(f"gamma: must be a positive real, got {gamma!r}")
        return UniformPower(float(gamma))
    if kind == "series":
        name = desc.get("series")
        if name == "inverse_power":
            p = desc.get("p", 1.0)
            if isinstance(p, bool) or not isinstance(p, (int, float)) or not p > 0:
                raise DomainError(f"p: must be a positive real, got {p!r}")
            return SeriesTruncation(InversePower(float(p)))
        if name == "log_damped":
            return SeriesTruncation(LogDamped())
        if name == "explicit":
            values = desc.get("values")
            if not isinstance(values, (list, tuple)):
                raise DomainError("values: explicit series needs a list")
            return SeriesTruncation(Explicit(tuple(values)))
        raise DomainError(f"series: unknown series {name!r}")
    table = desc.get("table")
    if not isinstance(table, (list, tuple)) or not table:
        raise DomainError("table: custom scaling needs a non-empty list")
    return Custom.from_table(table)


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def _check_layer(l: int, L: int, lo: int = 1) -> None:
    if L < 1 or not (lo <= l <= L):
        raise LayerRangeError(f"layer index {l} outside [{lo}, {L}]")


def alpha_at(seq: ScalingSequence, l: int, L: int) -> float:
    """The factor ``alpha[l, L]``."""
    _check_layer(l, L)
    return seq.alpha(l, L)


def partial_energy(seq: ScalingSequence, l: int, L: int) -> float:
    """``sum_{k <= l} alpha[k, L] ** 2`` (0 for ``l = 0``)."""
    _check_layer(l, L, lo=0)
    if isinstance(seq, UniformPower):
        return float(seq.time_grid(L)[l])
    if isinstance(seq, SeriesTruncation):
        # depth-independent; summing only l terms keeps huge L cheap
        return float(cumulative_energy([seq.alpha_sq(k, L) for k in range(1, l + 1)])[-1])
    return float(seq.time_grid(L)[l])


@dataclass(frozen=True)
class StabilityReport:
    """Stability summary of a sequence at depth ``L``.

    ``s_norm_sq`` is a lower bound on the squared S-norm obtained by scanning
    depths up to ``L_scan``; ``s_norm_sq_upper`` adds an analytic tail bound
    when one is available (``None`` otherwise, ``inf`` for unstable
    sequences).
    """

    L: int
    L_scan: int
    s_norm_sq: float
    s_norm_sq_upper: Optional[float]
    h_L: float
    energy: float
    is_normalized: bool
    tail_sq: Optional[float]
    energy_profile: dict


def _scan_energy(seq: ScalingSequence, L_scan: int) -> tuple:
    """Largest total energy over depths ``1..L_scan`` and an upper bound on the sup."""
    if isinstance(seq, UniformPower):
        # total at depth L' is L' ** (1 - 2 gamma)
        if seq.gamma >= 0.5:
            return 1.0, 1.0
        return float(L_scan) ** (1.0 - 2.0 * seq.gamma), math.inf
    if isinstance(seq, SeriesTruncation):
        series = seq.series
        if isinstance(series, Explicit):
            head = [v * v for v in series.values[:L_scan]]
            return float(cumulative_energy(head)[-1]), series.total_sq()
        lower = partial_energy(seq, L_scan, L_scan)
        upper = lower + series.tail_sq(L_scan) if series.summable else math.inf
        return lower, upper
    depths = seq.depths()
    if depths is not None:
        totals = [seq.time_grid(L)[-1] for L in depths if L <= L_scan]
        return (max(totals) if totals else 0.0), None
    return max(seq.time_grid(L)[-1] for L in range(1, L_scan + 1)), None


def stability_report(
    seq: ScalingSequence,
    L: int,
    L_scan: Optional[int] = None,
    tol: Optional[float] = None,
    profile_points: int = 11,
) -> StabilityReport:
    if L < 1:
        raise LayerRangeError(f"depth must be >= 1, got {L}")
    L_scan = L if L_scan is None else L_scan
    if L_scan < L:
        raise DomainError("L_scan must be >= L")
    tol = seq.default_tol if tol is None else tol
    if tol <= 0:
        raise DomainError("tol must be positive")

    row = seq.alpha_sq_row(L)
    grid = seq.time_grid(L)
    energy = float(grid[-1])
    lower, upper = _scan_energy(seq, L_scan)
    lower = max(lower, energy)
    if upper is not None and upper is not math.inf:
        upper = max(upper, lower)

    tail = None
    if isinstance(seq, SeriesTruncation):
        tail = seq.series.tail_sq(L)

    profile = {}
    for t in np.linspace(0.0, 1.0, profile_points):
        profile[float(t)] = float(grid[int(math.floor(t * L + 1e-12))])

    return StabilityReport(
        L=L,
        L_scan=L_scan,
        s_norm_sq=float(lower),
        s_norm_sq_upper=upper,
        h_L=float(row.max()),
        energy=energy,
        is_normalized=abs(energy - 1.0) <= tol,
        tail_sq=tail,
        energy_profile=profile,
    )


def is_normalized(seq: ScalingSequence, L: int, tol: Optional[float] = None) -> bool:
    tol = seq.default_tol if tol is None else tol
    return abs(seq.time_grid(L)[-1] - 1.0) <= tol


def depth_error_functional(seq: ScalingSequence, L: int, r_L: float, tol: Optional[float] = None) -> float:
    """Depth part of the error bound, ``h_L + L * h_L**2 + r_L``.

    Only defined on normalized sequences; ``r_L`` (the rate at which the
    partial energies approach their limit profile) is supplied by the caller.
    """
    if r_L < 0:
        raise DomainError("r_L must be non-negative")
    if not is_normalized(seq, L, tol):
        raise DomainError(f"sequence is not normalized at depth {L}")
    h = float(seq.alpha_sq_row(L).max())
    return h + L * h * h + r_L
