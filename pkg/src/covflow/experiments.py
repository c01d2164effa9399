"""Monte Carlo studies and convergence-rate fits.

Trials are indexed ``0 .. trials-1``; trial ``i`` uses the seed
``derive_seed(master_seed, i)`` in every grid cell. Results are always
reduced in trial-index order, so statistics do not depend on the number of
worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DomainError, InstabilityError
from .nets import NetworkSpec, simulate_pair, simulate_with_auxiliary
from .scaling import SeriesTruncation, UniformPower, is_normalized
from .streams import derive_seed
from .theory import (
    InputPair,
    covariance_flow,
    infinite_width_trace,
    series_limit_kernel,
    width_limit_trace,
)

GRID_COLUMNS = ("n", "L", "trials", "mean_q", "std_q", "l2_error", "theory_q")
DEPTH_COLUMNS = ("L", "q_inf_width", "q_flow", "delta")
JOINT_COLUMNS = (
    "arch", "n", "L", "trials", "mean_q", "std_q", "se_q",
    "q05", "q25", "q50", "q75", "q95", "reference_q", "reference_kind", "reference_only",
)


# --------------------------------------------------------------------------
# Trial execution
# --------------------------------------------------------------------------


def _run_chunk(spec, pair, seeds, auxiliary):
    sim = simulate_with_auxiliary if auxiliary else simulate_pair
    return [sim(spec, pair, s) for s in seeds]


def run_trials(spec: NetworkSpec, pair: InputPair, master_seed: int, trials: int,
               workers: int = 1, auxiliary: bool = False):
    """Simulate ``trials`` networks; the returned list is in trial-index order."""
    seeds = [derive_seed(master_seed, i) for i in range(trials)]
    if workers <= 1 or trials < 2:
        return _run_chunk(spec, pair, seeds, auxiliary)
    size = -(-trials // workers)
    chunks = [seeds[i : i + size] for i in range(0, trials, size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_chunk, spec, pair, c, auxiliary) for c in chunks]
        out = []
        for fut in futures:
            out.extend(fut.result())
    return out


def final_q_ab(traces) -> np.ndarray:
    return np.array([t.kernels.q_ab[-1] for t in traces])


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------


def nearest_rank(sorted_values: np.ndarray, p: float) -> float:
    """Nearest-rank quantile of already sorted data."""
    n = len(sorted_values)
    if p <= 0:
        return float(sorted_values[0])
    rank = max(1, math.ceil(p * n))
    return float(sorted_values[min(rank, n) - 1])


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through ``(log x, log y)``."""

    xs: tuple
    ys: tuple
    slope: float
    intercept: float
    r_squared: float


def fit_rate(xs: Sequence[float], ys: Sequence[float], drop_fraction: float = 0.2) -> RateFit:
    """Log-log slope, discarding the smallest ``drop_fraction`` of the x-values.

    At least three points are always kept.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.size < 3:
        raise DomainError("a rate fit needs at least 3 points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise DomainError("rate fit needs positive values")
    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], ys[order]
    drop = min(int(math.floor(drop_fraction * xs.size)), xs.size - 3)
    xs, ys = xs[drop:], ys[drop:]
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(tuple(xs.tolist()), tuple(ys.tolist()), float(slope), float(intercept), r2)


# --------------------------------------------------------------------------
# Theoretical references
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Reference:
    value: float
    kind: str
    depth_dependent: bool


def theory_reference(spec: NetworkSpec, pair: InputPair, step: float = 1e-5, tol: float = 1e-8) -> Reference:
    """Limit kernel the final-layer covariance of ``spec`` should approach.

    Normalized scalings use the flow at ``t = 1``; series truncations use the
    series limit. Other scaled ResNets fall back to the infinite-width value
    at the same depth, and the MLP-style architectures to their width-first
    recursion (reference only: their finite networks need not converge to it).
    """
    if spec.arch == "scaled_resnet":
        seq = spec.scaling
        if isinstance(seq, SeriesTruncation):
            return Reference(series_limit_kernel(seq.series, pair, tol).q_ab, "series_limit", False)
        if isinstance(seq, UniformPower) and seq.gamma == 0.5:
            return Reference(covariance_flow(pair, step).final().q_ab, "flow", False)
        if is_normalized(seq, spec.L):
            return Reference(covariance_flow(pair, step).final().q_ab, "flow", False)
        return Reference(infinite_width_trace(seq, spec.L, pair).q_ab[-1], "infinite_width", True)
    trace = width_limit_trace(spec.arch, spec.L, pair, beta=spec.beta)
    return Reference(float(trace.q_ab[-1]), "width_first_recursion", True)


class _ReferenceCache:
    def __init__(self, pair, step, tol):
        self.pair, self.step, self.tol = pair, step, tol
        self._cache = {}

    def __call__(self, spec: NetworkSpec) -> Reference:
        key = (spec.arch, spec.beta, repr(spec.scaling))
        ref = self._cache.get(key)
        if ref is None or ref.depth_dependent:
            ref = theory_reference(spec, self.pair, self.step, self.tol)
            if not ref.depth_dependent:
                self._cache[key] = ref
        return ref


# --------------------------------------------------------------------------
# Studies
# --------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: List[dict]
    manifest: dict = field(default_factory=dict)

    columns = GRID_COLUMNS

    def table(self):
        return [[r[c] for c in self.columns] for r in self.rows]

    def row(self, n, L) -> dict:
        for r in self.rows:
            if r["n"] == n and r["L"] == L:
                return r
        raise KeyError((n, L))


def _cell_stats(qs: np.ndarray, theory: float) -> dict:
    trials = qs.size
    std = float(np.std(qs, ddof=1)) if trials > 1 else float("nan")
    return {
        "trials": trials,
        "mean_q": float(np.mean(qs)),
        "std_q": std,
        "l2_error": float(np.sqrt(np.mean((qs - theory) ** 2))),
        "theory_q": float(theory),
    }


def _simulate_cell(spec, pair, seed, trials, workers):
    try:
        return run_trials(spec, pair, seed, trials, workers)
    except InstabilityError as exc:
        raise exc.with_context(n=spec.n, L=spec.L, arch=spec.arch) from None


def grid_study(template: NetworkSpec, n_list, L_list, trials: int, seed: int, pair: InputPair,
               workers: int = 1, step: float = 1e-5, tol: float = 1e-8) -> SweepResult:
    """Final-layer covariance statistics on the grid ``n_list x L_list``."""
    if trials < 2:
        raise DomainError("grid_study needs trials >= 2")
    refs = _ReferenceCache(pair, step, tol)
    rows = []
    for n in n_list:
        for L in L_list:
            spec = template.with_size(int(n), int(L))
            ref = refs(spec)
            qs = final_q_ab(_simulate_cell(spec, pair, seed, trials, workers))
            rows.append({"n": int(n), "L": int(L), **_cell_stats(qs, ref.value)})
    manifest = {
        "study": "grid",
        "spec": template.describe(),
        "n_list": [int(n) for n in n_list],
        "L_list": [int(L) for L in L_list],
        "trials": trials,
        "master_seed": seed,
        "pair": pair.describe(),
    }
    return SweepResult(rows, manifest)


@dataclass
class RateStudy:
    rows: List[dict]
    columns: tuple
    fit: Optional[RateFit]
    fit_error: Optional[str] = None
    manifest: dict = field(default_factory=dict)

    def table(self):
        return [[r[c] for c in self.columns] for r in self.rows]


def _try_fit(xs, ys, drop_fraction):
    try:
        return fit_rate(xs, ys, drop_fraction), None
    except DomainError as exc:
        return None, str(exc)


def depth_rate_study(L_list, pair: InputPair, step: float = 1e-5, drop_fraction: float = 0.2) -> RateStudy:
    """``Delta_L = |q_{L,inf} - q_{t=1}|`` for uniform ``L^-1/2`` scaling, plus its log-log slope."""
    L_list = [int(L) for L in L_list]
    if L_list != sorted(L_list):
        raise DomainError("L_list must be ascending")
    seq = UniformPower(0.5)
    q_flow = covariance_flow(pair, step).final().q_ab
    rows = []
    for L in L_list:
        q_L = float(infinite_width_trace(seq, L, pair).q_ab[-1])
        rows.append({"L": L, "q_inf_width": q_L, "q_flow": q_flow, "delta": abs(q_L - q_flow)})
    fit, err = _try_fit(L_list, [r["delta"] for r in rows], drop_fraction)
    manifest = {"study": "depth-rate", "L_list": L_list, "step": step, "pair": pair.describe()}
    return RateStudy(rows, DEPTH_COLUMNS, fit, err, manifest)


def width_rate_study(template: NetworkSpec, n_list, L: int, trials: int, seed: int, pair: InputPair,
                     workers: int = 1, step: float = 1e-5, tol: float = 1e-8,
                     drop_fraction: float = 0.2) -> RateStudy:
    """L2 error of the final covariance against its limit as the width grows."""
    sweep = grid_study(template, n_list, [L], trials, seed, pair, workers, step, tol)
    fit, err = _try_fit([r["n"] for r in sweep.rows], [r["l2_error"] for r in sweep.rows], drop_fraction)
    manifest = {**sweep.manifest, "study": "width-rate"}
    return RateStudy(sweep.rows, GRID_COLUMNS, fit, err, manifest)


JOINT_ARCHS = ("scaled_resnet", "shaped_mlp", "shaped_resnet")


def joint_diagonal_study(n_list, arch_list, trials: int, seed: int, pair: InputPair, workers: int = 1,
                         step: float = 1e-5, beta: float = 0.5) -> RateStudy:
    """Distribution of the final covariance in the proportional regime ``L = n``.

    ``arch_list`` holds architecture names or :class:`NetworkSpec` templates.
    """
    rows = []
    for arch in arch_list:
        if isinstance(arch, NetworkSpec):
            template = arch
        else:
            if arch not in JOINT_ARCHS:
                raise DomainError(f"joint study does not support {arch!r}")
            template = NetworkSpec(arch, 1, 1, pair.d, beta=beta)
        for n in n_list:
            n = int(n)
            spec = template.with_size(n, n)
            ref = theory_reference(spec, pair, step)
            qs = final_q_ab(_simulate_cell(spec, pair, seed, trials, workers))
            srt = np.sort(qs)
            std = float(np.std(qs, ddof=1))
            rows.append({
                "arch": spec.arch,
                "n": n,
                "L": n,
                "trials": trials,
                "mean_q": float(np.mean(qs)),
                "std_q": std,
                "se_q": std / math.sqrt(trials),
                "q05": nearest_rank(srt, 0.05),
                "q25": nearest_rank(srt, 0.25),
                "q50": nearest_rank(srt, 0.50),
                "q75": nearest_rank(srt, 0.75),
                "q95": nearest_rank(srt, 0.95),
                "reference_q": ref.value,
                "reference_kind": ref.kind,
                "reference_only": ref.kind == "width_first_recursion",
            })
    manifest = {
        "study": "joint",
        "n_list": [int(n) for n in n_list],
        "archs": [a.describe() if isinstance(a, NetworkSpec) else a for a in arch_list],
        "trials": trials,
        "master_seed": seed,
        "pair": pair.describe(),
    }
    return RateStudy(rows, JOINT_COLUMNS, None, None, manifest)


def layer_profile_study(spec: NetworkSpec, pair: InputPair, trials: int, seed: int, workers: int = 1,
                        auxiliary: bool = False):
    """Per-layer mean/std of the empirical kernel against the infinite-width recursion."""
    traces = run_trials(spec, pair, seed, trials, workers, auxiliary)
    q_ab = np.stack([t.kernels.q_ab for t in traces])
    q_aa = np.stack([t.kernels.q_aa for t in traces])
    first_sq = np.stack([t.first_coord for t in traces]) ** 2
    if spec.arch == "scaled_resnet":
        theory = infinite_width_trace(spec.scaling, spec.L, pair)
        t_grid = spec.scaling.time_grid(spec.L)
    else:
        theory = width_limit_trace(spec.arch, spec.L, pair, beta=spec.beta)
        t_grid = np.arange(spec.L + 1) / spec.L
    rows = []
    dev = np.stack([t.deviation for t in traces]) if auxiliary else None
    for l in range(spec.L + 1):
        row = {
            "layer": l,
            "t": float(t_grid[l]),
            "mean_q_aa": float(q_aa[:, l].mean()),
            "mean_q_ab": float(q_ab[:, l].mean()),
            "std_q_ab": float(q_ab[:, l].std(ddof=1)) if trials > 1 else float("nan"),
            "mean_first_sq": float(first_sq[:, l].mean()),
            "se_first_sq": float(first_sq[:, l].std(ddof=1) / math.sqrt(trials)) if trials > 1 else float("nan"),
            "theory_q_aa": float(theory.q_aa[l]),
            "theory_q_ab": float(theory.q_ab[l]),
        }
        if auxiliary:
            row["mean_deviation"] = float(dev[:, l].mean())
        rows.append(row)
    return rows
