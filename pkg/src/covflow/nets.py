"""Finite-width Monte Carlo forward passes.

Two inputs are propagated through one random network, so every layer's
weights act on both post-activation vectors at once. Weights are never
stored; two engines produce the product ``W @ V`` for the current
``n_in x k`` block of post-activations ``V``:

``dense``
    rows of ``W`` are generated from the counter-based stream in blocks of
    ``block_rows`` and multiplied into ``V`` before being discarded
    (``O(n * block_rows)`` memory, ``O(n^2)`` work per layer).

``projected``
    ``V = Q R`` (thin QR); because ``W`` is independent of ``V`` and has
    rotation-invariant rows, ``W Q`` has i.i.d. Gaussian entries, so
    ``W V`` is drawn as ``sigma * Z @ R`` with ``Z`` of shape ``n x rank``.
    The joint law of every layer is identical to the dense engine at
    ``O(n k)`` work per layer. Only ``R^T R = V^T V`` matters, so one or two
    columns use Gram-Schmidt instead of a LAPACK call. The first two rows of
    ``Z`` for layer ``l`` are stream rows ``2l, 2l + 1`` (so a whole trial is
    drawn in one call); a rare third column reads row ``l`` of a second plane.

Both engines give bitwise identical columns for bitwise identical inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DomainError, InstabilityError
from .scaling import ScalingSequence, UniformPower
from .streams import SALT_DENSE, SALT_DIRECTION, SALT_PROJECTED, GaussianStream, derive_seed
from .theory import InputPair, KernelTrace, shaped_gain

ARCHS = ("scaled_resnet", "mlp", "shaped_mlp", "shaped_resnet")
ENGINES = ("projected", "dense")
INSTABILITY_GUARD = 1e150
# stream rows per layer drawn up front by the projected engine (one per input)
PROJECTED_ROWS = 2


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture, width ``n``, depth ``L`` and input dimension ``d``.

    ``scaling`` is used by ``scaled_resnet`` only; ``beta`` by
    ``shaped_resnet`` only.
    """

    arch: str
    n: int
    L: int
    d: int
    scaling: Optional[ScalingSequence] = None
    beta: float = 0.5
    engine: str = "projected"
    block_rows: int = 64

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise DomainError(f"unknown architecture {self.arch!r}")
        if self.engine not in ENGINES:
            raise DomainError(f"unknown engine {self.engine!r}")
        for name in ("n", "L", "d", "block_rows"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.arch == "scaled_resnet" and self.scaling is None:
            object.__setattr__(self, "scaling", UniformPower(0.5))
        if self.arch == "shaped_resnet" and not (0.0 < self.beta < 1.0):
            raise DomainError("beta must lie in (0, 1)")

    @property
    def weight_var(self) -> float:
        """Hidden-layer weight variance times ``n``."""
        if self.arch == "scaled_resnet":
            return 1.0
        if self.arch == "mlp":
            return 2.0
        # variance-preserving for z + relu(z)/sqrt(L)
        return 1.0 / shaped_gain(self.L)

    def with_size(self, n: int, L: int) -> "NetworkSpec":
        return replace(self, n=n, L=L)

    def describe(self) -> dict:
        out = {"arch": self.arch, "n": self.n, "L": self.L, "d": self.d, "engine": self.engine}
        if self.arch == "scaled_resnet":
            out["scaling"] = self.scaling.to_dict()
        if self.arch == "shaped_resnet":
            out["beta"] = self.beta
        return out


@dataclass
class TrialTrace:
    """One forward pass of a pair through a sampled network.

    ``kernels[l]`` is the empirical triple at layer ``l``; ``first_coord[l]``
    is ``Y_l^1(a)``. The ``aux_*`` fields and ``deviation`` are filled only
    when the auxiliary process is co-propagated.
    """

    spec: NetworkSpec
    seed: int
    kernels: KernelTrace
    first_coord: np.ndarray
    deviation: Optional[np.ndarray] = None
    aux_kernels: Optional[KernelTrace] = None
    aux_first_coord: Optional[np.ndarray] = None
    fallback_events: int = 0
    extras: dict = field(default_factory=dict)

    def final(self):
        return self.kernels[-1]


def apply_activation(arch: str, z, L: int):
    """ReLU, or the shaped ReLU ``z + relu(z)/sqrt(L)`` for the shaped architectures."""
    if arch not in ARCHS:
        raise DomainError(f"unknown architecture {arch!r}")
    if np.ndim(z) == 0:
        r = z if z > 0 else 0.0 * z
        if arch in ("shaped_mlp", "shaped_resnet"):
            return z + r / math.sqrt(L)
        return r
    r = np.maximum(z, 0.0)
    if arch in ("shaped_mlp", "shaped_resnet"):
        return z + r / math.sqrt(L)
    return r


# --------------------------------------------------------------------------
# W @ V engines
# --------------------------------------------------------------------------


def _unique_columns(V: np.ndarray):
    """Indices of the distinct columns of ``V`` and the map back."""
    k = V.shape[1]
    if k == 1:
        return [0], [0]
    if k == 2:
        if np.array_equal(V[:, 0], V[:, 1]):
            return [0], [0, 0]
        return [0, 1], [0, 1]
    keys = {}
    first = []
    back = []
    for j in range(k):
        key = V[:, j].tobytes()
        if key not in keys:
            keys[key] = len(first)
            first.append(j)
        back.append(keys[key])
    return first, back


def _r_factor(V: np.ndarray) -> np.ndarray:
    """Upper-triangular ``R`` with ``R^T R = V^T V``."""
    k = V.shape[1]
    if k == 1:
        return np.array([[math.sqrt(float(V[:, 0] @ V[:, 0]))]])
    if k == 2:
        v1, v2 = V[:, 0], V[:, 1]
        r11 = math.sqrt(float(v1 @ v1))
        if r11 == 0.0:
            return np.array([[0.0, 0.0], [0.0, math.sqrt(float(v2 @ v2))]])
        q1 = v1 / r11
        r12 = float(q1 @ v2)
        w = v2 - r12 * q1
        return np.array([[r11, r12], [0.0, math.sqrt(float(w @ w))]])
    return np.linalg.qr(V, mode="r")


def _dense_product(stream, layer, V, n_out, scale, block_rows):
    n_in = V.shape[0]
    out = np.empty((n_out, V.shape[1]))
    for r0 in range(0, n_out, block_rows):
        nb = min(block_rows, n_out - r0)
        out[r0 : r0 + nb] = stream.block(layer, r0, nb, n_in) @ V
    out *= scale
    return out


def _projected_normals(stream, layer, rank, n_out, slab):
    head = min(rank, PROJECTED_ROWS)
    if slab is None:
        Z = stream.block(0, layer * PROJECTED_ROWS, head, n_out)
    else:
        Z = slab[layer, :head]
    if rank <= PROJECTED_ROWS:
        return Z
    extra = [stream.block(plane, layer, 1, n_out) for plane in range(1, rank - PROJECTED_ROWS + 1)]
    return np.concatenate([Z, *extra])


def _projected_product(stream, layer, V, n_out, scale, slab=None):
    R = _r_factor(V)
    Z = _projected_normals(stream, layer, R.shape[0], n_out, slab)
    return scale * (Z.T @ R)


def projected_slab(stream, L: int, n_out: int) -> np.ndarray:
    """All projected-engine variates for layers ``0..L`` in one draw."""
    return stream.block(0, 0, (L + 1) * PROJECTED_ROWS, n_out).reshape(L + 1, PROJECTED_ROWS, n_out)


def weight_product(stream, layer: int, V: np.ndarray, n_out: int, var: float, engine: str, block_rows: int = 64,
                   slab: Optional[np.ndarray] = None):
    """``W @ V`` for ``W`` with i.i.d. ``N(0, var / n_in)`` entries (layer-keyed).

    ``slab`` optionally holds the output of :func:`projected_slab`.
    """
    first, back = _unique_columns(V)
    U = V[:, first] if len(first) < V.shape[1] else V
    scale = math.sqrt(var / V.shape[0])
    if engine == "dense":
        out = _dense_product(stream, layer, U, n_out, scale, block_rows)
    else:
        out = _projected_product(stream, layer, U, n_out, scale, slab)
    if len(first) == V.shape[1]:
        return out
    return out[:, back]


def _stream_for(spec: NetworkSpec, seed: int) -> GaussianStream:
    return GaussianStream(seed, SALT_DENSE if spec.engine == "dense" else SALT_PROJECTED)


def _guard(layer: int, n: int, qaa: float, qbb: float):
    norm_sq = max(qaa, qbb) * n
    if not (norm_sq <= INSTABILITY_GUARD * INSTABILITY_GUARD):
        raise InstabilityError(layer, math.sqrt(norm_sq) if math.isfinite(norm_sq) else math.inf)


def _setup(spec: NetworkSpec, seed: int):
    stream = _stream_for(spec, seed)
    slab = projected_slab(stream, spec.L, spec.n) if spec.engine == "projected" else None
    return stream, slab


# --------------------------------------------------------------------------
# Simulators
# --------------------------------------------------------------------------


def _record(Y, n, qaa, qab, qbb, first, l):
    ya = Y[:, 0]
    yb = Y[:, 1]
    qaa[l] = (ya @ ya) / n
    qab[l] = (ya @ yb) / n
    qbb[l] = (yb @ yb) / n
    first[l] = ya[0]


def simulate_pair(spec: NetworkSpec, pair: InputPair, seed: int) -> TrialTrace:
    """Propagate ``a`` and ``b`` through one sampled network of shape ``spec``."""
    if pair.d != spec.d:
        raise DomainError(f"pair has dimension {pair.d}, spec expects d={spec.d}")
    n, L = spec.n, spec.L
    stream, slab = _setup(spec, seed)
    X = np.stack([pair.a, pair.b], axis=1)
    Y = weight_product(stream, 0, X, n, 1.0, spec.engine, spec.block_rows, slab)

    qaa, qab, qbb, first = (np.empty(L + 1) for _ in range(4))
    _record(Y, n, qaa, qab, qbb, first, 0)
    arch = spec.arch
    var = spec.weight_var
    alphas = spec.scaling.alpha_row(L) if arch == "scaled_resnet" else None
    inv_sqrt_L = 1.0 / math.sqrt(L)
    beta = spec.beta
    branch = math.sqrt(1.0 - beta * beta)

    for l in range(1, L + 1):
        if arch == "scaled_resnet" or arch == "mlp":
            P = np.maximum(Y, 0.0)
        else:
            P = Y + np.maximum(Y, 0.0) * inv_sqrt_L
        WP = weight_product(stream, l, P, n, var, spec.engine, spec.block_rows, slab)
        if arch == "scaled_resnet":
            Y = Y + alphas[l - 1] * WP
        elif arch == "shaped_resnet":
            Y = beta * Y + branch * WP
        else:
            Y = WP
        _record(Y, n, qaa, qab, qbb, first, l)
        _guard(l, n, qaa[l], qbb[l])

    return TrialTrace(spec, seed, KernelTrace(qaa, qab, qbb), first)


def simulate_with_auxiliary(spec: NetworkSpec, pair: InputPair, seed: int) -> TrialTrace:
    """Co-propagate the network and its Gaussian auxiliary process.

    The auxiliary update for input ``x`` is
    ``Yt_l = Yt_{l-1} + alpha_l * sqrt(q_{l-1}(x) / 2) * G_l(x)`` with
    ``G_l(x) = sqrt(n) W_l u`` and ``u`` the unit post-activation direction
    of the real network (``e / sqrt(n)`` when the post-activation vanishes).
    ``q_{l-1}(x)`` is the closed-form variance profile. Both processes use
    the same weight draws. ``deviation[l] = |Y_l(a) - Yt_l(a)|^2 / n``.
    """
    if spec.arch != "scaled_resnet":
        raise DomainError("the auxiliary process is defined for scaled_resnet only")
    if pair.d != spec.d:
        raise DomainError(f"pair has dimension {pair.d}, spec expects d={spec.d}")
    from .theory import variance_profile

    n, L = spec.n, spec.L
    stream, slab = _setup(spec, seed)
    X = np.stack([pair.a, pair.b], axis=1)
    Y = weight_product(stream, 0, X, n, 1.0, spec.engine, spec.block_rows, slab)
    Yt = Y.copy()

    qaa, qab, qbb, first = (np.empty(L + 1) for _ in range(4))
    taa, tab, tbb, tfirst = (np.empty(L + 1) for _ in range(4))
    dev = np.empty(L + 1)
    _record(Y, n, qaa, qab, qbb, first, 0)
    _record(Yt, n, taa, tab, tbb, tfirst, 0)
    dev[0] = 0.0

    alphas = spec.scaling.alpha_row(L)
    vol = np.sqrt(
        np.stack(
            [variance_profile(spec.scaling, L, pair.q0.q_aa), variance_profile(spec.scaling, L, pair.q0.q_bb)],
            axis=1,
        )
        / 2.0
    )
    e_unit = np.full(n, 1.0 / math.sqrt(n))
    sqrt_n = math.sqrt(n)
    fallbacks = 0

    for l in range(1, L + 1):
        P = np.maximum(Y, 0.0)
        norms = np.sqrt(np.sum(P * P, axis=0))
        dead = norms == 0.0
        V = np.column_stack([P, e_unit]) if dead.any() else P
        WV = weight_product(stream, l, V, n, 1.0, spec.engine, spec.block_rows, slab)
        G = np.empty((n, 2))
        for j in range(2):
            if dead[j]:
                fallbacks += 1
                G[:, j] = sqrt_n * WV[:, 2]
            else:
                G[:, j] = sqrt_n * WV[:, j] / norms[j]
        a_l = alphas[l - 1]
        Y = Y + a_l * WV[:, :2]
        Yt = Yt + a_l * vol[l - 1] * G
        _record(Y, n, qaa, qab, qbb, first, l)
        _guard(l, n, qaa[l], qbb[l])
        _record(Yt, n, taa, tab, tbb, tfirst, l)
        diff = Y[:, 0] - Yt[:, 0]
        dev[l] = (diff @ diff) / n

    return TrialTrace(
        spec,
        seed,
        KernelTrace(qaa, qab, qbb),
        first,
        deviation=dev,
        aux_kernels=KernelTrace(taa, tab, tbb),
        aux_first_coord=tfirst,
        fallback_events=fallbacks,
    )


# --------------------------------------------------------------------------
# Generator self-test
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectionTestReport:
    n: int
    trials: int
    mean: float
    variance: float
    fourth_moment: float
    coord_mean_range: tuple
    coord_var_range: tuple


def gaussian_direction_test(n: int, trials: int, seed: int, block_rows: int = 64) -> DirectionTestReport:
    """Sample ``W v`` for standard ``W`` (dense stream) and random unit ``v``.

    Returns moments pooled over all coordinates and trials, plus the spread
    of per-coordinate means and variances.
    """
    if n < 8:
        raise DomainError("n must be >= 8")
    if trials < 2:
        raise DomainError("trials must be >= 2")
    s1 = np.zeros(n)
    s2 = np.zeros(n)
    s4 = 0.0
    for t in range(trials):
        tseed = derive_seed(seed, t)
        v = GaussianStream(tseed, SALT_DIRECTION).block(0, 0, 1, n)[0]
        v /= np.linalg.norm(v)
        stream = GaussianStream(tseed, SALT_DENSE)
        wv = _dense_product(stream, 1, v[:, None], n, 1.0, block_rows)[:, 0]
        s1 += wv
        s2 += wv * wv
        s4 += float(np.sum(wv**4))
    total = n * trials
    coord_mean = s1 / trials
    coord_var = s2 / trials - coord_mean**2
    mean = float(s1.sum() / total)
    var = float(s2.sum() / total - mean**2)
    return DirectionTestReport(
        n=n,
        trials=trials,
        mean=mean,
        variance=var,
        fourth_moment=s4 / total,
        coord_mean_range=(float(coord_mean.min()), float(coord_mean.max())),
        coord_var_range=(float(coord_var.min()), float(coord_var.max())),
    )
