"""Linear frequencies of the four model families, equivalence classes, metric tests.

Every model exposes the same small surface used downstream:

* ``omega_array(js)``: float frequencies for an array of sites (fast path);
* ``class_key(j)``: an exact hashable value with ``omega_i == omega_j`` iff keys agree;
* ``omega(model, j)``: a :class:`FrequencyValue` with exact data where available.

Sqrt-type models (beam, hydrodynamic, plane wave) are strictly increasing
functions of ``|j|_g^2``, so their classes are decided on that exact quantity.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import mpmath
import numpy as np

from .lattice import Box, Metric, QuadScalar, get_box

WORK_DPS = 40


def _q(x) -> QuadScalar:
    return QuadScalar.coerce(x)


def _euclid(j) -> float:
    return math.sqrt(sum(int(x) * int(x) for x in j))


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class Potential:
    """Fourier multipliers ``V_k`` of a convolution potential (rational values)."""

    coefficients: dict = field(default_factory=dict)
    n: int = 0
    truncation: int = 0

    def __post_init__(self):
        clean = {}
        for k, v in self.coefficients.items():
            v = Fraction(v)
            if v:
                clean[tuple(int(x) for x in k)] = v
        object.__setattr__(self, "coefficients", clean)
        for k, v in clean.items():
            if not _decay_ok(v, k, self.n):
                raise ValueError(f"potential coefficient at {k} violates the decay bound")

    def value(self, k) -> Fraction:
        return self.coefficients.get(tuple(int(x) for x in k), Fraction(0))

    def array(self, sites: np.ndarray) -> np.ndarray:
        return np.array([float(self.value(s)) for s in sites])

    def to_json(self) -> dict:
        items = sorted(self.coefficients.items())
        return {"n": self.n, "truncation": self.truncation,
                "coefficients": [[list(k), f"{v.numerator}/{v.denominator}"] for k, v in items]}

    @classmethod
    def from_json(cls, obj) -> "Potential":
        coeffs = {tuple(k): Fraction(v) for k, v in obj["coefficients"]}
        return cls(coeffs, int(obj["n"]), int(obj["truncation"]))

    def __hash__(self):
        return hash((tuple(sorted(self.coefficients.items())), self.n, self.truncation))


def _decay_ok(v: Fraction, k, n: int) -> bool:
    with mpmath.workdps(WORK_DPS):
        w = (1 + mpmath.sqrt(sum(int(x) * int(x) for x in k))) ** n
        return abs(mpmath.mpf(v.numerator) / v.denominator) * w <= mpmath.mpf(1) / 2


def sample_potential(seed: int, n: int, N: int, d: int = 2) -> Potential:
    """Independent uniform draws with ``V_k (1+|k|)^n`` in [-1/2, 1/2], dyadic with 2^-53 grid."""
    rng = np.random.default_rng(seed)
    box = get_box(d, N)
    scale = 2 ** 53
    draws = rng.integers(-(2 ** 52), 2 ** 52, size=box.n, endpoint=True)
    coeffs = {}
    for k, m in zip(box._tuples, draws):
        weight = (1.0 + _euclid(k)) ** n
        # shrink by a few ulps so float rounding cannot break the bound
        num = int(math.trunc(int(m) / weight * (1 - 4e-16)))
        if num:
            coeffs[k] = Fraction(num, scale)
    return Potential(coeffs, n, N)


# ---------------------------------------------------------------------------
# models


class FrequencyModel:
    kind = "abstract"
    sqrt_type = False
    excludes_zero = False

    @property
    def metric(self) -> Metric:
        raise NotImplementedError

    @property
    def d(self) -> int:
        return self.metric.d

    def omega_array(self, js) -> np.ndarray:
        raise NotImplementedError

    def class_key(self, j):
        raise NotImplementedError

    def class_keys(self, sites: np.ndarray) -> list:
        return [self.class_key(s) for s in sites]

    def omega_mp(self, j) -> mpmath.mpf:
        raise NotImplementedError

    def check_site(self, j):
        if len(j) != self.d:
            raise ValueError(f"site {tuple(j)} has the wrong dimension")
        if self.excludes_zero and not any(j):
            raise ValueError(f"{self.kind} frequencies are undefined at the zero mode")

    def sites(self, N: int) -> np.ndarray:
        s = get_box(self.d, N).sites
        if self.excludes_zero:
            s = s[np.any(s != 0, axis=1)]
        return s


@dataclass(frozen=True, eq=False)
class NLSModel(FrequencyModel):
    """``omega_j = |j|_g^2 + V_j``."""

    g: Metric
    V: Potential = field(default_factory=Potential)
    kind = "nls"

    @property
    def metric(self):
        return self.g

    def exact_omega(self, j) -> QuadScalar:
        return self.g.quad_norm_sq(j) + QuadScalar(self.V.value(j))

    def omega_array(self, js):
        js = np.asarray(js)
        return self.g.norm_sq_array(js) + self.V.array(js)

    def class_key(self, j):
        return self.exact_omega(j)

    def class_keys(self, sites):
        L, _, _ = self.g.integer_form()
        pairs = self.g.exact_norm_pairs(sites)
        out = []
        for (a, b), s in zip(pairs, sites):
            v = self.V.value(s)
            out.append((Fraction(int(a), L) + v, Fraction(int(b), L)))
        return out

    def omega_mp(self, j):
        return self.exact_omega(j).to_mpf(WORK_DPS)


class _SqrtModel(FrequencyModel):
    sqrt_type = True

    def omega_sq_exact(self, j) -> QuadScalar:
        raise NotImplementedError

    def _radicand(self, nsq: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def omega_array(self, js):
        nsq = self.metric.norm_sq_array(np.asarray(js))
        return np.sqrt(self._radicand(nsq))

    def class_key(self, j):
        return self.metric.quad_norm_sq(j)

    def class_keys(self, sites):
        return [tuple(int(x) for x in p) for p in self.metric.exact_norm_pairs(sites)]

    def omega_mp(self, j):
        with mpmath.workdps(WORK_DPS):
            return mpmath.sqrt(self.omega_sq_exact(j).to_mpf(WORK_DPS))


@dataclass(frozen=True, eq=False)
class BeamModel(_SqrtModel):
    """``omega_j = sqrt(|j|_g^4 + m)`` for ``g = beta * gbar``."""

    gbar: Metric
    beta: QuadScalar = QuadScalar(1)
    m: QuadScalar = QuadScalar(1)
    beta_range: tuple | None = None
    kind = "beam"

    def __post_init__(self):
        object.__setattr__(self, "beta", _q(self.beta))
        object.__setattr__(self, "m", _q(self.m))
        if self.beta <= 0 or self.m <= 0:
            raise ValueError("beam needs beta > 0 and m > 0")
        if self.beta_range is not None:
            lo, hi = (_q(x) for x in self.beta_range)
            if not (0 < lo < hi) or not (lo < self.beta < hi):
                raise ValueError("beta outside its admissible interval")
        object.__setattr__(self, "_g", self.gbar.scaled(self.beta))

    @property
    def metric(self):
        return self._g

    @property
    def zeta(self) -> float:
        return float(self.m) / float(self.beta) ** 4

    def omega_sq_exact(self, j):
        n = self.metric.quad_norm_sq(j)
        return n * n + self.m

    def _radicand(self, nsq):
        return nsq * nsq + float(self.m)


@dataclass(frozen=True, eq=False)
class QHDModel(_SqrtModel):
    """Hydrodynamic linearisation ``omega_j = sqrt(|j|_g^4 + delta |j|_g^2)``.

    ``delta = 4 m p'(m) / hbar^2``; ``g = beta * gbar``.
    """

    gbar: Metric
    beta: QuadScalar = QuadScalar(1)
    m: QuadScalar = QuadScalar(1)
    hbar: QuadScalar = QuadScalar(1)
    pprime: QuadScalar = QuadScalar(1)
    beta_range: tuple | None = None
    kind = "qhd"
    excludes_zero = True

    def __post_init__(self):
        for name in ("beta", "m", "hbar", "pprime"):
            object.__setattr__(self, name, _q(getattr(self, name)))
        if self.beta <= 0 or self.m <= 0 or self.hbar <= 0:
            raise ValueError("hydrodynamic model needs beta, m, hbar > 0")
        if self.pprime <= 0:
            raise ValueError("ellipticity requires p'(m) > 0")
        if self.beta_range is not None:
            lo, hi = (_q(x) for x in self.beta_range)
            if not (0 < lo < hi) or not (lo < self.beta < hi):
                raise ValueError("beta outside its admissible interval")
        object.__setattr__(self, "_g", self.gbar.scaled(self.beta))

    @property
    def delta(self) -> QuadScalar:
        return 4 * self.m * self.pprime / (self.hbar * self.hbar)

    @property
    def metric(self):
        return self._g

    @property
    def zeta(self) -> float:
        return float(self.delta) / float(self.beta) ** 2

    def omega_sq_exact(self, j):
        n = self.metric.quad_norm_sq(j)
        return n * n + self.delta * n

    def _radicand(self, nsq):
        return nsq * nsq + float(self.delta) * nsq


@dataclass(frozen=True, eq=False)
class PlaneWaveModel(_SqrtModel):
    """Frequencies around a plane wave: ``omega_j = sqrt(|j|_g^4 - f' |j|_g^2)``."""

    g: Metric
    a: QuadScalar = QuadScalar(1)
    fprime: QuadScalar = QuadScalar(0)
    truncation: int = 8
    K: float | None = None
    kind = "planewave"
    excludes_zero = True

    def __post_init__(self):
        object.__setattr__(self, "a", _q(self.a))
        object.__setattr__(self, "fprime", _q(self.fprime))
        if self.a <= 0:
            raise ValueError("plane wave amplitude must be positive")
        for j in get_box(self.g.d, self.truncation).sites:
            if any(j) and self.omega_sq_exact(j) <= 0:
                raise ValueError(f"non-positive radicand at site {tuple(int(x) for x in j)}")

    @property
    def metric(self):
        return self.g

    def k_condition(self) -> bool | None:
        """Check ``2 f'(a^2) < K^2`` when a constant ``K`` was supplied."""
        if self.K is None:
            return None
        return 2 * float(self.fprime) < float(self.K) ** 2

    def omega_sq_exact(self, j):
        n = self.g.quad_norm_sq(j)
        return n * n - self.fprime * n

    def _radicand(self, nsq):
        return nsq * nsq - float(self.fprime) * nsq


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class FrequencyValue:
    exact: QuadScalar | None
    square: QuadScalar | None
    approx: mpmath.mpf
    is_exact: bool

    def __float__(self):
        return float(self.approx)


def omega(model: FrequencyModel, j: Sequence[int]) -> FrequencyValue:
    j = tuple(int(x) for x in j)
    model.check_site(j)
    if isinstance(model, NLSModel):
        ex = model.exact_omega(j)
        return FrequencyValue(ex, ex * ex, ex.to_mpf(WORK_DPS), True)
    sq = model.omega_sq_exact(j)
    if sq <= 0:
        raise ValueError(f"non-positive radicand at {j}")
    with mpmath.workdps(WORK_DPS):
        val = mpmath.sqrt(sq.to_mpf(WORK_DPS))
    # exact root when the square is a rational perfect square
    exact = None
    if sq.is_rational:
        p, q = sq.a.numerator, sq.a.denominator
        rp, rq = math.isqrt(p), math.isqrt(q)
        if rp * rp == p and rq * rq == q:
            exact = QuadScalar(Fraction(rp, rq))
    return FrequencyValue(exact, sq, val, exact is not None)


def beam_omega_scaled(zeta: float, gbar: Metric, j) -> float:
    """``Omega_j(zeta) = sqrt(|j|_gbar^4 + zeta)``."""
    n = float(gbar.quad_norm_sq(j))
    return math.sqrt(n * n + zeta)


def qhd_omega_scaled(zeta: float, gbar: Metric, j) -> float:
    """``Omega_j(zeta) = |j|_gbar sqrt(|j|_gbar^2 + zeta)``."""
    n = float(gbar.quad_norm_sq(j))
    return math.sqrt(n) * math.sqrt(n + zeta)


def beta_from_zeta(model: BeamModel | QHDModel, zeta: float) -> float:
    """Invert the resonance parametrisation: beam ``zeta = m / beta^4``, hydrodynamic ``zeta = delta / beta^2``."""
    if isinstance(model, BeamModel):
        return (float(model.m) / zeta) ** 0.25
    return math.sqrt(float(model.delta) / zeta)


def growth_constant(model: FrequencyModel, N: int) -> float:
    """Smallest C with ``|j|^2 / C <= omega_j <= C |j|^2`` on ``1 <= |j| <= N``."""
    s = get_box(model.d, N).sites
    s = s[np.any(s != 0, axis=1)]
    w = model.omega_array(s)
    e2 = (s * s).sum(axis=1).astype(float)
    return float(max(np.max(w / e2), np.max(e2 / w)))


# ---------------------------------------------------------------------------
# equivalence classes


@dataclass
class EquivalenceClasses:
    N: int
    classes: list            # list of lists of site tuples (sorted)
    label: dict              # site tuple -> class number
    values: list             # float frequency per class
    dyadic_ratio: list       # max|j| / min|j| per class

    def __len__(self):
        return len(self.classes)

    def class_of(self, j) -> int:
        return self.label[tuple(int(x) for x in j)]

    @property
    def max_dyadic_ratio(self) -> float:
        return max(self.dyadic_ratio) if self.dyadic_ratio else 1.0

    def label_array(self, box: Box) -> np.ndarray:
        """Class number for every site of ``box`` (``-1`` for sites not classified)."""
        return np.array([self.label.get(s, -1) for s in box._tuples], dtype=np.int64)


def equivalence_classes(model: FrequencyModel, N: int) -> EquivalenceClasses:
    sites = model.sites(N)
    keys = model.class_keys(sites)
    groups: dict = {}
    for s, k in zip(sites, keys):
        groups.setdefault(k, []).append(tuple(int(x) for x in s))
    ordered = sorted(groups.values(), key=lambda c: c[0])
    w = model.omega_array(np.array([c[0] for c in ordered])) if ordered else []
    label, ratios = {}, []
    for i, c in enumerate(ordered):
        for s in c:
            label[s] = i
        norms = [_euclid(s) for s in c]
        lo, hi = min(norms), max(norms)
        ratios.append(1.0 if hi == 0 else (math.inf if lo == 0 else hi / lo))
    return EquivalenceClasses(N, ordered, label, [float(x) for x in w], ratios)


# ---------------------------------------------------------------------------
# Diophantine condition on metric entries


@dataclass
class DiophantineReport:
    gamma: float
    tau_star: int
    Lmax: int
    checked: int
    best_gamma: float          # min over l of |sum g l| * |l|_1^tau
    margin: float              # best_gamma - gamma (negative means violation)
    worst: tuple
    exact_zeros: list
    violations: list
    violation_count: int

    @property
    def passed(self) -> bool:
        return self.violation_count == 0


def _l1_ball(n: int, L: int) -> np.ndarray:
    """Integer vectors with 1 <= |l|_1 <= L whose first nonzero entry is positive."""
    pts = np.zeros((1, 0), dtype=np.int64)
    used = np.zeros(1, dtype=np.int64)
    for _ in range(n):
        chunks, uses = [], []
        for v in range(-L, L + 1):
            sel = used + abs(v) <= L
            if sel.any():
                chunks.append(np.column_stack([pts[sel], np.full(sel.sum(), v)]))
                uses.append(used[sel] + abs(v))
        pts = np.concatenate(chunks)
        used = np.concatenate(uses)
    nz = pts != 0
    first = np.argmax(nz, axis=1)
    lead = pts[np.arange(len(pts)), first]
    keep = nz.any(axis=1) & (lead > 0)
    return pts[keep]


def diophantine_metric_check(gbar: Metric, gamma: float, Lmax: int,
                             max_listed: int = 100) -> DiophantineReport:
    d = gbar.d
    tau_star = d * (d + 1) // 2 + 1
    entries = [gbar.entries[i][k] for i in range(d) for k in range(i, d)]
    D = gbar.D
    den = math.lcm(*[x.a.denominator for x in entries], *[x.b.denominator for x in entries])
    a_int = np.array([int(x.a * den) for x in entries], dtype=object)
    b_int = np.array([int(x.b * den) for x in entries], dtype=object)
    ells = _l1_ball(len(entries), Lmax)
    lo = ells.astype(object)
    A = lo.dot(a_int)
    B = lo.dot(b_int)
    zero = (A == 0) & (B == 0)
    # cancellation-free |A + B sqrt(D)|
    Af = np.array([float(x) for x in A])
    Bf = np.array([float(x) for x in B])
    root = math.sqrt(D)
    same = (Af * Bf) >= 0
    normv = np.array([float(x) for x in (A * A - B * B * D)])
    val = np.where(same, np.abs(Af) + np.abs(Bf) * root,
                   np.abs(normv) / np.where(same, 1.0, np.abs(Af) + np.abs(Bf) * root))
    val = np.where(zero, 0.0, val) / den
    size = np.abs(ells).sum(axis=1).astype(float)
    scaled = val * size ** tau_star
    order = np.lexsort((size, scaled))
    bad = scaled < gamma
    worst_i = int(order[0])
    viol = [tuple(int(x) for x in ells[i]) for i in order[: max_listed] if bad[i]]
    zeros = [tuple(int(x) for x in ells[i]) for i in np.flatnonzero(zero)[:max_listed]]
    best = float(scaled[worst_i])
    return DiophantineReport(gamma, tau_star, Lmax, len(ells), best, best - gamma,
                             tuple(int(x) for x in ells[worst_i]), zeros, viol, int(bad.sum()))


def brute_force_diophantine_min(gbar: Metric, Lmax: int) -> float:
    """Plain loop with exact field arithmetic; reference for :func:`diophantine_metric_check`."""
    d = gbar.d
    tau_star = d * (d + 1) // 2 + 1
    entries = [gbar.entries[i][k] for i in range(d) for k in range(i, d)]
    best = math.inf
    for ell in itertools.product(range(-Lmax, Lmax + 1), repeat=len(entries)):
        size = sum(abs(x) for x in ell)
        if size == 0 or size > Lmax:
            continue
        comb = sum((e * x for e, x in zip(entries, ell)), QuadScalar(0))
        with mpmath.workdps(WORK_DPS):
            v = abs(comb.to_mpf(WORK_DPS)) * size ** tau_star
        best = min(best, float(v))
    return best
