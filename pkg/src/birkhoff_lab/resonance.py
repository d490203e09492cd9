"""Small divisors, non-resonance witnesses, cluster partitions, measure estimates.

Multi-indices are handled in bulk as integer arrays of signed ids on a
:class:`~birkhoff_lab.lattice.Box` (``2*site`` for ``+``, ``2*site+1`` for ``-``).
Rows are kept non-decreasing, which is exactly the canonical multi-index
order, so each unordered multiset appears once.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator, Sequence

import mpmath
import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import BudgetExceeded, ConvergenceError
from .frequencies import (WORK_DPS, BeamModel, EquivalenceClasses, FrequencyModel,
                          FrequencyValue, NLSModel, QHDModel, equivalence_classes)
from .lattice import Box, MultiIndex, QuadScalar, get_box

DEFAULT_BUDGET = 2 * 10 ** 8
TOL_RES_REL = 1e-9
_PRIMES = (2147483629, 2147483587)


# ---------------------------------------------------------------------------
# per-site frequency tables


class SiteData:
    """Frequencies, exact keys and class labels for every site of a box."""

    def __init__(self, model: FrequencyModel, N: int):
        self.model = model
        self.box = box = get_box(model.d, N)
        self.N = N
        self.allowed = np.ones(box.n, dtype=bool)
        if model.excludes_zero:
            self.allowed &= np.any(box.sites != 0, axis=1)
        w = np.full(box.n, np.nan)
        w[self.allowed] = model.omega_array(box.sites[self.allowed])
        self.omega = w
        self.omega_max = float(np.nanmax(np.abs(w))) if self.allowed.any() else 0.0
        sign = np.where(np.arange(2 * box.n) % 2 == 0, 1.0, -1.0)
        self.signed_omega = sign * np.repeat(np.nan_to_num(w), 2)
        self.sign_of_id = sign.astype(np.int64)
        # exact keys: NLS -> (num_a, num_b) over a common denominator; sqrt -> class
        keys = model.class_keys(box.sites[self.allowed])
        full = [None] * box.n
        for i, k in zip(np.flatnonzero(self.allowed), keys):
            full[i] = k
        self.keys = full
        uniq = {}
        labels = np.full(box.n, -1, dtype=np.int64)
        for i, k in enumerate(full):
            if k is not None:
                labels[i] = uniq.setdefault(k, len(uniq))
        self.labels = labels
        rng = np.random.default_rng(0x5EED)
        hw = rng.integers(1, 2 ** 62, size=(max(len(uniq), 1), 2), dtype=np.int64)
        self.class_hash = np.where(labels[:, None] >= 0, hw[np.maximum(labels, 0)], 0)
        self.exact_nls = isinstance(model, NLSModel)
        if self.exact_nls:
            den = 1
            for k in keys:
                den = math.lcm(den, k[0].denominator, k[1].denominator)
            self.den = den
            self.num = [None if k is None else (int(k[0] * den), int(k[1] * den)) for k in full]
            self.residues = np.zeros((box.n, 4), dtype=np.int64)
            for i, nm in enumerate(self.num):
                if nm is not None:
                    self.residues[i] = [nm[0] % _PRIMES[0], nm[0] % _PRIMES[1],
                                        nm[1] % _PRIMES[0], nm[1] % _PRIMES[1]]

    # divisors of many rows at once ------------------------------------
    def divisors(self, ids: np.ndarray) -> np.ndarray:
        return self.signed_omega[ids].sum(axis=1)

    def paired(self, ids: np.ndarray) -> np.ndarray:
        """Rows whose signed classes cancel (each class has as many + as -)."""
        sites = ids >> 1
        sg = self.sign_of_id[ids]
        h = self.class_hash[sites]                      # (M, r, 2)
        tot = (h * sg[:, :, None]).sum(axis=1)          # wraps mod 2**64, fine for hashing
        cand = np.all(tot == 0, axis=1)
        for row in np.flatnonzero(cand):
            lab = self.labels[sites[row]]
            bal: dict = {}
            for c, s in zip(lab, sg[row]):
                bal[c] = bal.get(c, 0) + s
            if any(bal.values()):
                cand[row] = False
        return cand

    def exact_value(self, row_ids) -> QuadScalar:
        """Exact divisor for one row (NLS models only)."""
        a = b = 0
        for i in row_ids:
            s = 1 if i % 2 == 0 else -1
            na, nb = self.num[int(i) >> 1]
            a += s * na
            b += s * nb
        D = self.model.metric.D
        return QuadScalar(Fraction(a, self.den), Fraction(b, self.den), D)

    def exact_zero(self, ids: np.ndarray) -> np.ndarray:
        sg = self.sign_of_id[ids]
        res = self.residues[ids >> 1]
        tot = np.zeros((len(ids), 4), dtype=np.int64)
        for c in range(4):
            tot[:, c] = (res[:, :, c] * sg).sum(axis=1) % _PRIMES[c % 2]
        cand = np.all(tot == 0, axis=1)
        for row in np.flatnonzero(cand):
            if self.exact_value(ids[row]):
                cand[row] = False
        return cand

    def classify_rows(self, ids: np.ndarray, tol_res: float | None = None):
        """Return ``(divisor, resonant, suspected, exact_nonzero)`` for every row."""
        div = self.divisors(ids)
        tol = TOL_RES_REL * self.omega_max if tol_res is None else tol_res
        if self.exact_nls:
            small = np.abs(div) < max(1e-6 * max(self.omega_max, 1.0), tol)
            resonant = np.zeros(len(ids), dtype=bool)
            if small.any():
                sub = np.flatnonzero(small)
                z = self.exact_zero(ids[sub])
                resonant[sub[z]] = True
                for row in sub[~z]:
                    div[row] = float(self.exact_value(ids[row]))
                div[resonant] = 0.0
            suspected = (np.abs(div) < tol) & ~resonant
            return div, resonant, suspected, ~resonant
        resonant = self.paired(ids)
        div[resonant] = 0.0
        near = (np.abs(div) < tol) & ~resonant
        certified = ~resonant & ~near
        for row in np.flatnonzero(near):
            v = self._mp_value(ids[row])
            div[row] = float(v)
            if abs(v) > mpmath.mpf(10) ** (-(WORK_DPS - 10)) * max(self.omega_max, 1.0):
                certified[row] = True
        return div, resonant, near, certified

    def _mp_value(self, row_ids) -> mpmath.mpf:
        with mpmath.workdps(WORK_DPS):
            total = mpmath.mpf(0)
            for i in row_ids:
                s = 1 if i % 2 == 0 else -1
                total += s * self.model.omega_mp(self.box.site(int(i) >> 1))
            return +total


_SITE_CACHE: dict = {}


def site_data(model: FrequencyModel, N: int) -> SiteData:
    key = (id(model), N)
    hit = _SITE_CACHE.get(key)
    if hit is None or hit[0] is not model:
        if len(_SITE_CACHE) > 64:
            _SITE_CACHE.clear()
        hit = (model, SiteData(model, N))
        _SITE_CACHE[key] = hit
    return hit[1]


# ---------------------------------------------------------------------------
# enumeration


def _tails(lo: int, S: int, k: int) -> np.ndarray:
    """All non-decreasing integer rows of length k with entries in [lo, S)."""
    rows = np.arange(lo, S, dtype=np.int64)[:, None]
    for _ in range(k - 1):
        last = rows[:, -1]
        cnt = S - last
        total = int(cnt.sum())
        rep = np.repeat(rows, cnt, axis=0)
        base = np.repeat(last, cnt)
        offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        rows = np.column_stack([rep, base + offs])
    return rows


def count_estimate(n_ids: int, r: int) -> int:
    """Number of non-decreasing prefixes of length r-1 (the enumeration work)."""
    return math.comb(n_ids + r - 2, r - 1)


def _allowed_ids(box: Box, exclude_zero: bool) -> np.ndarray:
    ids = np.arange(2 * box.n, dtype=np.int64)
    if exclude_zero:
        origin = box.index((0,) * box.d)
        ids = ids[(ids >> 1) != origin]
    return ids


def zero_momentum_block(box: Box, r: int, first: int, allowed: np.ndarray) -> np.ndarray:
    """Momentum-zero non-decreasing rows whose leading signed id is ``allowed[first]``."""
    S = len(allowed)
    if r == 1:
        sid = allowed[first]
        return np.array([[sid]]) if not any(box.site(int(sid) >> 1)) else np.zeros((0, 1), np.int64)
    if r == 2:
        pos = np.array([[first]])
    else:
        tail = _tails(first, S, r - 2)
        pos = np.column_stack([np.full(len(tail), first), tail])
    pre = allowed[pos]
    sites = box.sites[pre >> 1]
    sg = np.where(pre % 2 == 0, 1, -1)
    partial = (sites * sg[:, :, None]).sum(axis=1)
    last = pre[:, -1]
    mask = np.zeros(2 * box.n, dtype=bool)
    mask[allowed] = True
    out = []
    for sigma, vec in ((1, -partial), (-1, partial)):
        s = box.lookup(vec)
        ok = s >= 0
        cand = 2 * s + (0 if sigma > 0 else 1)
        ok &= cand >= last
        ok[ok] &= mask[cand[ok]]
        if ok.any():
            out.append(np.column_stack([pre[ok], cand[ok]]))
    if not out:
        return np.zeros((0, r), dtype=np.int64)
    rows = np.concatenate(out)
    order = np.lexsort(rows.T[::-1])
    return rows[order]


def zero_momentum_ids(box: Box, r: int, exclude_zero: bool = False,
                      budget: int | None = DEFAULT_BUDGET, workers: int = 1) -> Iterator[np.ndarray]:
    """Yield blocks of momentum-zero rows of signed ids, in canonical order."""
    allowed = _allowed_ids(box, exclude_zero)
    est = count_estimate(len(allowed), r)
    if budget is not None and est > budget:
        raise BudgetExceeded(f"enumeration of degree {r} on box {box.N} needs ~{est} prefixes",
                             estimate=est, budget=budget)
    firsts = range(len(allowed))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(lambda f: zero_momentum_block(box, r, f, allowed), firsts)
    else:
        for f in firsts:
            yield zero_momentum_block(box, r, f, allowed)


def all_zero_momentum_ids(box: Box, r: int, exclude_zero: bool = False,
                          budget: int | None = DEFAULT_BUDGET) -> np.ndarray:
    blocks = [b for b in zero_momentum_ids(box, r, exclude_zero, budget) if len(b)]
    if not blocks:
        return np.zeros((0, r), dtype=np.int64)
    return np.concatenate(blocks)


def enumerate_zero_momentum(N: int, r: int, d: int = 2, exclude_zero: bool = False,
                            budget: int | None = DEFAULT_BUDGET) -> Iterator[MultiIndex]:
    """Every canonical momentum-zero multi-index of length r on ``|j| <= N``, once each."""
    if N < 1 or r < 2:
        raise ValueError("need N >= 1 and r >= 2")
    box = get_box(d, N)
    for block in zero_momentum_ids(box, r, exclude_zero, budget):
        for row in block:
            yield box.key_from_ids(row)


# ---------------------------------------------------------------------------
# single divisors


@dataclass(frozen=True)
class DivisorRecord:
    multiindex: MultiIndex
    divisor: FrequencyValue
    resonant: bool
    suspected: bool


def small_divisor(model: FrequencyModel, m, tol_res: float | None = None) -> DivisorRecord:
    if not isinstance(m, MultiIndex):
        m = MultiIndex(m)
    if any(m.momentum):
        raise ValueError(f"multi-index {m} has nonzero momentum {m.momentum}")
    for e in m:
        model.check_site(e.j)
    wmax = max(float(model.omega_mp(e.j)) for e in m)
    tol = TOL_RES_REL * max(abs(wmax), 1e-300) if tol_res is None else tol_res
    with mpmath.workdps(WORK_DPS):
        approx = mpmath.fsum(e.sigma * model.omega_mp(e.j) for e in m)
    if isinstance(model, NLSModel):
        exact = sum((model.exact_omega(e.j) * e.sigma for e in m), QuadScalar(0))
        resonant = not exact
        value = FrequencyValue(exact, exact * exact, approx, True)
    else:
        bal: dict = {}
        for e in m:
            k = model.class_key(e.j)
            bal[k] = bal.get(k, 0) + e.sigma
        resonant = not any(bal.values())
        exact = QuadScalar(0) if resonant else None
        value = FrequencyValue(exact, exact, mpmath.mpf(0) if resonant else approx, resonant)
    suspected = (not resonant) and abs(float(approx)) < tol
    return DivisorRecord(m, value, resonant, suspected)


# ---------------------------------------------------------------------------
# lattice engine: exact counting for integer-valued frequencies


def integer_frequency_scale(model: FrequencyModel, N: int, max_scale: int = 64) -> int | None:
    """Smallest L with ``L*omega_j`` integral on the box, or None."""
    if not isinstance(model, NLSModel) or model.g.D:
        return None
    sd = site_data(model, N)
    L = 1
    for k in sd.keys:
        if k is None:
            continue
        if k[1]:
            return None
        L = math.lcm(L, k[0].denominator)
        if L > max_scale:
            return None
    return L


def lattice_counts(model: NLSModel, N: int, r: int, L: int,
                   max_cells: int = 6 * 10 ** 7) -> dict[int, dict[int, int]]:
    """Count momentum-zero multisets by (degree, L*divisor) with a generating function.

    Newton's identity ``h_p = (1/p) sum_k P_k h_{p-k}`` on a periodic grid in
    (momentum, scaled value) gives exact counts of multisets of signed ids.
    """
    sd = site_data(model, N)
    box = sd.box
    d = box.d
    vals = [int(k[0] * L) for k in sd.keys]
    vmax = max(abs(v) for v in vals)
    wm = 2 * r * N + 1
    wv = 2 * r * vmax + 1
    shape = (wm,) * d + (wv,)
    if math.prod(shape) > max_cells:
        raise BudgetExceeded(f"counting grid {shape} too large", estimate=math.prod(shape),
                             budget=max_cells)
    w = []
    for i in range(box.n):
        for s in (1, -1):
            w.append(list(s * box.sites[i]) + [s * vals[i]])
    w = np.array(w, dtype=np.int64)
    dims = np.array(shape)

    def power_sum(k):
        hist = np.zeros(shape)
        idx = tuple(((k * w) % dims).T)
        np.add.at(hist, idx, 1.0)
        return np.fft.rfftn(hist)

    P = [None] + [power_sum(k) for k in range(1, r + 1)]
    h = [None] * (r + 1)
    one = np.zeros(shape)
    one[(0,) * (d + 1)] = 1.0
    h[0] = np.fft.rfftn(one)
    out = {}
    for p in range(1, r + 1):
        acc = sum(P[k] * h[p - k] for k in range(1, p + 1))
        h[p] = acc / p
        if p < 3:
            continue
        counts = np.fft.irfftn(h[p], s=shape, axes=tuple(range(len(shape))))
        line = counts[(0,) * d]
        res = {}
        for idx in np.flatnonzero(line > 0.5):
            v = idx if idx <= wv // 2 else idx - wv
            res[int(v)] = int(round(line[idx]))
        out[p] = res
    return out


def lattice_paired_counts(model: FrequencyModel, N: int, r: int) -> dict[int, int]:
    """Momentum-zero multisets of each degree whose signs cancel class by class.

    Per class the generating function is ``sum_k t^(2k) h_k(x) h_k(1/x)``; the
    product over classes is evaluated on a grid of characters and averaged,
    which extracts the coefficient of ``x^0``.
    """
    sd = site_data(model, N)
    box = sd.box
    wm = 2 * r * N + 1
    axes = np.arange(wm)
    theta = np.stack(np.meshgrid(*([axes] * box.d), indexing="ij"), axis=-1).reshape(-1, box.d)
    half = r // 2
    total = np.zeros((r + 1, len(theta)), dtype=complex)
    total[0] = 1.0
    for c in range(int(sd.labels.max()) + 1):
        members = box.sites[sd.labels == c]
        if not len(members):
            continue
        phase = np.exp(2j * np.pi * (members @ theta.T) / wm)      # (n_c, G)
        plus = [None] + [(phase ** q).sum(axis=0) for q in range(1, half + 1)]
        minus = [None] + [p.conj() for p in plus[1:]]
        hp = [np.ones(len(theta), dtype=complex)]
        hm = [np.ones(len(theta), dtype=complex)]
        for k in range(1, half + 1):
            hp.append(sum(plus[q] * hp[k - q] for q in range(1, k + 1)) / k)
            hm.append(sum(minus[q] * hm[k - q] for q in range(1, k + 1)) / k)
        factor = [np.zeros(len(theta), dtype=complex) for _ in range(r + 1)]
        for k in range(half + 1):
            factor[2 * k] = hp[k] * hm[k]
        new = np.zeros_like(total)
        for a in range(r + 1):
            for b in range(0, r + 1 - a, 2):
                if b // 2 <= half:
                    new[a + b] += total[a] * factor[b]
        total = new
    counts = total.mean(axis=1).real
    return {p: int(round(counts[p])) for p in range(3, r + 1)}


# ---------------------------------------------------------------------------
# non-resonance witness


@dataclass
class NR2Report:
    checked_classes: int
    max_terms: int
    violations: list = field(default_factory=list)    # [(class values, signs)]
    suspected: list = field(default_factory=list)
    truncated: bool = False

    @property
    def violated(self) -> bool:
        return bool(self.violations)


@dataclass
class NonresonanceWitness:
    N: int
    r: int
    gamma_fit: float
    tau_fit: float
    min_nonzero: float
    count_resonant: int
    count_suspected: int
    engine: str = "enumerate"
    ladder: list = field(default_factory=list)          # [(N', min nonzero)]
    by_degree: dict = field(default_factory=dict)
    resonances: list = field(default_factory=list)      # sample of certified resonant keys
    suspects: list = field(default_factory=list)
    nr2: NR2Report | None = None
    scanned: int = 0
    count_trivial: int = 0

    def to_json(self) -> dict:
        return {
            "N": self.N, "r": self.r, "gamma_fit": self.gamma_fit, "tau_fit": self.tau_fit,
            "min_nonzero": self.min_nonzero, "count_resonant": self.count_resonant,
            "count_suspected": self.count_suspected, "count_trivial": self.count_trivial,
            "engine": self.engine,
            "scanned": self.scanned,
            "ladder": [{"N": n, "min_nonzero": v} for n, v in self.ladder],
            "by_degree": {str(k): v for k, v in self.by_degree.items()},
            "resonances_sample": [k.to_json() for k in self.resonances],
            "suspected_sample": [k.to_json() for k in self.suspects],
            "nr2": None if self.nr2 is None else {
                "checked_classes": self.nr2.checked_classes, "max_terms": self.nr2.max_terms,
                "violations": self.nr2.violations[:50], "suspected": self.nr2.suspected[:50],
                "truncated": self.nr2.truncated},
        }


def n_ladder(N: int) -> list[int]:
    out, n = [], 1
    while n <= N:
        if n >= 2 or N == 1:
            out.append(n)
        n *= 2
    if not out or out[-1] != N:
        out.append(N)
    return out


def fit_gamma_tau(ladder: Sequence[tuple[int, float]]) -> tuple[float, float]:
    """Tightest ``gamma / N^tau`` with gamma the floor at the smallest box."""
    finite = [(n, v) for n, v in ladder if math.isfinite(v) and v > 0]
    if not finite:
        return math.inf, 0.0
    gamma = finite[0][1]
    tau = 0.0
    for n, v in finite:
        if n > 1 and v < gamma:
            tau = max(tau, math.log(gamma / v) / math.log(n))
    return gamma, tau


def verify_nonresonance(model: FrequencyModel, N: int, r: int, *, engine: str = "auto",
                        budget: int | None = DEFAULT_BUDGET, sample_cap: int = 200,
                        nr2: bool = True, workers: int = 1) -> NonresonanceWitness:
    if r < 3:
        raise ValueError("scan starts at degree 3; need r >= 3")
    ladder_ns = n_ladder(N)
    L = integer_frequency_scale(model, N) if engine in ("auto", "lattice") else None
    if engine == "lattice" and L is None:
        raise ValueError("lattice engine needs integer-valued frequencies")
    if L is not None:
        return _verify_lattice(model, N, r, L, ladder_ns, nr2)
    sd = site_data(model, N)
    box = sd.box
    norms = box.euclid
    mins = {n: math.inf for n in ladder_ns}
    by_degree = {}
    n_res = n_sus = n_triv = scanned = 0
    resonances, suspects = [], []
    for p in range(3, r + 1):
        deg_min, deg_res, deg_triv = math.inf, 0, 0
        for block in zero_momentum_ids(box, p, model.excludes_zero, budget, workers):
            if not len(block):
                continue
            scanned += len(block)
            div, res, sus, cert = sd.classify_rows(block)
            triv = sd.paired(block)
            deg_triv += int(triv.sum())
            res = res & ~triv
            n_res += int(res.sum())
            deg_res += int(res.sum())
            n_sus += int(sus.sum())
            for row in np.flatnonzero(res)[: max(0, sample_cap - len(resonances))]:
                resonances.append(box.key_from_ids(block[row]))
            for row in np.flatnonzero(sus)[: max(0, sample_cap - len(suspects))]:
                suspects.append(box.key_from_ids(block[row]))
            good = cert & (div != 0)
            if not good.any():
                continue
            a = np.abs(div[good])
            reach = norms[block[good] >> 1].max(axis=1)
            deg_min = min(deg_min, float(a.min()))
            for n in ladder_ns:
                sel = reach <= n + 1e-9
                if sel.any():
                    mins[n] = min(mins[n], float(a[sel].min()))
        by_degree[p] = {"min_nonzero": deg_min, "count_resonant": deg_res,
                        "count_trivial": deg_triv}
        n_triv += deg_triv
    ladder = [(n, mins[n]) for n in ladder_ns]
    gamma, tau = fit_gamma_tau(ladder)
    rep = nr2_check(model, N, r) if nr2 else None
    return NonresonanceWitness(N, r, gamma, tau, mins[N], n_res, n_sus, "enumerate", ladder,
                               by_degree, resonances, suspects, rep, scanned, n_triv)


def _verify_lattice(model, N, r, L, ladder_ns, nr2):
    mins = {}
    by_degree = {}
    n_res = n_triv = 0
    trivial = lattice_paired_counts(model, N, r)
    for n in ladder_ns:
        counts = lattice_counts(model, n, r, integer_frequency_scale(model, n) or L)
        Ln = integer_frequency_scale(model, n) or L
        best = math.inf
        for p, table in counts.items():
            nz = [abs(v) for v in table if v != 0]
            m = min(nz) / Ln if nz else math.inf
            best = min(best, m)
            if n == N:
                zeros, triv = table.get(0, 0), trivial.get(p, 0)
                by_degree[p] = {"min_nonzero": m, "count_resonant": zeros - triv,
                                "count_trivial": triv, "count_total": sum(table.values())}
                n_res += zeros - triv
                n_triv += triv
        mins[n] = best
    ladder = [(n, mins[n]) for n in ladder_ns]
    gamma, tau = fit_gamma_tau(ladder)
    rep = nr2_check(model, N, r) if nr2 else None
    scanned = sum(v.get("count_total", 0) for v in by_degree.values())
    return NonresonanceWitness(N, r, gamma, tau, mins[N], n_res, 0, "lattice", ladder,
                               by_degree, [], [], rep, scanned, n_triv)


def _signed_subsets(n: int, k: int):
    """Index rows (padded with -1) and sign rows for signed subsets of size <= k."""
    import itertools
    idx_rows, sign_rows = [], []
    for size in range(1, k + 1):
        for comb in itertools.combinations(range(n), size):
            for signs in itertools.product((1, -1), repeat=size):
                idx_rows.append(list(comb) + [-1] * (k - size))
                sign_rows.append(list(signs) + [0] * (k - size))
    if not idx_rows:
        return np.zeros((0, k), np.int64), np.zeros((0, k), np.int64)
    return np.array(idx_rows, dtype=np.int64), np.array(sign_rows, dtype=np.int64)


def nr2_check(model: FrequencyModel, N: int, r: int, max_report: int = 50,
              max_work: int = 5 * 10 ** 6) -> NR2Report:
    """Search signed combinations of at most r distinct class values that vanish.

    Meet in the middle: half-sums of at most ceil(r/2) and floor(r/2) classes are
    matched by sorting; candidate zeros are confirmed exactly (NLS) or flagged
    as suspected (sqrt-type models).
    """
    ec = equivalence_classes(model, N)
    if isinstance(model, NLSModel):
        reps = [c[0] for c in ec.classes]
        exact = [model.exact_omega(s) for s in reps]
        vals = np.array([float(x) for x in exact])
    else:
        exact = None
        vals = np.array(ec.values)
    nc = len(vals)
    rep = NR2Report(nc, r)
    tol = TOL_RES_REL * max(float(np.max(np.abs(vals))) if nc else 1.0, 1.0)
    for i in range(nc):
        if abs(vals[i]) < tol:
            entry = ([float(vals[i])], [1])
            if exact is None or not exact[i]:
                (rep.violations if exact is not None else rep.suspected).append(entry)
    k_left, k_right = (r + 1) // 2, r // 2
    size_est = sum(math.comb(nc, s) * 2 ** s for s in range(1, k_left + 1))
    if size_est > max_work:
        rep.truncated = True
        return rep
    li, ls = _signed_subsets(nc, k_left)
    ri, rs = _signed_subsets(nc, k_right) if k_right else (np.zeros((0, 1), np.int64),) * 2
    lsum = (np.where(li >= 0, vals[np.maximum(li, 0)], 0.0) * ls).sum(axis=1)
    if len(ri):
        rsum = (np.where(ri >= 0, vals[np.maximum(ri, 0)], 0.0) * rs).sum(axis=1)
        order = np.argsort(rsum)
        rsorted = rsum[order]
        lo = np.searchsorted(rsorted, -lsum - tol, side="left")
        hi = np.searchsorted(rsorted, -lsum + tol, side="right")
    else:
        lo = hi = np.zeros(len(li), dtype=np.int64)
    seen = set()
    for a in np.flatnonzero(hi > lo):
        for b in order[lo[a]:hi[a]]:
            left = {int(x): int(s) for x, s in zip(li[a], ls[a]) if x >= 0}
            right = {int(x): int(s) for x, s in zip(ri[b], rs[b]) if x >= 0}
            if set(left) & set(right):
                continue
            combo = {**left, **right}
            first = min(combo)
            if combo[first] < 0:
                combo = {k: -v for k, v in combo.items()}
            key = tuple(sorted(combo.items()))
            if key in seen:
                continue
            seen.add(key)
            entry = ([float(vals[k]) for k, _ in key], [v for _, v in key])
            if exact is not None:
                tot = sum((exact[k] * v for k, v in key), QuadScalar(0))
                if not tot:
                    rep.violations.append(entry)
            else:
                rep.suspected.append(entry)
            if len(rep.violations) >= max_report or len(rep.suspected) >= max_report:
                rep.truncated = True
                return rep
    # combinations using only the left half (right part empty)
    for a in np.flatnonzero(np.abs(lsum) < tol):
        key = tuple((int(x), int(s)) for x, s in zip(li[a], ls[a]) if x >= 0)
        if len(key) < 2 or key[0][1] < 0 or key in seen:
            continue
        seen.add(key)
        entry = ([float(vals[k]) for k, _ in key], [v for _, v in key])
        if exact is not None:
            if not sum((exact[k] * v for k, v in key), QuadScalar(0)):
                rep.violations.append(entry)
        else:
            rep.suspected.append(entry)
    return rep


# ---------------------------------------------------------------------------
# cluster partitions


@dataclass
class ClusterPartition:
    N: int
    model: FrequencyModel
    clusters: list                       # lists of site tuples
    labels: np.ndarray                   # cluster number per site of the box
    origin_cluster: int
    params: dict
    passed_dyadic: bool = True
    passed_separation: bool = True
    witness: tuple | None = None

    @property
    def box(self) -> Box:
        return get_box(self.model.d, self.N)

    def cluster_of(self, j) -> int:
        box = self.box
        j = tuple(int(x) for x in j)
        if j not in box:
            raise KeyError(f"site {j} lies outside the partition box N={self.N}")
        return int(self.labels[box.index(j)])

    def to_json(self) -> dict:
        return {"N": self.N, "params": self.params, "origin_cluster": self.origin_cluster,
                "passed_dyadic": self.passed_dyadic, "passed_separation": self.passed_separation,
                "clusters": [[list(s) for s in c] for c in self.clusters]}


def _edge_graph(box: Box, nsq: np.ndarray, C0: float, delta: float):
    """Sparse adjacency for ``|i-j| + ||i|^2 - |j|^2| < C0 (|i|^delta + |j|^delta)``."""
    pw = box.euclid ** delta
    reach = 2 * C0 * box.N ** delta
    R = int(math.ceil(reach))
    axes = np.arange(-R, R + 1)
    offs = np.stack(np.meshgrid(*([axes] * box.d), indexing="ij"), axis=-1).reshape(-1, box.d)
    offs = offs[(offs * offs).sum(axis=1) <= reach * reach]
    offs = offs[np.any(offs != 0, axis=1)]
    rows, cols = [], []
    for off in offs:
        other = box.lookup(box.sites + off)
        ok = other >= 0
        i = np.flatnonzero(ok)
        jdx = other[ok]
        lhs = np.linalg.norm(off) + np.abs(nsq[i] - nsq[jdx])
        edge = lhs < C0 * (pw[i] + pw[jdx])
        rows.append(i[edge])
        cols.append(jdx[edge])
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    return sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(box.n, box.n)).tocsr()


def _partition_at(model, N, C0, delta, C1_origin):
    box = get_box(model.d, N)
    nsq = model.metric.norm_sq_array(box.sites)
    graph = _edge_graph(box, nsq, C0, delta)
    _, comp = connected_components(graph, directed=False)
    near = box.euclid <= C1_origin
    origin_comps = np.unique(comp[near])
    merged = np.where(np.isin(comp, origin_comps), -1, comp)
    # relabel: origin block first, then by smallest member site
    uniq, first = np.unique(merged, return_index=True)
    order = sorted(range(len(uniq)), key=lambda k: (uniq[k] != -1, first[k]))
    remap = {int(uniq[k]): n for n, k in enumerate(order)}
    labels = np.array([remap[int(c)] for c in merged], dtype=np.int64)
    return box, labels


def verify_dyadic(box: Box, labels: np.ndarray, origin: int):
    """Largest sup/inf norm ratio over non-origin clusters, with the witness pair."""
    worst, witness = 1.0, None
    n = labels.max() + 1
    lo = np.full(n, np.inf)
    hi = np.zeros(n)
    np.minimum.at(lo, labels, box.euclid)
    np.maximum.at(hi, labels, box.euclid)
    for c in range(n):
        if c == origin:
            continue
        ratio = hi[c] / lo[c]
        if ratio > worst:
            worst = ratio
            members = np.flatnonzero(labels == c)
            a = members[np.argmin(box.euclid[members])]
            b = members[np.argmax(box.euclid[members])]
            witness = (box.site(int(a)), box.site(int(b)))
    return worst, witness


def verify_separation(box: Box, labels: np.ndarray, omega: np.ndarray, delta: float,
                  chunk: int = 512) -> tuple[float, tuple | None]:
    """Exhaustive min over cross-cluster pairs of (|i-j| + |w_i-w_j|)/(|i|^d + |j|^d)."""
    pw = box.euclid ** delta
    sites = box.sites.astype(float)
    best, witness = math.inf, None
    for start in range(0, box.n, chunk):
        a = slice(start, min(start + chunk, box.n))
        dist = np.sqrt(((sites[a, None, :] - sites[None, :, :]) ** 2).sum(axis=2))
        lhs = dist + np.abs(omega[a, None] - omega[None, :])
        den = pw[a, None] + pw[None, :]
        cross = labels[a, None] != labels[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(cross & (den > 0), lhs / den, np.inf)
        k = int(np.argmin(ratio))
        v = float(ratio.flat[k])
        if v < best:
            best = v
            i, j = divmod(k, box.n)
            witness = (box.site(start + i), box.site(j))
    return best, witness


def build_clusters(model: FrequencyModel, N: int, C0: float = 1.0, delta: float = 0.3,
                   C1_origin: float = 4.0, C2_max: float = 4.0, C3_min: float | None = None,
                   delta_min: float = 0.3 / 64, check_separation: bool = True) -> ClusterPartition:
    """Threshold-graph clustering, then exhaustive checks of dyadic size and cluster separation."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    C3_min = C0 / 2 if C3_min is None else C3_min
    tried = []
    d = delta
    while True:
        box, labels = _partition_at(model, N, C0, d, C1_origin)
        c2, wit = verify_dyadic(box, labels, 0)
        tried.append((d, c2))
        if c2 <= C2_max:
            break
        d /= 2
        if d < delta_min:
            raise ConvergenceError(f"dyadicity C2 <= {C2_max} not reached down to delta={delta_min}; "
                                   f"worst cluster spans {wit}")
    omega = np.nan_to_num(model.omega_array(box.sites), nan=0.0) if not model.excludes_zero else \
        np.where(np.any(box.sites != 0, axis=1), np.nan_to_num(model.omega_array(box.sites)), 0.0)
    if check_separation:
        c3, wit3 = verify_separation(box, labels, omega, d)
    else:
        c3, wit3 = math.nan, None
    clusters = [[] for _ in range(labels.max() + 1)]
    for i, c in enumerate(labels):
        clusters[c].append(box.site(i))
    params = {"C0": C0, "delta": d, "delta_requested": delta, "C1_origin": C1_origin,
              "C2_max": C2_max, "C3_min": C3_min, "C2_observed": c2, "C3_observed": c3,
              "tried": tried, "n_clusters": len(clusters), "origin_size": len(clusters[0])}
    return ClusterPartition(N, model, clusters, labels, 0, params,
                            passed_dyadic=c2 <= C2_max,
                            passed_separation=(not check_separation) or c3 >= C3_min,
                            witness=wit3 if check_separation and c3 < C3_min else None)


# ---------------------------------------------------------------------------
# classification of multi-indices

NF_LOW = "normal_form_low"
NF_PAIRED = "normal_form_paired"
NONRES = "nonresonant_set"
REMAINDER = "remainder"
_CODES = {0: NF_LOW, 1: NF_PAIRED, 2: NONRES, 3: REMAINDER}


def classify_ids(ids: np.ndarray, N: float, partition: ClusterPartition) -> np.ndarray:
    """Bulk classification of rows of signed ids on the partition box.

    Codes: 0 low normal form, 1 paired normal form, 2 non-resonant, 3 remainder.
    """
    ids = np.asarray(ids, dtype=np.int64)
    box = partition.box
    sd = site_data(partition.model, partition.N)
    sites = ids >> 1
    large = box.euclid[sites] > N + 1e-12
    nlarge = large.sum(axis=1)
    code = np.full(len(ids), 2, dtype=np.int64)
    code[nlarge >= 3] = 3
    low = nlarge == 0
    if low.any():
        sub = np.flatnonzero(low)
        _, res, _, _ = sd.classify_rows(ids[sub])
        code[sub[res]] = 0
    two = np.flatnonzero(nlarge == 2)
    if len(two):
        big_pos = np.argsort(~large[two], axis=1, kind="stable")[:, :2]
        rowsel = np.arange(len(two))[:, None]
        big_ids = ids[two][rowsel, big_pos]
        opposite = (big_ids[:, 0] % 2) != (big_ids[:, 1] % 2)
        lab = partition.labels[big_ids >> 1]
        same = lab[:, 0] == lab[:, 1]
        code[two[opposite & same]] = 1
    return code


def classify_multiindex(m, N: float, partition: ClusterPartition) -> str:
    if not isinstance(m, MultiIndex):
        m = MultiIndex(m)
    if any(m.momentum):
        raise ValueError(f"multi-index {m} has nonzero momentum")
    box = partition.box
    ids = np.array([box.ids_from_key(m)])
    return _CODES[int(classify_ids(ids, N, partition)[0])]


# ---------------------------------------------------------------------------
# Van der Monde determinants


@dataclass
class VandermondeResult:
    D: float
    signed: float
    bound: float | None
    eta_fit: float | None


def _vdm_data(model, sites, zeta):
    gbar = model.gbar
    n2 = [float(gbar.quad_norm_sq(j)) for j in sites]
    if len({gbar.quad_norm_sq(j) for j in sites}) != len(sites):
        raise ValueError("sites with equal |j|_gbar give a vanishing determinant")
    if isinstance(model, BeamModel):
        big = [mpmath.mpf(x) ** 2 for x in n2]
        Om = [mpmath.sqrt(b + zeta) for b in big]
        x = [1 / (b + zeta) for b in big]
    elif isinstance(model, QHDModel):
        Om = [mpmath.sqrt(mpmath.mpf(a)) * mpmath.sqrt(mpmath.mpf(a) + zeta) for a in n2]
        x = [1 / (mpmath.mpf(a) + zeta) for a in n2]
    else:
        raise TypeError("Van der Monde bound is defined for beam and hydrodynamic models")
    return Om, x


def vandermonde_bound(model, sites: Sequence, zeta: float, N: int | None = None,
                      C: float = 1.0, eta: float | None = None) -> VandermondeResult:
    """Closed form ``prod_n c_n * prod_i Omega_i * prod_{i<l} (x_l - x_i)``.

    ``c_n`` is the falling factorial of 1/2 from differentiating ``sqrt`` n times.
    """
    K = len(sites)
    with mpmath.workdps(WORK_DPS):
        Om, x = _vdm_data(model, sites, mpmath.mpf(zeta))
        coef = mpmath.mpf(1)
        for n in range(K):
            coef *= mpmath.ff(mpmath.mpf(1) / 2, n)
        val = coef * mpmath.fprod(Om)
        for i in range(K):
            for l in range(i + 1, K):
                val *= x[l] - x[i]
        D = abs(val)
        bound = eta_fit = None
        if N is not None and N > 1:
            eta_fit = max(0.0, float(mpmath.log(C / D) / (K * K * math.log(N)))) if D > 0 else math.inf
            use = eta_fit if eta is None else eta
            bound = C / N ** (use * K * K)
        return VandermondeResult(float(D), float(val), bound, eta_fit)


def vandermonde_dense(model, sites: Sequence, zeta: float) -> float:
    """Determinant of the matrix of zeta-derivatives, by numerical differentiation."""
    K = len(sites)
    gbar = model.gbar
    with mpmath.workdps(WORK_DPS):
        def omega_fn(j):
            a = mpmath.mpf(float(gbar.quad_norm_sq(j)))
            if isinstance(model, BeamModel):
                return lambda z: mpmath.sqrt(a * a + z)
            return lambda z: mpmath.sqrt(a) * mpmath.sqrt(a + z)
        rows = [[mpmath.diff(omega_fn(j), mpmath.mpf(zeta), n) for n in range(K)] for j in sites]
        return float(mpmath.det(mpmath.matrix(rows)))


# ---------------------------------------------------------------------------
# Monte Carlo measure estimate


@dataclass
class MonteCarloTable:
    N: int
    r: int
    tau: float
    trials: int
    rows: list                 # dicts: gamma, threshold, violating, fraction
    c_fit: float
    envelope_ok: bool
    monotone: bool
    n_keys: int

    def to_json(self) -> dict:
        return {"N": self.N, "r": self.r, "tau": self.tau, "trials": self.trials,
                "c_fit": self.c_fit, "envelope_ok": self.envelope_ok,
                "monotone": self.monotone, "n_keys": self.n_keys, "rows": self.rows}


def trial_min_divisors(sampler: Callable[[int], FrequencyModel], N: int, r: int,
                       trials: int, seed0: int = 0) -> tuple[np.ndarray, int]:
    """Per-trial minimal |divisor| over momentum-zero keys of degree 3..r (0 if an exact zero)."""
    first = sampler(seed0)
    box = get_box(first.d, N)
    blocks = [all_zero_momentum_ids(box, p, first.excludes_zero) for p in range(3, r + 1)]
    mins = np.empty(trials)
    n_keys = sum(len(b) for b in blocks)
    for t in range(trials):
        model = first if t == 0 else sampler(seed0 + t)
        sd = SiteData(model, N)
        best = math.inf
        for ids in blocks:
            if not len(ids):
                continue
            div, res, _, _ = sd.classify_rows(ids)
            structural = sd.paired(ids)
            exact_zero = res & ~structural
            if exact_zero.any():
                best = 0.0
                break
            keep = ~structural
            if keep.any():
                best = min(best, float(np.abs(div[keep]).min()))
        mins[t] = best
    return mins, n_keys


def measure_monte_carlo(sampler: Callable[[int], FrequencyModel], N: int, r: int,
                        gamma_ladder: Sequence[float], trials: int, tau: float = 0.0,
                        seed0: int = 0) -> MonteCarloTable:
    """Violating fraction per gamma, with one linear envelope ``c * gamma`` for the ladder.

    ``c`` is a least-squares fit through the origin on the unsaturated rows
    (0 < fraction < 1); every row must then lie below ``min(1, c gamma)`` up to
    three binomial standard deviations.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    mins, n_keys = trial_min_divisors(sampler, N, r, trials, seed0)
    rows = []
    for g in sorted(gamma_ladder, reverse=True):
        thr = g / N ** tau
        viol = int(np.sum(mins == 0.0)) if g == 0 else int(np.sum(mins < thr))
        rows.append({"gamma": g, "threshold": thr, "violating": viol, "fraction": viol / trials})
    fr = [row["fraction"] for row in rows]
    monotone = all(a >= b for a, b in zip(fr, fr[1:]))
    live = [row for row in rows if row["gamma"] > 0 and 0 < row["fraction"] < 1]
    if live:
        c_fit = (sum(row["fraction"] * row["gamma"] for row in live)
                 / sum(row["gamma"] ** 2 for row in live))
    else:
        c_fit = max((row["fraction"] / row["gamma"] for row in rows if row["gamma"] > 0), default=0.0)
    ok = True
    for row in rows:
        if row["gamma"] <= 0:
            continue
        p = min(1.0, c_fit * row["gamma"])
        slack = 3 * math.sqrt(max(p * (1 - p), 1.0 / trials) / trials)
        row["envelope"] = p
        row["within"] = row["fraction"] <= p + slack
        ok &= row["within"]
    return MonteCarloTable(N, r, tau, trials, rows, c_fit, ok, monotone, n_keys)
