"""Sparse momentum-zero polynomial Hamiltonians on the signed lattice.

Storage convention: one complex *monomial* coefficient per canonical
multi-index, i.e. ``P(u) = sum_K c_K prod_{J in K} u_J``.  The fully symmetric
tensor coefficient is ``c_K / (number of distinct orderings of K)``; norms and
the bracket estimate use the tensor convention.

Poisson bracket (explicit form, with ``u_(j,+)`` and ``u_(j,-)`` independent)::

    {f; g} = i sum_j ( df/du_(j,-) dg/du_(j,+)  -  df/du_(j,+) dg/du_(j,-) )

and the Hamiltonian vector field is ``X_(j,s) = s * i * dH/du_(j,-s)``.  With
these choices ``{f; g} = dg . X_f``, the derivative of ``g`` along the flow of ``f``.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .frequencies import BeamModel, FrequencyModel, NLSModel, PlaneWaveModel, QHDModel
from .lattice import Box, ModeSequence, MultiIndex, SignedIndex, get_box, signed

REALITY_TOL = 1e-9


def n_orderings(key) -> int:
    """Distinct orderings of the multiset ``key``."""
    out = math.factorial(len(key))
    run = 1
    for a, b in zip(key, key[1:]):
        run = run + 1 if a == b else 1
        out //= run
    return out


def orderings_rows(ids: np.ndarray) -> np.ndarray:
    """Vectorised :func:`n_orderings` for sorted rows of ids."""
    M, r = ids.shape
    denom = np.ones(M, dtype=np.int64)
    run = np.ones(M, dtype=np.int64)
    for c in range(1, r):
        same = ids[:, c] == ids[:, c - 1]
        run = np.where(same, run + 1, 1)
        denom *= run
    return math.factorial(r) // denom


def _key(k) -> MultiIndex:
    return k if isinstance(k, MultiIndex) else MultiIndex(k)


def _site_radius_sq(key) -> int:
    return max(sum(x * x for x in e.j) for e in key)


class PolyHamiltonian:
    """Immutable sparse polynomial ``{canonical key: monomial coefficient}``."""

    __slots__ = ("terms", "d", "_compiled")

    def __init__(self, terms: Mapping | Iterable = (), d: int | None = None, *,
                 check: bool = True, tol: float = REALITY_TOL):
        items = terms.items() if isinstance(terms, Mapping) else terms
        acc: dict = {}
        for k, v in items:
            key = _key(k)
            acc[key] = acc.get(key, 0) + complex(v)
        clean = {k: v for k, v in acc.items() if v != 0}
        dims = {k.dim for k in clean}
        if d is not None:
            dims.add(d)
        if len(dims) > 1:
            raise ValueError("mixed dimensions in polynomial")
        self.d = dims.pop() if dims else d
        for k, v in clean.items():
            if any(k.momentum):
                raise ValueError(f"monomial {k} has nonzero momentum {k.momentum}")
            if not (math.isfinite(v.real) and math.isfinite(v.imag)):
                raise ValueError(f"non-finite coefficient at {k}")
        self.terms = clean
        self._compiled = {}
        if check:
            bad = self.reality_defect()
            if bad > tol:
                raise ValueError(f"reality condition violated (defect {bad:.3e})")

    # construction ---------------------------------------------------------
    @classmethod
    def from_tensor(cls, tensor: Mapping, d: int | None = None, **kw) -> "PolyHamiltonian":
        """Build from symmetric-tensor coefficients (multiplied by the ordering count)."""
        return cls({_key(k): v * n_orderings(_key(k)) for k, v in tensor.items()}, d, **kw)

    @classmethod
    def realified(cls, terms: Mapping, d: int | None = None) -> "PolyHamiltonian":
        """Reality projection ``c_K -> (c_K + conj(c_{bar K})) / 2``."""
        raw = {}
        for k, v in terms.items():
            raw[_key(k)] = raw.get(_key(k), 0) + complex(v)
        out = {}
        for k, v in raw.items():
            kb = k.bar()
            out[k] = out.get(k, 0) + v / 2
            out[kb] = out.get(kb, 0) + v.conjugate() / 2
        return cls(out, d)

    @classmethod
    def from_ids(cls, box: Box, blocks: Mapping[int, tuple], check: bool = True) -> "PolyHamiltonian":
        terms = {}
        for ids, coef in blocks.values():
            for row, c in zip(ids, coef):
                if c != 0:
                    terms[box.key_from_ids(row)] = complex(c)
        p = cls(terms, box.d, check=check)
        return p

    @classmethod
    def _raw(cls, terms: dict, d: int | None) -> "PolyHamiltonian":
        """Wrap terms already known to be canonical, momentum-zero and nonzero."""
        self = object.__new__(cls)
        self.terms = {k: v for k, v in terms.items() if v != 0}
        self.d = d
        self._compiled = {}
        return self

    @classmethod
    def zero(cls, d: int | None = None) -> "PolyHamiltonian":
        return cls({}, d)

    # basic protocol ---------------------------------------------------------
    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms)

    def __getitem__(self, key) -> complex:
        return self.terms.get(_key(key), 0j)

    def items(self):
        return self.terms.items()

    def keys(self):
        return self.terms.keys()

    def __bool__(self):
        return bool(self.terms)

    def __eq__(self, other):
        return isinstance(other, PolyHamiltonian) and self.terms == other.terms

    def __repr__(self):
        return f"PolyHamiltonian({len(self.terms)} terms, grades={self.grades})"

    @property
    def grades(self) -> list[int]:
        return sorted({len(k) for k in self.terms})

    def degree_part(self, *degrees: int) -> "PolyHamiltonian":
        ds = set(degrees)
        return PolyHamiltonian._raw({k: v for k, v in self.terms.items() if len(k) in ds}, self.d)

    def truncated(self, max_degree: int) -> "PolyHamiltonian":
        return PolyHamiltonian._raw({k: v for k, v in self.terms.items() if len(k) <= max_degree},
                                    self.d)

    def restricted(self, keys) -> "PolyHamiltonian":
        return PolyHamiltonian._raw({k: self.terms[k] for k in keys if k in self.terms}, self.d)

    def site_radius(self) -> int:
        """Smallest integer N with every site of the polynomial inside ``|j| <= N``."""
        r2 = max((_site_radius_sq(k) for k in self.terms), default=0)
        root = math.isqrt(r2)
        return root if root * root == r2 else root + 1

    def tensor_coefficient(self, key) -> complex:
        key = _key(key)
        return self[key] / n_orderings(key)

    def sup_by_grade(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for k, v in self.terms.items():
            t = float(abs(v)) / n_orderings(k)
            if t > out.get(len(k), 0.0):
                out[len(k)] = t
        return out

    def reality_defect(self) -> float:
        worst = 0.0
        for k, v in self.terms.items():
            w = self.terms.get(k.bar(), 0j)
            gap = abs(v - w.conjugate())
            if gap:
                worst = max(worst, gap / max(abs(v), abs(w)))
        return worst

    def is_real(self, tol: float = REALITY_TOL) -> bool:
        return self.reality_defect() <= tol

    # linear structure ---------------------------------------------------------
    def __add__(self, other: "PolyHamiltonian") -> "PolyHamiltonian":
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, 0) + v
        return PolyHamiltonian._raw(out, self.d if self.d is not None else other.d)

    def __sub__(self, other: "PolyHamiltonian") -> "PolyHamiltonian":
        return self + other.scaled(-1.0)

    def __neg__(self):
        return self.scaled(-1.0)

    def scaled(self, c: complex) -> "PolyHamiltonian":
        return PolyHamiltonian._raw({k: c * v for k, v in self.terms.items()}, self.d)

    def __mul__(self, c):
        if isinstance(c, (int, float)):
            return self.scaled(float(c))
        return NotImplemented

    __rmul__ = __mul__

    def sup_coefficient(self) -> float:
        return max((abs(v) for v in self.terms.values()), default=0.0)

    # evaluation -------------------------------------------------------------
    def compiled(self, box: Box | None = None) -> "ArrayPoly":
        if box is None:
            box = get_box(self.d or 1, max(self.site_radius(), 1))
        hit = self._compiled.get(id(box))
        if hit is None or hit.box is not box:
            hit = ArrayPoly.from_poly(self, box)
            self._compiled[id(box)] = hit
        return hit

    def evaluate(self, u: ModeSequence) -> complex:
        box = _box_for(self, u)
        return self.compiled(box).evaluate(box.sequence_to_array(u))

    # serialisation ----------------------------------------------------------
    def to_jsonl(self) -> str:
        lines = []
        for k in sorted(self.terms, key=lambda k: [(e.j, -e.sigma) for e in k]):
            v = self.terms[k]
            lines.append(json.dumps({"sites": k.to_json(), "re": v.real, "im": v.imag}))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str, d: int | None = None) -> "PolyHamiltonian":
        terms = {}
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                terms[MultiIndex.from_json(rec["sites"])] = complex(rec["re"], rec["im"])
        return cls(terms, d)


def _box_for(P, u: ModeSequence | None) -> Box:
    N = max(P.site_radius() if isinstance(P, PolyHamiltonian) else P.N, u.N if u is not None else 1, 1)
    d = P.d if P.d is not None else (u.d if u is not None else 1)
    return get_box(d, N)


class ArrayPoly:
    """Polynomial as per-degree arrays of signed ids plus monomial coefficients."""

    def __init__(self, box: Box, blocks: dict[int, tuple[np.ndarray, np.ndarray]]):
        self.box = box
        self.blocks = {r: (np.ascontiguousarray(ids, dtype=np.int64), np.asarray(c, dtype=complex))
                       for r, (ids, c) in blocks.items() if len(c)}
        self._sign = np.where(np.arange(2 * box.n) % 2 == 0, 1.0, -1.0)
        self._bar = np.arange(2 * box.n) ^ 1

    @classmethod
    def from_poly(cls, P: PolyHamiltonian, box: Box) -> "ArrayPoly":
        rows: dict[int, list] = defaultdict(list)
        coefs: dict[int, list] = defaultdict(list)
        for k, v in P.items():
            rows[len(k)].append(box.ids_from_key(k))
            coefs[len(k)].append(v)
        return cls(box, {r: (np.array(rows[r]), np.array(coefs[r])) for r in rows})

    def to_poly(self, check: bool = True) -> PolyHamiltonian:
        return PolyHamiltonian.from_ids(self.box, self.blocks, check=check)

    def __len__(self):
        return sum(len(c) for _, c in self.blocks.values())

    def evaluate(self, u: np.ndarray) -> complex:
        total = 0j
        for ids, coef in self.blocks.values():
            total += np.dot(coef, np.prod(u[ids], axis=1))
        return complex(total)

    def gradient(self, u: np.ndarray) -> np.ndarray:
        """``dP/du_J`` for every signed id."""
        n = len(u)
        grad = np.zeros(n, dtype=complex)
        for ids, coef in self.blocks.values():
            vals = u[ids]
            r = ids.shape[1]
            prefix = np.ones((len(coef), r + 1), dtype=complex)
            for q in range(r):
                prefix[:, q + 1] = prefix[:, q] * vals[:, q]
            suffix = np.ones(len(coef), dtype=complex)
            for p in range(r - 1, -1, -1):
                part = coef * prefix[:, p] * suffix
                grad += np.bincount(ids[:, p], weights=part.real, minlength=n)
                grad += 1j * np.bincount(ids[:, p], weights=part.imag, minlength=n)
                suffix = suffix * vals[:, p]
        return grad

    def vector_field(self, u: np.ndarray) -> np.ndarray:
        grad = self.gradient(u)
        return 1j * self._sign * grad[self._bar]

    def sup_by_grade(self) -> dict[int, float]:
        return {r: float(np.max(np.abs(c) / orderings_rows(ids))) for r, (ids, c) in self.blocks.items()}

    def r_norm(self, R: float) -> float:
        return sum(s * R ** r for r, s in self.sup_by_grade().items())


# ---------------------------------------------------------------------------
# norms and brackets


def r_norm(P, R: float) -> float:
    """``sum_l sup_{|K| = l} |tensor coefficient| * R^l``."""
    if isinstance(P, ArrayPoly):
        return P.r_norm(R)
    return float(sum(s * R ** l for l, s in P.sup_by_grade().items()))


class QuadraticDiagonal:
    """``H0 = sum_{|j| <= N} omega_j u_(j,+) u_(j,-)`` without stored terms."""

    def __init__(self, model: FrequencyModel, N: int):
        self.model = model
        self.N = N
        self.d = model.d
        box = get_box(model.d, N)
        self.box = box
        allowed = np.ones(box.n, dtype=bool)
        if model.excludes_zero:
            allowed &= np.any(box.sites != 0, axis=1)
        w = np.zeros(box.n)
        w[allowed] = model.omega_array(box.sites[allowed])
        self.allowed = allowed
        self.omega_sites = w
        self._omega = {box.site(i): float(w[i]) for i in range(box.n) if allowed[i]}

    def omega(self, j) -> float:
        return self._omega[tuple(j)]

    def divisor(self, key) -> float:
        return sum(e.sigma * self._omega[e.j] for e in key)

    def evaluate(self, u: ModeSequence) -> complex:
        return sum(self._omega[k.j] * u[k] * u[k.bar()] for k in u if k.sigma > 0 and k.j in self._omega)

    def vector_field_array(self, u: np.ndarray, box: Box | None = None) -> np.ndarray:
        box = box or self.box
        w = np.zeros(box.n)
        for i in range(box.n):
            w[i] = self._omega.get(box.site(i), 0.0)
        sign = np.where(np.arange(2 * box.n) % 2 == 0, 1.0, -1.0)
        return 1j * sign * np.repeat(w, 2) * u

    def as_poly(self) -> PolyHamiltonian:
        terms = {}
        for j, w in self._omega.items():
            terms[MultiIndex([signed(j, 1), signed(j, -1)])] = w
        return PolyHamiltonian(terms, self.d)


def _key_ids(key, index: dict) -> tuple:
    return tuple(index[e] for e in key)


def poisson_bracket(P, Q: PolyHamiltonian, max_degree: int | None = None) -> PolyHamiltonian:
    """``{P; Q}`` with exactly rounded accumulation (order independent).

    ``max_degree`` skips every product whose degree would exceed it.
    """
    if isinstance(P, QuadraticDiagonal):
        return PolyHamiltonian._raw({k: 1j * P.divisor(k) * v for k, v in Q.items()
                                     if max_degree is None or len(k) <= max_degree}, Q.d)
    if isinstance(Q, QuadraticDiagonal):
        return poisson_bracket(Q, P, max_degree).scaled(-1.0)
    if P.d is not None and Q.d is not None and P.d != Q.d:
        raise ValueError("dimension mismatch in Poisson bracket")
    if max_degree is not None and P and Q:
        lo_p, lo_q = min(P.grades), min(Q.grades)
        P = P.restricted([k for k in P if len(k) + lo_q - 2 <= max_degree])
        Q = Q.restricted([k for k in Q if len(k) + lo_p - 2 <= max_degree])
    if not P or not Q:
        return PolyHamiltonian({}, P.d or Q.d)
    # integer ids for speed: + before - at each site, sites in canonical order
    signed_all = sorted({e for k in P for e in k} | {e for k in Q for e in k},
                        key=lambda e: (e.j, -e.sigma))
    index = {e: i for i, e in enumerate(signed_all)}
    qidx: dict[int, list] = defaultdict(list)
    cap = math.inf if max_degree is None else max_degree
    for kb, cb in Q.items():
        ib = _key_ids(kb, index)
        run = 0
        for pos, x in enumerate(ib):
            run = run + 1 if pos and ib[pos - 1] == x else 1
            last = pos == len(ib) - 1 or ib[pos + 1] != x
            if last:
                rest = ib[:pos] + ib[pos + 1:]
                qidx[x].append((rest, cb, run))
    bar_of = [index.get(e.bar(), -1) for e in signed_all]
    acc_re: dict[tuple, list] = defaultdict(list)
    acc_im: dict[tuple, list] = defaultdict(list)
    for ka, ca in P.items():
        ia = _key_ids(ka, index)
        room = cap - len(ia) + 2
        run = 0
        for pos, x in enumerate(ia):
            run = run + 1 if pos and ia[pos - 1] == x else 1
            if not (pos == len(ia) - 1 or ia[pos + 1] != x):
                continue
            xb = bar_of[x]
            if xb < 0 or xb not in qidx:
                continue
            rest_a = ia[:pos] + ia[pos + 1:]
            sigma = signed_all[x].sigma
            for rest_b, cb, mb in qidx[xb]:
                if len(rest_b) + 1 > room:
                    continue
                val = (1j * -sigma) * (run * mb) * (ca * cb)
                key = tuple(sorted(rest_a + rest_b))
                acc_re[key].append(val.real)
                acc_im[key].append(val.imag)
    terms = {}
    for key, re_parts in acc_re.items():
        v = complex(math.fsum(re_parts), math.fsum(acc_im[key]))
        if v != 0 and key:
            terms[MultiIndex.from_sorted(tuple(signed_all[i] for i in key))] = v
    return PolyHamiltonian._raw(terms, P.d if P.d is not None else Q.d)


def bracket_bound(P: PolyHamiltonian, Q: PolyHamiltonian, R: float) -> float:
    """Right side of the bracket estimate, summed grade by grade."""
    total = 0.0
    sp, sq = P.sup_by_grade(), Q.sup_by_grade()
    for r1, a in sp.items():
        for r2, b in sq.items():
            total += 2 * r1 * r2 / R ** 2 * a * R ** r1 * b * R ** r2
    return total


# ---------------------------------------------------------------------------
# vector fields


def vector_field(P, u: ModeSequence) -> ModeSequence:
    """Hamiltonian vector field ``X_(j,s) = s i dP/du_(j,-s)`` at ``u``."""
    if isinstance(P, QuadraticDiagonal):
        box = get_box(P.d, max(P.N, u.N))
        vec = P.vector_field_array(box.sequence_to_array(u), box)
        return box.array_to_sequence(vec, box.N)
    box = _box_for(P, u)
    vec = P.compiled(box).vector_field(box.sequence_to_array(u))
    return box.array_to_sequence(vec, box.N)


def perp_degree_split(P: PolyHamiltonian, N: float) -> list[PolyHamiltonian]:
    """Parts of ``P`` indexed by the number of entries with ``|j| > N``."""
    buckets: dict[int, dict] = defaultdict(dict)
    for k, v in P.items():
        buckets[k.count_large(N)][k] = v
    top = max(buckets, default=0)
    return [PolyHamiltonian._raw(buckets.get(i, {}), P.d) for i in range(top + 1)]


def eff_and_perp(P: PolyHamiltonian, N: float) -> tuple[PolyHamiltonian, PolyHamiltonian]:
    """``(P_eff, R_perp)``: perpendicular degree at most 2, and at least 3."""
    parts = perp_degree_split(P, N)
    eff = PolyHamiltonian({}, P.d)
    perp = PolyHamiltonian({}, P.d)
    for i, part in enumerate(parts):
        if i <= 2:
            eff = eff + part
        else:
            perp = perp + part
    return eff, perp


def perp_quadratic_block(P: PolyHamiltonian, u_low: ModeSequence, N: float):
    """Matrix ``A[(j1,+),(j2,-)]`` of the part of ``P`` quadratic in the high modes.

    ``P_2(u) = sum A_{J1 J2} u_J1 u_J2`` with ``A`` symmetric, evaluated at the low
    modes ``u_low``.  Returns ``(sites, A)`` with rows ``(j1,+)`` and columns ``(j2,-)``.
    """
    parts = perp_degree_split(P, N)
    block = parts[2] if len(parts) > 2 else PolyHamiltonian({}, P.d)
    sites = sorted({e.j for k in block for e in k if sum(x * x for x in e.j) > N * N})
    pos = {j: i for i, j in enumerate(sites)}
    A = np.zeros((len(sites), len(sites)), dtype=complex)
    n2 = N * N
    for k, v in block.items():
        high = [e for e in k if sum(x * x for x in e.j) > n2]
        low = [e for e in k if sum(x * x for x in e.j) <= n2]
        val = v
        for e in low:
            val *= u_low[e]
        J1, J2 = high
        if J1.sigma == J2.sigma:
            continue
        plus, minus = (J1, J2) if J1.sigma > 0 else (J2, J1)
        A[pos[plus.j], pos[minus.j]] += val / 2
    return sites, A


# ---------------------------------------------------------------------------
# Taylor expansions of the model nonlinearities


def torus_volume(model: FrequencyModel) -> float:
    """``(2 pi)^d sqrt(det g)`` for the metric carried by the model."""
    g = model.metric
    return (2 * math.pi) ** g.d * math.sqrt(float(g.det()))


def _rows_by_sign(ids: np.ndarray, n_plus: int) -> np.ndarray:
    return (ids % 2 == 0).sum(axis=1) == n_plus


def expand_nonlinearity(model: FrequencyModel, fcoeffs, rmax: int, N: int,
                        budget: int | None = None, as_arrays: bool = False):
    """Momentum-zero Taylor expansion of the nonlinear Hamiltonian on the box ``|j| <= N``.

    NLS: ``f(x) = sum_k fcoeffs[k] x^k`` with ``fcoeffs[0] = 0``; the Hamiltonian
    density is ``F(|psi|^2)`` with ``F' = f``.  Beam: ``F(psi) = sum_k fcoeffs[k] psi^k``
    with ``fcoeffs[0..2] = 0``.  Hydrodynamic: ``fcoeffs[k] = p^(k)(m)/k!`` with
    ``fcoeffs[0] = 0`` and ``fcoeffs[1] = p'(m)``.
    """
    from .resonance import all_zero_momentum_ids, DEFAULT_BUDGET

    fc = [float(x) for x in fcoeffs]
    box = get_box(model.d, N)
    budget = DEFAULT_BUDGET if budget is None else budget
    if isinstance(model, QHDModel):
        P = _expand_qhd(model, fc, rmax, N)
        return P.compiled(box) if as_arrays else P
    vol = torus_volume(model)
    blocks = {}
    if isinstance(model, (NLSModel, PlaneWaveModel)):
        if fc and fc[0] != 0:
            raise ValueError("NLS nonlinearity needs f(0) = 0")
        for k in range(1, len(fc)):
            deg = 2 * (k + 1)
            if fc[k] == 0 or deg > rmax:
                continue
            ids = all_zero_momentum_ids(box, deg, budget=budget)
            ids = ids[_rows_by_sign(ids, k + 1)]
            # n_+ n_- = ((k+1)!)^2 / prod(mult!)
            mult = orderings_rows(ids) * math.factorial(k + 1) ** 2 // math.factorial(deg)
            coef = fc[k] / (k + 1) * vol ** (-k) * mult
            blocks[deg] = (ids, coef.astype(complex))
    elif isinstance(model, BeamModel):
        if any(fc[:3]):
            raise ValueError("beam nonlinearity must vanish to second order")
        w = model.omega_array(box.sites)
        amp = 1.0 / np.sqrt(2.0 * w)                 # omega^(-1/2) / sqrt(2) per site
        for k in range(3, len(fc)):
            if fc[k] == 0 or k > rmax:
                continue
            ids = all_zero_momentum_ids(box, k, budget=budget)
            coef = fc[k] * vol ** (1 - k / 2) * orderings_rows(ids) * np.prod(amp[ids >> 1], axis=1)
            blocks[k] = (ids, coef.astype(complex))
    else:
        raise TypeError(f"no expansion for model {type(model).__name__}")
    arr = ArrayPoly(box, blocks)
    return arr if as_arrays else arr.to_poly(check=False)


# hydrodynamic model -----------------------------------------------------------


def bogoliubov_coefficients(model: QHDModel, sites: np.ndarray):
    """Real ``(a, b)`` with ``z_j = a w_j + b conj(w_{-j})`` diagonalising the quadratic part.

    ``a^2 - b^2 = 1``; the diagonal frequency in units of ``hbar/2`` is ``omega_j``.
    """
    hbar = float(model.hbar)
    nsq = model.metric.norm_sq_array(sites)
    eps = hbar / 2 * nsq
    kappa = float(model.m) * float(model.pprime) / hbar
    Om = np.sqrt(eps * eps + 2 * eps * kappa)
    Ap = Om + eps + kappa
    s = np.sqrt(2 * Om * Ap)
    return Ap / s, -kappa / s


class _Field:
    """Field as ``{momentum: {sorted id tuple: coefficient}}`` graded by degree."""

    @staticmethod
    def mul(A: dict, B: dict, rmax: int) -> dict:
        out: dict = defaultdict(lambda: defaultdict(complex))
        for ka, pa in A.items():
            for kb, pb in B.items():
                k = tuple(x + y for x, y in zip(ka, kb))
                target = out[k]
                for ma, ca in pa.items():
                    for mb, cb in pb.items():
                        if len(ma) + len(mb) <= rmax:
                            target[tuple(sorted(ma + mb))] += ca * cb
        return {k: dict(v) for k, v in out.items()}

    @staticmethod
    def add(A: dict, B: dict, scale: complex = 1.0) -> dict:
        out = {k: dict(v) for k, v in A.items()}
        for k, p in B.items():
            t = out.setdefault(k, {})
            for m, c in p.items():
                t[m] = t.get(m, 0) + scale * c
        return out


def _expand_qhd(model: QHDModel, fc: list, rmax: int, N: int) -> PolyHamiltonian:
    if not fc or fc[0] != 0:
        raise ValueError("hydrodynamic expansion needs fcoeffs[0] = p(m) = 0")
    if len(fc) < 2 or abs(fc[1] - float(model.pprime)) > 1e-12 * max(1.0, abs(fc[1])):
        raise ValueError("fcoeffs[1] must equal the model's p'(m)")
    box = get_box(model.d, N)
    d = model.d
    zero = (0,) * d
    origin = box.index(zero)
    sites = [i for i in range(box.n) if i != origin]
    a, b = bogoliubov_coefficients(model, box.sites[sites])
    m = float(model.m)
    hbar = float(model.hbar)
    # zeta(x) = sum_j z_j e^{ijx};  z_j = a_j u_(j,+) + b_j u_(-j,-)
    zeta, zbar = {}, {}
    for n, s in enumerate(sites):
        j = box.site(s)
        mj = box.index(tuple(-x for x in j))
        zeta[j] = {(2 * s,): a[n], (2 * mj + 1,): b[n]}
        zbar[tuple(-x for x in j)] = {(2 * s + 1,): a[n], (2 * mj,): b[n]}
    S = {}
    for j, p in zeta.items():
        q = zbar[tuple(-x for x in j)]
        prod = _Field.mul({j: p}, {tuple(-x for x in j): q}, rmax)
        S = _Field.add(S, prod)
    # alpha = sqrt(m - S) = sqrt(m) * sum_n binom(1/2, n) (-S/m)^n
    zsum = _Field.add(zeta, zbar)
    alpha = {zero: {(): math.sqrt(m)}}
    Spow = {zero: {(): 1.0}}
    for n in range(1, rmax // 2 + 1):
        Spow = _Field.mul(Spow, S, rmax)
        coef = math.sqrt(m) * _binom_half(n) * (-1.0 / m) ** n
        alpha = _Field.add(alpha, Spow, coef)
    w = _Field.mul(alpha, zsum, rmax)
    w = _Field.add(w, _Field.mul(zeta, zbar, rmax))
    w = _Field.add(w, S, -1.0)
    # P(m + w) - P(m) - p(m) w = sum_k fc[k] w^(k+1) / (k+1)
    total: dict = {}
    wpow = w
    for k in range(1, len(fc)):
        wpow = _Field.mul(wpow, w, rmax)
        if k + 1 > rmax:
            break
        if fc[k]:
            total = _Field.add(total, {zero: wpow.get(zero, {})}, fc[k] / (k + 1))
    scale = (1.0 / hbar) / (hbar / 2)
    terms = {}
    for mono, c in total.get(zero, {}).items():
        if len(mono) >= 3 and abs(c) > 0:
            key = box.key_from_ids(mono)
            terms[key] = terms.get(key, 0) + c * scale
    return PolyHamiltonian.realified(terms, d)


def _binom_half(n: int) -> float:
    out = 1.0
    for k in range(n):
        out *= (0.5 - k) / (k + 1)
    return out


def qhd_quadratic_part(model: QHDModel, N: int) -> PolyHamiltonian:
    """Quadratic part of the reduced Hamiltonian in Bogoliubov variables, units of hbar/2.

    Used to confirm that the transformation diagonalises to ``sum omega_j |u_j|^2``.
    """
    box = get_box(model.d, N)
    origin = box.index((0,) * model.d)
    sites = [i for i in range(box.n) if i != origin]
    a, b = bogoliubov_coefficients(model, box.sites[sites])
    hbar = float(model.hbar)
    kappa = float(model.m) * float(model.pprime) / hbar
    nsq = model.metric.norm_sq_array(box.sites[sites])
    terms: dict = defaultdict(complex)
    coef_of = {box.site(s): (a[n], b[n], nsq[n]) for n, s in enumerate(sites)}
    for j, (aj, bj, n2) in coef_of.items():
        mj = tuple(-x for x in j)
        # z_j = a u_(j,+) + b u_(-j,-);  conj z_j = a u_(j,-) + b u_(-j,+)
        zj = [(signed(j, 1), aj), (signed(mj, -1), bj)]
        zbj = [(signed(j, -1), aj), (signed(mj, 1), bj)]
        zmj = [(signed(mj, 1), aj), (signed(j, -1), bj)]
        zbmj = [(signed(mj, -1), aj), (signed(j, 1), bj)]
        eps = hbar / 2 * n2
        for (x, cx) in zj:
            for (y, cy) in zbj:
                terms[MultiIndex([x, y])] += (eps + kappa) * cx * cy
        for (x, cx) in zj:
            for (y, cy) in zmj:
                terms[MultiIndex([x, y])] += kappa / 2 * cx * cy
        for (x, cx) in zbj:
            for (y, cy) in zbmj:
                terms[MultiIndex([x, y])] += kappa / 2 * cx * cy
    scale = 2.0 / hbar
    return PolyHamiltonian({k: v * scale for k, v in terms.items() if abs(v) > 1e-15}, model.d,
                           check=False)


# ---------------------------------------------------------------------------
# tame estimate for the quartic NLS field


def nls_trilinear_field(coeff: float, vol: float, u1, u2, u3, M: int):
    """Symmetric trilinear vector field of the quartic NLS term, pseudo-spectrally.

    Inputs are dense ``(+)``-component arrays on the grid of half-width ``M`` in
    u-normalisation; real sequences are implied for the ``(-)`` components.
    """
    scale = np.sqrt(vol)
    f = [np.fft.ifftn(np.fft.ifftshift(x)) * x.size / scale for x in (u1, u2, u3)]
    c = [np.conj(x) for x in f]
    prod = c[0] * f[1] * f[2] + f[0] * c[1] * f[2] + f[0] * f[1] * c[2]
    out = np.fft.fftshift(np.fft.fftn(prod)) / prod.size * scale
    return 1j * coeff / 3.0 * out


def tame_ratios(coeff: float, vol: float, N: int, s: float, s0: float, samples: int,
                seed: int = 0, d: int = 2, decay: float = 2.5) -> np.ndarray:
    """Ratios of ``||X(u1,u2,u3)||_s`` to the tame product bound over random inputs."""
    rng = np.random.default_rng(seed)
    M = 3 * N + 1
    axes = np.arange(-M, M + 1)
    grid = np.stack(np.meshgrid(*([axes] * d), indexing="ij"), axis=-1)
    norm = np.sqrt((grid * grid).sum(axis=-1))
    inside = norm <= N
    w_s = (1 + norm) ** s
    w_s0 = (1 + norm) ** s0
    sup = coeff / (12 * vol)
    out = np.empty(samples)
    for t in range(samples):
        us = []
        for _ in range(3):
            z = rng.standard_normal(norm.shape) + 1j * rng.standard_normal(norm.shape)
            us.append(np.where(inside, z / (1 + norm) ** decay, 0))
        X = nls_trilinear_field(coeff, vol, *us, M)
        # both signed components contribute equally for real sequences
        lhs = np.sqrt(2 * np.sum(w_s ** 2 * np.abs(X) ** 2))
        ns = [np.sqrt(2 * np.sum(w_s ** 2 * np.abs(x) ** 2)) for x in us]
        n0 = [np.sqrt(2 * np.sum(w_s0 ** 2 * np.abs(x) ** 2)) for x in us]
        bound = sum(ns[l] * math.prod(n0[q] for q in range(3) if q != l) for l in range(3))
        out[t] = lhs / (sup * bound)
    return out
