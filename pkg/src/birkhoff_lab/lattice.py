"""Exact index algebra on the signed lattice, metrics over Q(sqrt D), mode sequences.

A signed index is a lattice site ``j`` together with a sign ``sigma``; the sign
tells the variable ``u_(j,+)`` apart from its partner ``u_(j,-)``.  Multi-indices
are canonical sorted tuples of signed indices, so they can be used directly as
dictionary keys for polynomial coefficients.
"""

from __future__ import annotations

import ast
import functools
import json
import math
from fractions import Fraction
from typing import Iterable, Mapping, NamedTuple, Sequence

import mpmath
import numpy as np


# ---------------------------------------------------------------------------
# quadratic field scalars


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, (float, np.floating)):
        if not math.isfinite(x):
            raise ValueError(f"non-finite value {x!r}")
        return Fraction(float(x))
    if isinstance(x, str):
        return Fraction(x.strip())
    raise TypeError(f"cannot read {type(x).__name__} as a rational")


def _squarefree_split(D: int) -> tuple[int, int]:
    """Write D = f**2 * core with core square-free."""
    f, core, p = 1, D, 2
    while p * p <= core:
        while core % (p * p) == 0:
            core //= p * p
            f *= p
        p += 1
    return f, core


class QuadScalar:
    """Exact number ``a + b*sqrt(D)`` with rational ``a`` and ``b``.

    Rational values are stored with ``D = 0`` so they combine with any field.
    Mixing two genuinely irrational values from different fields raises.
    """

    __slots__ = ("a", "b", "D")

    def __init__(self, a=0, b=0, D: int = 0):
        a = _as_fraction(a)
        b = _as_fraction(b)
        D = int(D)
        if D < 0:
            raise ValueError("D must be non-negative")
        if b and D:
            f, core = _squarefree_split(D)
            b *= f
            D = core
            if D == 1:
                a += b
                b = Fraction(0)
        if not b or not D:
            b = Fraction(0)
            D = 0
        self.a = a
        self.b = b
        self.D = D

    # construction helpers
    @classmethod
    def coerce(cls, x) -> "QuadScalar":
        if isinstance(x, QuadScalar):
            return x
        if isinstance(x, str):
            return parse_quad(x)
        return cls(x)

    @classmethod
    def sqrt(cls, D: int) -> "QuadScalar":
        return cls(0, 1, D)

    @property
    def is_rational(self) -> bool:
        return self.b == 0

    def _field(self, other: "QuadScalar") -> int:
        if self.D and other.D and self.D != other.D:
            raise ValueError(f"mixed quadratic fields sqrt({self.D}) and sqrt({other.D})")
        return self.D or other.D

    # arithmetic
    def __add__(self, other):
        other = _coerce_or_none(other)
        if other is None:
            return NotImplemented
        return QuadScalar(self.a + other.a, self.b + other.b, self._field(other))

    __radd__ = __add__

    def __neg__(self):
        return QuadScalar(-self.a, -self.b, self.D)

    def __sub__(self, other):
        other = _coerce_or_none(other)
        if other is None:
            return NotImplemented
        return QuadScalar(self.a - other.a, self.b - other.b, self._field(other))

    def __rsub__(self, other):
        other = _coerce_or_none(other)
        if other is None:
            return NotImplemented
        return other - self

    def __mul__(self, other):
        other = _coerce_or_none(other)
        if other is None:
            return NotImplemented
        D = self._field(other)
        return QuadScalar(self.a * other.a + self.b * other.b * D,
                          self.a * other.b + self.b * other.a, D)

    __rmul__ = __mul__

    def conjugate_field(self) -> "QuadScalar":
        """Galois conjugate a - b*sqrt(D)."""
        return QuadScalar(self.a, -self.b, self.D)

    def field_norm(self) -> Fraction:
        return self.a * self.a - self.b * self.b * self.D

    def __truediv__(self, other):
        other = _coerce_or_none(other)
        if other is None:
            return NotImplemented
        n = other.field_norm()
        if n == 0:
            raise ZeroDivisionError("division by zero in Q(sqrt D)")
        return self * other.conjugate_field() * QuadScalar(1 / n)

    def __rtruediv__(self, other):
        other = _coerce_or_none(other)
        if other is None:
            return NotImplemented
        return other / self

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            return NotImplemented
        out = QuadScalar(1)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    # exact sign and ordering
    def sign(self) -> int:
        sa = (self.a > 0) - (self.a < 0)
        sb = (self.b > 0) - (self.b < 0)
        if sb == 0 or sa == sb:
            return sa or sb
        if sa == 0:
            return sb
        # opposite signs: the larger square wins
        lhs = self.a * self.a
        rhs = self.b * self.b * self.D
        return sa if lhs > rhs else sb

    def __bool__(self):
        return bool(self.a) or bool(self.b)

    def __eq__(self, other):
        other = _coerce_or_none(other)
        if other is None:
            return NotImplemented
        return self.a == other.a and self.b == other.b and (self.b == 0 or self.D == other.D)

    def __hash__(self):
        if self.b == 0:
            return hash(self.a)
        return hash((self.a, self.b, self.D))

    def _cmp(self, other):
        other = _coerce_or_none(other)
        if other is None:
            return None
        return (self - other).sign()

    def __lt__(self, other):
        c = self._cmp(other)
        return NotImplemented if c is None else c < 0

    def __le__(self, other):
        c = self._cmp(other)
        return NotImplemented if c is None else c <= 0

    def __gt__(self, other):
        c = self._cmp(other)
        return NotImplemented if c is None else c > 0

    def __ge__(self, other):
        c = self._cmp(other)
        return NotImplemented if c is None else c >= 0

    def __abs__(self):
        return -self if self.sign() < 0 else self

    # conversions
    def __float__(self):
        if self.b == 0:
            return float(self.a)
        root = math.sqrt(self.D)
        if (self.a >= 0) == (self.b >= 0):
            return float(self.a) + float(self.b) * root
        # avoid cancellation: a + b r = (a^2 - b^2 D) / (a - b r)
        return float(self.field_norm()) / (float(self.a) - float(self.b) * root)

    def to_mpf(self, dps: int = 40) -> mpmath.mpf:
        with mpmath.workdps(dps):
            val = mpmath.mpf(self.a.numerator) / self.a.denominator
            if self.b:
                val += mpmath.mpf(self.b.numerator) / self.b.denominator * mpmath.sqrt(self.D)
            return +val

    def to_json(self) -> dict:
        return {"a": _frac_str(self.a), "b": _frac_str(self.b), "D": self.D}

    @classmethod
    def from_json(cls, obj) -> "QuadScalar":
        if isinstance(obj, Mapping):
            return cls(Fraction(obj["a"]), Fraction(obj["b"]), int(obj["D"]))
        return cls.coerce(obj)

    def __repr__(self):
        if self.b == 0:
            return f"QuadScalar({_frac_str(self.a)})"
        return f"QuadScalar({_frac_str(self.a)} + {_frac_str(self.b)}*sqrt({self.D}))"

    def __str__(self):
        if self.b == 0:
            return _frac_str(self.a)
        return f"{_frac_str(self.a)}+{_frac_str(self.b)}*sqrt({self.D})"


def _frac_str(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def _coerce_or_none(x):
    if isinstance(x, QuadScalar):
        return x
    if isinstance(x, (int, Fraction, np.integer)):
        return QuadScalar(x)
    return None


_ALLOWED_BIN = {ast.Add: "__add__", ast.Sub: "__sub__", ast.Mult: "__mul__", ast.Div: "__truediv__"}


def parse_quad(text: str) -> QuadScalar:
    """Parse expressions such as ``"3/2"``, ``"1+sqrt(2)"`` or ``"sqrt(2)/10"``.

    Decimal literals are read exactly (``"0.1"`` is 1/10).
    """

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            src = ast.get_source_segment(source, node)
            return QuadScalar(Fraction(src) if src else node.value)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp) and type(node.op) in _ALLOWED_BIN:
            return getattr(ev(node.left), _ALLOWED_BIN[type(node.op)])(ev(node.right))
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
                and node.func.id == "sqrt" and len(node.args) == 1):
            arg = ev(node.args[0])
            if not arg.is_rational or arg.a.denominator != 1 or arg.a < 0:
                raise ValueError("sqrt() takes a non-negative integer")
            n = int(arg.a)
            r = math.isqrt(n)
            return QuadScalar(r) if r * r == n else QuadScalar.sqrt(n)
        raise ValueError(f"unsupported expression in {text!r}")

    source = text.strip()
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"cannot parse {text!r}") from exc
    return ev(tree)


# ---------------------------------------------------------------------------
# metrics


def _det(rows: list[list[QuadScalar]]) -> QuadScalar:
    m = [list(r) for r in rows]
    n = len(m)
    det = QuadScalar(1)
    for c in range(n):
        piv = next((r for r in range(c, n) if m[r][c]), None)
        if piv is None:
            return QuadScalar(0)
        if piv != c:
            m[c], m[piv] = m[piv], m[c]
            det = -det
        det = det * m[c][c]
        inv = QuadScalar(1) / m[c][c]
        for r in range(c + 1, n):
            if m[r][c]:
                f = m[r][c] * inv
                m[r] = [m[r][k] - f * m[c][k] for k in range(n)]
    return det


class Metric:
    """Symmetric positive definite form with entries in one quadratic field."""

    __slots__ = ("entries", "d", "D", "_float", "_intform")

    def __init__(self, entries: Sequence[Sequence]):
        rows = tuple(tuple(QuadScalar.coerce(x) for x in row) for row in entries)
        d = len(rows)
        if d == 0 or any(len(r) != d for r in rows):
            raise ValueError("metric must be a non-empty square matrix")
        fields = {x.D for r in rows for x in r if x.D}
        if len(fields) > 1:
            raise ValueError(f"metric entries span several fields {sorted(fields)}")
        for i in range(d):
            for k in range(i):
                if rows[i][k] != rows[k][i]:
                    raise ValueError("metric is not symmetric")
        self.entries = rows
        self.d = d
        self.D = fields.pop() if fields else 0
        for k in range(1, d + 1):
            if _det([list(r[:k]) for r in rows[:k]]).sign() <= 0:
                raise ValueError("metric is not positive definite")
        self._float = np.array([[float(x) for x in r] for r in rows])
        self._intform = None

    @classmethod
    def identity(cls, d: int) -> "Metric":
        return cls([[1 if i == k else 0 for k in range(d)] for i in range(d)])

    @classmethod
    def diagonal(cls, values: Sequence) -> "Metric":
        d = len(values)
        return cls([[values[i] if i == k else 0 for k in range(d)] for i in range(d)])

    def det(self) -> QuadScalar:
        return _det([list(r) for r in self.entries])

    def scaled(self, factor) -> "Metric":
        f = QuadScalar.coerce(factor)
        return Metric([[f * x for x in r] for r in self.entries])

    def as_float(self) -> np.ndarray:
        return self._float.copy()

    def quad_norm_sq(self, j: Sequence[int]) -> QuadScalar:
        if len(j) != self.d:
            raise ValueError(f"index has length {len(j)}, metric dimension is {self.d}")
        total = QuadScalar(0)
        for l in range(self.d):
            if j[l] == 0:
                continue
            for n in range(self.d):
                if j[n]:
                    total = total + self.entries[l][n] * (int(j[l]) * int(j[n]))
        return total

    def norm_sq_array(self, js: np.ndarray) -> np.ndarray:
        js = np.asarray(js, dtype=float)
        return np.einsum("ni,ij,nj->n", js, self._float, js)

    def integer_form(self) -> tuple[int, np.ndarray, np.ndarray]:
        """Return ``(L, A, B)`` so that ``|j|_g^2 = (j.A.j + j.B.j sqrt(D)) / L`` exactly."""
        if self._intform is None:
            dens = [x.a.denominator for r in self.entries for x in r]
            dens += [x.b.denominator for r in self.entries for x in r]
            L = math.lcm(*dens)
            A = np.array([[int(x.a * L) for x in r] for r in self.entries], dtype=object)
            B = np.array([[int(x.b * L) for x in r] for r in self.entries], dtype=object)
            self._intform = (L, A, B)
        return self._intform

    def exact_norm_pairs(self, js: np.ndarray) -> np.ndarray:
        """Integer pairs (A, B) with ``|j|_g^2 = (A + B sqrt D)/L`` for each row of ``js``."""
        L, A, B = self.integer_form()
        js = np.asarray(js, dtype=np.int64)
        big = max([abs(int(x)) for x in A.flat] + [abs(int(x)) for x in B.flat] + [1])
        reach = int(np.abs(js).max()) if js.size else 0
        if big * self.d * self.d * reach * reach < 2 ** 62:
            Ai = A.astype(np.int64)
            Bi = B.astype(np.int64)
            a = np.einsum("ni,ij,nj->n", js, Ai, js)
            b = np.einsum("ni,ij,nj->n", js, Bi, js)
        else:
            jo = js.astype(object)
            a = np.einsum("ni,ij,nj->n", jo, A, jo)
            b = np.einsum("ni,ij,nj->n", jo, B, jo)
        return np.stack([a, b], axis=1)

    def to_json(self) -> dict:
        return {"entries": [[x.to_json() for x in r] for r in self.entries]}

    @classmethod
    def from_json(cls, obj) -> "Metric":
        rows = obj["entries"] if isinstance(obj, Mapping) else obj
        return cls([[QuadScalar.from_json(x) for x in r] for r in rows])

    def __eq__(self, other):
        return isinstance(other, Metric) and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    def __repr__(self):
        return f"Metric({[[str(x) for x in r] for r in self.entries]})"


def quad_norm_sq(g: Metric, j: Sequence[int]) -> QuadScalar:
    """Exact ``g(j, j)``."""
    return g.quad_norm_sq(j)


# ---------------------------------------------------------------------------
# signed indices and multi-indices


class SignedIndex(NamedTuple):
    j: tuple
    sigma: int

    def bar(self) -> "SignedIndex":
        return SignedIndex(self.j, -self.sigma)

    def __repr__(self):
        return f"({self.j},{'+' if self.sigma > 0 else '-'})"


def signed(j: Iterable[int], sigma: int) -> SignedIndex:
    if sigma not in (1, -1):
        raise ValueError("sigma must be +1 or -1")
    return SignedIndex(tuple(int(x) for x in j), int(sigma))


def _order_key(J: SignedIndex):
    return (J.j, -J.sigma)


def _as_signed(x) -> SignedIndex:
    if isinstance(x, SignedIndex):
        return x
    j, s = x
    return signed(j, s)


@functools.lru_cache(maxsize=1 << 18)
def _momentum(entries: tuple) -> tuple:
    d = len(entries[0].j)
    out = [0] * d
    for J in entries:
        for k in range(d):
            out[k] += J.sigma * J.j[k]
    return tuple(out)


class MultiIndex(tuple):
    """Canonically ordered tuple of signed indices (one per unordered multiset)."""

    __slots__ = ()

    def __new__(cls, entries=()):
        items = sorted((_as_signed(e) for e in entries), key=_order_key)
        if not items:
            raise ValueError("a multi-index needs at least one entry")
        d = len(items[0].j)
        if any(len(e.j) != d for e in items):
            raise ValueError("mixed dimensions in multi-index")
        return tuple.__new__(cls, items)

    @classmethod
    def from_sorted(cls, entries) -> "MultiIndex":
        """Wrap entries already in canonical order (no checks)."""
        return tuple.__new__(cls, entries)

    @property
    def degree(self) -> int:
        return len(self)

    @property
    def dim(self) -> int:
        return len(self[0].j)

    @property
    def momentum(self) -> tuple:
        return _momentum(tuple(self))

    def bar(self) -> "MultiIndex":
        return MultiIndex(e.bar() for e in self)

    def count_large(self, N: float) -> int:
        n2 = N * N
        return sum(1 for e in self if sum(x * x for x in e.j) > n2)

    def to_json(self):
        return [[list(e.j), e.sigma] for e in self]

    @classmethod
    def from_json(cls, obj) -> "MultiIndex":
        return cls(signed(j, s) for j, s in obj)

    def __repr__(self):
        return "MultiIndex(" + ",".join(repr(e) for e in self) + ")"


def canonical(entries) -> MultiIndex:
    return MultiIndex(entries)


def momentum(m) -> tuple:
    """Total momentum ``sum sigma_l j_l`` of a multi-index."""
    if not isinstance(m, MultiIndex):
        m = MultiIndex(m)
    return m.momentum


# ---------------------------------------------------------------------------
# mode sequences


def _euclid_sq(j) -> int:
    return sum(int(x) * int(x) for x in j)


class ModeSequence:
    """Sparse finitely supported sequence ``J -> complex`` inside the ball ``|j| <= N``."""

    __slots__ = ("_amp", "N", "d")

    def __init__(self, amplitudes: Mapping | Iterable = (), N: int = 1, d: int | None = None):
        items = amplitudes.items() if isinstance(amplitudes, Mapping) else amplitudes
        amp: dict[SignedIndex, complex] = {}
        for key, val in items:
            J = _as_signed(key)
            v = complex(val)
            if v != 0:
                amp[J] = amp.get(J, 0) + v
        amp = {k: v for k, v in amp.items() if v != 0}
        dims = {len(k.j) for k in amp}
        if d is not None:
            dims.add(d)
        if len(dims) > 1:
            raise ValueError("mixed dimensions in mode sequence")
        if N < 1:
            raise ValueError("truncation radius must be positive")
        n2 = N * N
        for k in amp:
            if _euclid_sq(k.j) > n2:
                raise ValueError(f"mode {k} lies outside |j| <= {N}")
        self._amp = amp
        self.N = int(N)
        self.d = dims.pop() if dims else d

    def __getitem__(self, key) -> complex:
        return self._amp.get(_as_signed(key), 0j)

    def __contains__(self, key):
        return _as_signed(key) in self._amp

    def __iter__(self):
        return iter(self._amp)

    def __len__(self):
        return len(self._amp)

    def items(self):
        return self._amp.items()

    def support(self):
        return set(self._amp)

    def as_dict(self) -> dict:
        return dict(self._amp)

    def __eq__(self, other):
        return isinstance(other, ModeSequence) and self._amp == other._amp

    def __add__(self, other: "ModeSequence") -> "ModeSequence":
        out = dict(self._amp)
        for k, v in other.items():
            out[k] = out.get(k, 0) + v
        return ModeSequence(out, max(self.N, other.N), self.d or other.d)

    def __sub__(self, other: "ModeSequence") -> "ModeSequence":
        return self + other.scaled(-1)

    def scaled(self, c: complex) -> "ModeSequence":
        return ModeSequence({k: c * v for k, v in self._amp.items()}, self.N, self.d)

    def involution(self) -> "ModeSequence":
        """``(I u)_(j,s) = conj(u_(j,-s))``."""
        return ModeSequence({k.bar(): v.conjugate() for k, v in self._amp.items()}, self.N, self.d)

    def with_radius(self, N: int) -> "ModeSequence":
        return ModeSequence(self._amp, N, self.d)

    def to_json(self) -> dict:
        modes = [[list(k.j), k.sigma, [v.real, v.imag]]
                 for k, v in sorted(self._amp.items(), key=lambda kv: _order_key(kv[0]))]
        return {"N": self.N, "d": self.d, "modes": modes}

    @classmethod
    def from_json(cls, obj) -> "ModeSequence":
        amp = {signed(j, s): complex(re, im) for j, s, (re, im) in obj["modes"]}
        return cls(amp, obj["N"], obj.get("d"))

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    def __repr__(self):
        return f"ModeSequence(N={self.N}, {len(self._amp)} modes)"


def sobolev_norm(u: ModeSequence, s: float) -> float:
    total = 0.0
    for k, v in u.items():
        w = (1.0 + math.sqrt(_euclid_sq(k.j))) ** (2 * s)
        total += w * (v.real * v.real + v.imag * v.imag)
    return math.sqrt(total)


def split_low_high(u: ModeSequence, N: float) -> tuple[ModeSequence, ModeSequence]:
    """Partition into the modes with ``|j| <= N`` and the rest."""
    n2 = N * N
    low = {k: v for k, v in u.items() if _euclid_sq(k.j) <= n2}
    high = {k: v for k, v in u.items() if _euclid_sq(k.j) > n2}
    return ModeSequence(low, u.N, u.d), ModeSequence(high, u.N, u.d)


def is_real_sequence(u: ModeSequence, tol: float = 0.0) -> bool:
    for k, v in u.items():
        w = u[k.bar()]
        if abs(v - w.conjugate()) > tol * max(1.0, abs(v)):
            return False
    return True


# ---------------------------------------------------------------------------
# boxes of lattice sites


class Box:
    """All sites with Euclidean ``|j| <= N``, in lexicographic order.

    Signed indices get integer ids ``2*site + (0 for +, 1 for -)``, which
    reproduces the canonical multi-index order.
    """

    def __init__(self, d: int, N: int):
        if d < 1 or N < 0:
            raise ValueError("need d >= 1 and N >= 0")
        self.d = d
        self.N = N
        axes = np.arange(-N, N + 1)
        grid = np.stack(np.meshgrid(*([axes] * d), indexing="ij"), axis=-1).reshape(-1, d)
        keep = (grid * grid).sum(axis=1) <= N * N
        sites = grid[keep]
        order = np.lexsort(sites.T[::-1])
        self.sites = np.ascontiguousarray(sites[order]).astype(np.int64)
        self.sites.setflags(write=False)
        self.n = len(self.sites)
        self.norm_sq = (self.sites * self.sites).sum(axis=1)
        self.euclid = np.sqrt(self.norm_sq.astype(float))
        self.width = 2 * N + 1
        lut = np.full(self.width ** d, -1, dtype=np.int64)
        lut[self._flat(self.sites)] = np.arange(self.n)
        self._lut = lut
        self._tuples = [tuple(int(x) for x in s) for s in self.sites]
        self._index = {t: i for i, t in enumerate(self._tuples)}

    def _flat(self, js: np.ndarray) -> np.ndarray:
        shifted = np.asarray(js) + self.N
        flat = np.zeros(shifted.shape[:-1], dtype=np.int64)
        for k in range(self.d):
            flat = flat * self.width + shifted[..., k]
        return flat

    def lookup(self, js: np.ndarray) -> np.ndarray:
        """Site numbers for integer vectors (``-1`` when outside the ball)."""
        js = np.asarray(js, dtype=np.int64)
        inside = np.all(np.abs(js) <= self.N, axis=-1)
        out = np.full(js.shape[:-1], -1, dtype=np.int64)
        if inside.any():
            out[inside] = self._lut[self._flat(js[inside])]
        return out

    def site(self, i: int) -> tuple:
        return self._tuples[i]

    def index(self, j) -> int:
        return self._index[tuple(int(x) for x in j)]

    def __contains__(self, j) -> bool:
        return tuple(int(x) for x in j) in self._index

    def signed_id(self, J: SignedIndex) -> int:
        return 2 * self._index[J.j] + (0 if J.sigma > 0 else 1)

    def signed_index(self, sid: int) -> SignedIndex:
        return SignedIndex(self._tuples[sid >> 1], -1 if sid & 1 else 1)

    def key_from_ids(self, ids: Iterable[int]) -> MultiIndex:
        return MultiIndex.from_sorted(tuple(self.signed_index(int(i)) for i in sorted(ids)))

    def ids_from_key(self, key: Iterable[SignedIndex]) -> list[int]:
        return [self.signed_id(J) for J in key]

    def sequence_to_array(self, u: ModeSequence) -> np.ndarray:
        vec = np.zeros(2 * self.n, dtype=complex)
        for k, v in u.items():
            vec[self.signed_id(k)] = v
        return vec

    def array_to_sequence(self, vec: np.ndarray, N: int | None = None) -> ModeSequence:
        nz = np.flatnonzero(np.asarray(vec))
        amp = {self.signed_index(int(i)): complex(vec[i]) for i in nz}
        return ModeSequence(amp, N or max(self.N, 1), self.d)


@functools.lru_cache(maxsize=32)
def get_box(d: int, N: int) -> Box:
    return Box(d, N)
