import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from birkhoff_lab.frequencies import BeamModel, NLSModel, QHDModel, sample_potential
from birkhoff_lab.lattice import Metric, ModeSequence, MultiIndex, canonical, get_box, signed
from birkhoff_lab.poly import (ArrayPoly, PolyHamiltonian, QuadraticDiagonal, expand_nonlinearity,
                               n_orderings, nls_trilinear_field, perp_degree_split,
                               poisson_bracket, qhd_quadratic_part, r_norm, torus_volume,
                               vector_field)
from birkhoff_lab.resonance import all_zero_momentum_ids

IDENT = Metric.identity(2)
G_OBLIQUE = Metric([[1, Fraction(1, 5)], [Fraction(1, 5), 2]])


def random_poly(box, r, rng, keep=None):
    ids = all_zero_momentum_ids(box, r)
    if keep is not None:
        ids = ids[rng.choice(len(ids), size=min(keep, len(ids)), replace=False)]
    c = rng.standard_normal(len(ids)) + 1j * rng.standard_normal(len(ids))
    return PolyHamiltonian.realified({box.key_from_ids(x): v for x, v in zip(ids, c)}, box.d)


def real_state(box, rng, scale=0.3):
    z = (rng.standard_normal(box.n) + 1j * rng.standard_normal(box.n)) * scale
    u = np.empty(2 * box.n, complex)
    u[0::2], u[1::2] = z, z.conj()
    return u


# --- oracle: monomials as variable -> power maps, differentiated by hand

def _as_monomials(P):
    return [(Counter(k), v) for k, v in P.items()]


def _diff(mono, var):
    c, pw = mono
    e = c.get(var, 0) if isinstance(c, Counter) else 0
    if not e:
        return None
    out = Counter(c)
    out[var] -= 1
    if not out[var]:
        del out[var]
    return out, pw * e


def bracket_oracle(P, Q):
    acc: dict = {}
    variables = {e.j for k in list(P.keys()) + list(Q.keys()) for e in k}
    mP, mQ = _as_monomials(P), _as_monomials(Q)
    for j in variables:
        plus, minus = signed(j, 1), signed(j, -1)
        for a in mP:
            for b in mQ:
                for va, vb, sgn in ((minus, plus, 1), (plus, minus, -1)):
                    da, db = _diff(a, va), _diff(b, vb)
                    if da is None or db is None:
                        continue
                    key = canonical(list((da[0] + db[0]).elements()))
                    acc[key] = acc.get(key, 0) + 1j * sgn * da[1] * db[1]
    return {k: v for k, v in acc.items() if abs(v) > 1e-14}


def test_r_norm_examples():
    key = canonical([signed((1, 0), 1), signed((0, 1), 1), signed((1, 1), -1)])
    P = PolyHamiltonian.from_tensor({key: 2.0, key.bar(): 2.0})
    assert r_norm(P, 0.5) == pytest.approx(0.25)
    assert r_norm(PolyHamiltonian.zero(2), 1.0) == 0
    quart = canonical([signed((1, 0), 1), signed((1, 0), -1), signed((0, 1), 1), signed((0, 1), -1)])
    Q = PolyHamiltonian.from_tensor({key: 1.0, key.bar(): 1.0, quart: 3.0})
    assert r_norm(Q, 1.0) == pytest.approx(4.0)


def test_constructor_enforces_invariants():
    with pytest.raises(ValueError):
        PolyHamiltonian({canonical([signed((1, 0), 1), signed((1, 0), 1)]): 1.0})
    key = canonical([signed((1, 0), 1), signed((0, 1), 1), signed((1, 1), -1)])
    with pytest.raises(ValueError):
        PolyHamiltonian({key: 1.0})                  # bar partner missing
    with pytest.raises(ValueError):
        PolyHamiltonian({key: math.nan, key.bar(): math.nan})


def test_bracket_elementary():
    j = (0, 0)
    number = PolyHamiltonian({canonical([signed(j, 1), signed(j, -1)]): 1.0})
    lin = PolyHamiltonian({canonical([signed(j, 1)]): 1.0}, check=False)
    out = poisson_bracket(number, lin)
    assert out.terms == {canonical([signed(j, 1)]): 1j}


def test_bracket_with_resonant_monomial_vanishes():
    model = NLSModel(IDENT)
    H0 = QuadraticDiagonal(model, 2)
    key = canonical([signed((1, 0), 1), signed((0, 1), 1), signed((1, 1), -1), signed((0, 0), -1)])
    P = PolyHamiltonian.realified({key: 1.0}, 2)
    assert not poisson_bracket(H0, P)


def test_bracket_matches_differentiation_oracle():
    rng = np.random.default_rng(4)
    box = get_box(2, 2)
    P, Q = random_poly(box, 3, rng, 40), random_poly(box, 3, rng, 40)
    got = poisson_bracket(P, Q)
    ref = bracket_oracle(P, Q)
    assert set(got.keys()) == set(ref)
    assert max(abs(got[k] - v) for k, v in ref.items()) < 1e-12


def test_bracket_antisymmetric_and_real():
    rng = np.random.default_rng(8)
    box = get_box(2, 2)
    P, Q = random_poly(box, 3, rng), random_poly(box, 4, rng, 200)
    PQ, QP = poisson_bracket(P, Q), poisson_bracket(Q, P)
    assert not (PQ + QP)
    assert PQ.is_real(1e-12)


def test_diagonal_bracket_matches_materialised_form():
    rng = np.random.default_rng(9)
    box = get_box(2, 2)
    model = NLSModel(G_OBLIQUE, sample_potential(2, 2, 2))
    H0 = QuadraticDiagonal(model, 2)
    P = random_poly(box, 3, rng)
    diff = poisson_bracket(H0, P) - poisson_bracket(H0.as_poly(), P)
    assert diff.sup_coefficient() < 1e-12


def test_vector_field_of_diagonal():
    model = NLSModel(G_OBLIQUE)
    box = get_box(2, 2)
    H0 = QuadraticDiagonal(model, 2)
    u = real_state(box, np.random.default_rng(1))
    X = H0.vector_field_array(u, box)
    w = model.omega_array(box.sites)
    assert np.allclose(X[0::2], 1j * w * u[0::2], rtol=1e-15, atol=0)


def test_quartic_vector_field_finite_differences():
    box = get_box(1, 3)
    key = canonical([signed((1,), 1), signed((2,), 1), signed((3,), -1), signed((0,), -1)])
    P = PolyHamiltonian.realified({key: 0.7 + 0.2j}, 1)
    A = P.compiled(box)
    rng = np.random.default_rng(2)
    u = rng.standard_normal(2 * box.n) + 1j * rng.standard_normal(2 * box.n)
    X = A.vector_field(u)
    h = 1e-5
    for sid in range(2 * box.n):
        e = np.zeros_like(u)
        e[sid ^ 1] = h
        dP = (A.evaluate(u + e) - A.evaluate(u - e)) / (2 * h)
        sigma = 1 if sid % 2 == 0 else -1
        assert X[sid] == pytest.approx(sigma * 1j * dP, rel=1e-6, abs=1e-12)


def test_vector_field_vanishes_at_origin():
    rng = np.random.default_rng(3)
    box = get_box(2, 2)
    P = random_poly(box, 3, rng)
    assert np.all(P.compiled(box).vector_field(np.zeros(2 * box.n, complex)) == 0)
    assert not vector_field(P, ModeSequence({}, 2, 2)).as_dict()


def test_perp_degree_split():
    rng = np.random.default_rng(5)
    box = get_box(2, 3)
    P = random_poly(box, 3, rng, 300)
    parts = perp_degree_split(P, 3)
    assert len(parts[0]) == len(P)
    parts = perp_degree_split(P, 1.5)
    total = PolyHamiltonian.zero(2)
    for n, part in enumerate(parts):
        assert all(k.count_large(1.5) == n for k in part)
        total = total + part
    assert total == P
    key = canonical([signed((2, 1), 1), signed((2, 1), -1), signed((0, 1), 1), signed((0, 1), -1)])
    two = PolyHamiltonian({key: 1.0})
    assert len(perp_degree_split(two, 1.5)[2]) == 1


def _nls_energy_quadrature(model, box, u, fc, n):
    """Integral of F(|psi|^2), F' = f, on an n-point grid exact for the box."""
    vol = torus_volume(model)
    grid = np.zeros((n, n), complex)
    for i, s in enumerate(box.sites):
        grid[s[0] % n, s[1] % n] = u[2 * i]
    psi = np.fft.ifft2(grid) * n * n / math.sqrt(vol)
    y = np.abs(psi) ** 2
    F = sum(c / (k + 1) * y ** (k + 1) for k, c in enumerate(fc))
    return float(np.mean(F)) * vol


def test_nls_expansion_equals_quadrature():
    model = NLSModel(G_OBLIQUE)
    N = 2
    box = get_box(2, N)
    P = expand_nonlinearity(model, [0, 1.0, 0.4], 6, N)
    rng = np.random.default_rng(6)
    for _ in range(3):
        u = real_state(box, rng, 0.2)
        ref = _nls_energy_quadrature(model, box, u, [0, 1.0, 0.4], 6 * N + 1)
        assert P.compiled(box).evaluate(u) == pytest.approx(ref, rel=1e-12)


def test_quartic_coefficient_and_symmetry_factor():
    model = NLSModel(IDENT)
    P = expand_nonlinearity(model, [0, 1.0], 4, 2)
    vol = torus_volume(model)
    key = canonical([signed((1, 0), 1), signed((0, 1), 1), signed((1, 1), -1), signed((0, 0), -1)])
    # four orderings of (+ +)(- -) give the same monomial
    assert P[key] == pytest.approx(4 / (2 * vol), rel=1e-14)
    assert P.tensor_coefficient(key) == pytest.approx(1 / (2 * vol) * 4 / n_orderings(key))


def test_zero_nonlinearity_is_empty():
    assert not expand_nonlinearity(NLSModel(IDENT), [0.0, 0.0], 4, 2)


def _dense(box, u, n):
    grid = np.zeros((n, n), complex)
    for i, s in enumerate(box.sites):
        grid[s[0] % n, s[1] % n] = u[2 * i]
    return grid


def test_nls_field_against_pseudo_spectral():
    model = NLSModel(G_OBLIQUE)
    N, n = 3, 36
    box = get_box(2, N)
    P = expand_nonlinearity(model, [0, 1.5, 0.3], 6, N)
    vol = torus_volume(model)
    rng = np.random.default_rng(7)
    for _ in range(3):
        u = real_state(box, rng, 0.1)
        X = P.compiled(box).vector_field(u)
        psi = np.fft.ifft2(_dense(box, u, n)) * n * n / math.sqrt(vol)
        y = np.abs(psi) ** 2
        F = np.fft.fft2((1.5 * y + 0.3 * y * y) * psi) / (n * n) * math.sqrt(vol)
        ref = np.array([1j * F[s[0] % n, s[1] % n] for s in box.sites])
        assert np.abs(X[0::2] - ref).max() <= 1e-6 * np.abs(ref).max()


def test_beam_field_against_pseudo_spectral():
    model = BeamModel(G_OBLIQUE, 1, 1)
    N, n = 3, 36
    box = get_box(2, N)
    P = expand_nonlinearity(model, [0, 0, 0, 0.7, 0.2], 4, N)
    vol = torus_volume(model)
    w = model.omega_array(box.sites)
    u = real_state(box, np.random.default_rng(8), 0.2)
    X = P.compiled(box).vector_field(u)
    grid = np.zeros((n, n), complex)
    for i, s in enumerate(box.sites):
        grid[s[0] % n, s[1] % n] += u[2 * i] / math.sqrt(2 * w[i])
        grid[(-s[0]) % n, (-s[1]) % n] += u[2 * i + 1] / math.sqrt(2 * w[i])
    psi = np.fft.ifft2(grid) * n * n / math.sqrt(vol)
    assert np.abs(psi.imag).max() < 1e-12
    dF = np.fft.fft2(3 * 0.7 * psi ** 2 + 4 * 0.2 * psi ** 3) / (n * n) * math.sqrt(vol)
    ref = np.array([1j * dF[s[0] % n, s[1] % n] / math.sqrt(2 * w[i])
                    for i, s in enumerate(box.sites)])
    assert np.abs(X[0::2] - ref).max() <= 1e-6 * np.abs(ref).max()


def test_qhd_quadratic_part_is_diagonal_frequency():
    model = QHDModel(IDENT, 1, 1, 1, Fraction(1, 10))
    K2 = qhd_quadratic_part(model, 2)
    for k, v in K2.items():
        a, b = k
        assert a.j == b.j and a.sigma != b.sigma
        assert v.real == pytest.approx(float(model.omega_array(np.array([a.j]))[0]), rel=1e-12)
        assert abs(v.imag) < 1e-14


def test_qhd_expansion_is_real():
    model = QHDModel(IDENT, 1, 1, 1, Fraction(1, 10))
    P = expand_nonlinearity(model, [0, 0.1, 0.05], 3, 2)
    assert P.grades == [3] and P.is_real(1e-12)


def test_array_form_roundtrip():
    rng = np.random.default_rng(10)
    box = get_box(2, 2)
    P = random_poly(box, 4, rng, 100)
    A = ArrayPoly.from_poly(P, box)
    assert A.to_poly() == P
    u = real_state(box, rng)
    seq = box.array_to_sequence(u)
    assert A.evaluate(u) == pytest.approx(P.evaluate(seq), rel=1e-13)
    assert A.r_norm(0.3) == pytest.approx(r_norm(P, 0.3), rel=1e-15)


def test_jsonl_roundtrip():
    rng = np.random.default_rng(11)
    P = random_poly(get_box(2, 2), 3, rng, 50)
    assert PolyHamiltonian.from_jsonl(P.to_jsonl(), 2) == P


def test_trilinear_field_matches_expansion():
    model = NLSModel(IDENT)
    N = 2
    box = get_box(2, N)
    P = expand_nonlinearity(model, [0, 1.0], 4, N)
    u = real_state(box, np.random.default_rng(12))
    M = 3 * N + 1
    dense = np.zeros((2 * M + 1,) * 2, complex)
    for i, s in enumerate(box.sites):
        dense[s[0] + M, s[1] + M] = u[2 * i]
    Y = nls_trilinear_field(1.0, torus_volume(model), dense, dense, dense, M)
    X = P.compiled(box).vector_field(u)
    ref = np.array([Y[s[0] + M, s[1] + M] for s in box.sites])
    assert np.abs(X[0::2] - ref).max() < 1e-13
