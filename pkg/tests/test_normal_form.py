import math

import numpy as np
import pytest

from birkhoff_lab.errors import ConvergenceError, NearResonanceError
from birkhoff_lab.frequencies import NLSModel, sample_potential
from birkhoff_lab.lattice import Metric, ModeSequence, canonical, get_box, signed
from birkhoff_lab.normal_form import (flow_integrate_generator, homological_residual,
                                      lie_transform_expand, normal_form_iterate,
                                      solve_homological, transport)
from birkhoff_lab.poly import (PolyHamiltonian, QuadraticDiagonal, expand_nonlinearity,
                               poisson_bracket, r_norm)
from birkhoff_lab.resonance import build_clusters, classify_multiindex

IDENT = Metric.identity(2)


@pytest.fixture(scope="module")
def sampled():
    model = NLSModel(IDENT, sample_potential(7, 2, 4))
    return model, build_clusters(model, 4)


def test_single_nonresonant_monomial(sampled):
    model, part = sampled
    key = canonical([signed((1, 0), 1), signed((0, 1), 1), signed((1, 1), -1)])
    F = PolyHamiltonian.realified({key: 0.5 + 0.25j}, 2)
    sol = solve_homological(model, F, 4, part, tol_div=1e-12)
    assert not sol.Z
    H0 = QuadraticDiagonal(model, 4)
    div = H0.divisor(key)
    assert sol.G[key] == pytest.approx(F[key] / (1j * div), rel=1e-15)
    assert not homological_residual(H0, sol, F).sup_coefficient() > 1e-15


def test_single_resonant_monomial(sampled):
    model, part = sampled
    key = canonical([signed((1, 0), 1), signed((1, 0), -1), signed((0, 1), 1), signed((0, 1), -1)])
    F = PolyHamiltonian({key: 2.0})
    sol = solve_homological(model, F, 4, part)
    assert sol.Z == F and not sol.G


def test_near_resonance_aborts(sampled):
    model, part = sampled
    key = canonical([signed((1, 0), 1), signed((0, 1), 1), signed((1, 1), -1)])
    F = PolyHamiltonian.realified({key: 1.0}, 2)
    with pytest.raises(NearResonanceError) as info:
        solve_homological(model, F, 4, part, tol_div=10.0)
    assert info.value.key is not None


def test_integer_torus_normal_form_support():
    model = NLSModel(IDENT)
    part = build_clusters(model, 4)
    F = expand_nonlinearity(model, [0, 1.0], 4, 4)
    sol = solve_homological(model, F, 4, part)
    expect = set()
    for key in F:
        if sum(e.sigma * (e.j[0] ** 2 + e.j[1] ** 2) for e in key) == 0:
            expect.add(key)
    assert set(sol.Z.keys()) == expect
    assert set(sol.G.keys()) == set(F.keys()) - expect
    res = homological_residual(QuadraticDiagonal(model, 4), sol, F)
    assert r_norm(res, 1.0) <= 1e-12 * r_norm(F, 1.0)


def test_first_order_term_is_homological_identity(sampled):
    model, part = sampled
    F = expand_nonlinearity(model, [0, 1.0], 4, 2)
    part2 = build_clusters(model, 2)
    sol = solve_homological(model, F, 2, part2)
    H0 = QuadraticDiagonal(model, 2)
    diff = poisson_bracket(sol.G, H0) - (sol.Z - F)
    assert diff.sup_coefficient() <= 1e-13 * F.sup_coefficient()


def test_zero_generator_is_identity(sampled):
    model, _ = sampled
    F = expand_nonlinearity(model, [0, 1.0], 4, 2)
    out, tail = lie_transform_expand((QuadraticDiagonal(model, 2), F), PolyHamiltonian.zero(2), 6)
    assert out == F and tail == 0.0


def _random_cubic(box, rng, scale):
    from birkhoff_lab.resonance import all_zero_momentum_ids
    ids = all_zero_momentum_ids(box, 3)
    c = (rng.standard_normal(len(ids)) + 1j * rng.standard_normal(len(ids))) * scale
    return PolyHamiltonian.realified({box.key_from_ids(x): v for x, v in zip(ids, c)}, box.d)


def test_lie_series_matches_flow_composition():
    box = get_box(1, 2)
    model = NLSModel(Metric.identity(1))
    H0 = QuadraticDiagonal(model, 2)
    rng = np.random.default_rng(0)
    G, F = _random_cubic(box, rng, 0.3), _random_cubic(box, rng, 1.0)
    rbar = 5
    series, _ = lie_transform_expand((H0, F), G, rbar, R=1e-3)
    z = (rng.standard_normal(box.n) + 1j * rng.standard_normal(box.n)) * 0.01
    u = ModeSequence({signed(j, s): (v if s > 0 else np.conj(v))
                      for j, v in zip(box._tuples, z) for s in (1, -1)}, 2, 1)
    moved = flow_integrate_generator(G, u, 1.0, 64)
    lhs = H0.evaluate(moved) + F.evaluate(moved) - H0.evaluate(u)
    rhs = series.evaluate(u)
    assert abs(lhs - rhs) <= 1e-5 * abs(rhs)


def test_flow_conserves_generator():
    box = get_box(1, 2)
    rng = np.random.default_rng(1)
    G = _random_cubic(box, rng, 1.0)
    z = (rng.standard_normal(box.n) + 1j * rng.standard_normal(box.n)) * 0.1
    u = ModeSequence({signed(j, s): (v if s > 0 else np.conj(v))
                      for j, v in zip(box._tuples, z) for s in (1, -1)}, 2, 1)
    g0 = G.evaluate(u)
    for t in (-1.0, -0.5, 0.5, 1.0):
        assert G.evaluate(flow_integrate_generator(G, u, t, 64)) == pytest.approx(g0, rel=1e-8)
    assert flow_integrate_generator(G, u, 0.0) is u
    assert flow_integrate_generator(PolyHamiltonian.zero(1), u) is u


def test_transport_inverse_roundtrip():
    box = get_box(1, 2)
    rng = np.random.default_rng(2)
    gens = [_random_cubic(box, rng, 0.5), _random_cubic(box, rng, 0.5)]
    z = (rng.standard_normal(box.n) + 1j * rng.standard_normal(box.n)) * 0.05
    u = ModeSequence({signed(j, s): (v if s > 0 else np.conj(v))
                      for j, v in zip(box._tuples, z) for s in (1, -1)}, 2, 1)
    back = transport(gens, transport(gens, u, steps=64), inverse=True, steps=64)
    a, b = box.sequence_to_array(u), box.sequence_to_array(back)
    assert np.abs(a - b).max() < 1e-10


def test_iterate_trivial_inputs(sampled):
    model, part = sampled
    res = normal_form_iterate(model, PolyHamiltonian.zero(2), 5, 4, 0.01, part)
    assert not res.Z_total and not res.generators
    key = canonical([signed((1, 0), 1), signed((1, 0), -1), signed((2, 1), 1), signed((2, 1), -1)])
    P = PolyHamiltonian({key: 1.0})
    res = normal_form_iterate(model, P, 5, 4, 0.01, part)
    assert res.Z_total == P
    assert all(not G for G in res.generators)


def test_iterate_remainder_shrinks_like_mu():
    model = NLSModel(IDENT, sample_potential(7, 2, 2))
    part = build_clusters(model, 2)
    P = expand_nonlinearity(model, [0, 1.0], 6, 2)
    res = normal_form_iterate(model, P, 6, 2, 0.01, part)
    first = res.norm_report[0]
    ratio = first["norm_P"] / r_norm(P, 0.01)
    # remainder of the next degree is of size mu / gamma relative to P
    assert 0 < ratio <= 10 * first["mu"] / first["min_divisor"]
    assert all(classify_multiindex(k, 2, part).startswith("normal_form") for k in res.Z_total)


def test_lie_gate_rejects_large_radius():
    model = NLSModel(IDENT, sample_potential(7, 2, 4))
    part = build_clusters(model, 4)
    P = expand_nonlinearity(model, [0, 1.0], 5, 4)
    with pytest.raises(ConvergenceError):
        normal_form_iterate(model, P, 5, 4, 0.1, part)


def test_mu_gate():
    model = NLSModel(IDENT, sample_potential(7, 2, 2))
    part = build_clusters(model, 2)
    P = expand_nonlinearity(model, [0, 1.0], 4, 2)
    with pytest.raises(ConvergenceError):
        normal_form_iterate(model, P, 4, 2, 0.5, part, mu_max=1e-4)
