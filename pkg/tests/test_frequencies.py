import itertools
import math
from fractions import Fraction

import mpmath
import pytest

from birkhoff_lab.frequencies import (BeamModel, NLSModel, PlaneWaveModel, Potential, QHDModel,
                                      diophantine_metric_check, equivalence_classes, omega,
                                      sample_potential)
from birkhoff_lab.lattice import Metric, QuadScalar, get_box, parse_quad


def test_nls_omega():
    assert omega(NLSModel(Metric.identity(2)), (1, 2)).exact == 5


def test_beam_omega():
    w = omega(BeamModel(Metric.identity(2), 1, 1), (1, 0))
    assert w.square == 2
    assert float(w) == pytest.approx(math.sqrt(2), rel=1e-15)


def test_qhd_omega():
    model = QHDModel(Metric.identity(2), beta=1, m=1, hbar=2, pprime=3)
    assert model.delta == 3
    w = omega(model, (1, 0))
    assert w.square == 4 and float(w) == pytest.approx(2.0, rel=1e-15)


def test_sqrt_models_keep_exact_squares():
    g = Metric([[1, 0], [0, QuadScalar(0, 1, 2)]])
    w = omega(BeamModel(g, 1, 1), (1, 1))
    assert w.square == (QuadScalar(1, 1, 2)) ** 2 + 1
    assert float(w) == pytest.approx(math.sqrt(float(w.square)), rel=1e-15)


def test_potential_shifts_frequency():
    V = Potential({(1, 0): Fraction(1, 16)}, n=2, truncation=2)
    assert omega(NLSModel(Metric.identity(2), V), (1, 0)).exact == 1 + Fraction(1, 16)


def test_potential_decay_bound_enforced():
    with pytest.raises(ValueError):
        Potential({(1, 0): Fraction(1, 4)}, n=2, truncation=2)


def test_beta_range_and_ellipticity():
    with pytest.raises(ValueError):
        BeamModel(Metric.identity(2), 3, 1, beta_range=(1, 2))
    with pytest.raises(ValueError):
        QHDModel(Metric.identity(2), pprime=-1)


def test_plane_wave_radicand_checked():
    with pytest.raises(ValueError):
        PlaneWaveModel(Metric.identity(2), 1, fprime=2, truncation=2)
    PlaneWaveModel(Metric.identity(2), 1, fprime=Fraction(1, 2), truncation=2)


def test_classes_of_unit_vectors():
    ec = equivalence_classes(NLSModel(Metric.identity(2)), 1)
    c = ec.classes[ec.class_of((1, 0))]
    assert sorted(c) == sorted([(1, 0), (-1, 0), (0, 1), (0, -1)])


def test_classes_split_by_metric():
    ec = equivalence_classes(NLSModel(Metric.diagonal([1, Fraction(3, 2)])), 1)
    assert ec.class_of((1, 0)) != ec.class_of((0, 1))


def test_class_count_matches_distinct_values():
    N = 5
    ec = equivalence_classes(NLSModel(Metric.identity(2)), N)
    values = {i * i + k * k for i in range(-N, N + 1) for k in range(-N, N + 1)
              if i * i + k * k <= N * N}
    assert len(ec) == len(values)


def test_diophantine_rational_metric_fails():
    rep = diophantine_metric_check(Metric.identity(2), 1e-9, 2)
    assert (1, 0, -1) in rep.exact_zeros
    assert not rep.passed


def test_diophantine_surd_combination_nonzero():
    g = Metric([[1, 0], [0, parse_quad("sqrt(2)")]])
    rep = diophantine_metric_check(g, 1e-12, 4)
    # every combination vanishing exactly uses no sqrt(2) part and cancels 1
    assert all(z[2] == 0 and z[0] == 0 for z in rep.exact_zeros)


def _margin_oracle(entries, Lmax, tau):
    best = math.inf
    with mpmath.workdps(30):
        vals = [mpmath.mpf(x.a.numerator) / x.a.denominator
                + mpmath.mpf(x.b.numerator) / x.b.denominator * mpmath.sqrt(x.D) for x in entries]
        for ell in itertools.product(range(-Lmax, Lmax + 1), repeat=len(entries)):
            size = sum(map(abs, ell))
            if 0 < size <= Lmax:
                v = abs(mpmath.fsum(c * e for c, e in zip(ell, vals))) * size ** tau
                best = min(best, float(v))
    return best


def test_diophantine_margin_against_enumeration():
    s = parse_quad("sqrt(2)/10")
    g = Metric([[1, s], [s, 2]])
    rep = diophantine_metric_check(g, 1e-3, 20)
    ref = _margin_oracle([g.entries[0][0], g.entries[0][1], g.entries[1][1]], 20, rep.tau_star)
    assert rep.best_gamma == pytest.approx(ref, rel=1e-12)


def test_sample_potential_bound_and_determinism():
    V = sample_potential(5, 2, 4)
    assert V == sample_potential(5, 2, 4)
    for k, v in V.coefficients.items():
        assert abs(v) * (1 + math.sqrt(k[0] ** 2 + k[1] ** 2)) ** 2 <= Fraction(1, 2)
    assert abs(V.value((3, 0))) <= Fraction(1, 32)
    assert V != sample_potential(6, 2, 4)


def test_sites_exclude_zero_for_hydrodynamics():
    sites = QHDModel(Metric.identity(2)).sites(2)
    assert not any((s == 0).all() for s in sites)
    assert len(NLSModel(Metric.identity(2)).sites(2)) == get_box(2, 2).n
