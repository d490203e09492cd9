import math
from fractions import Fraction

import numpy as np
import pytest

from birkhoff_lab.frequencies import (BeamModel, NLSModel, PlaneWaveModel, Potential, QHDModel,
                                      equivalence_classes, sample_potential)
from birkhoff_lab.lattice import Metric, ModeSequence, signed
from birkhoff_lab.spectral import (BeamStepper, FieldState, Grid, MadelungPair, SchrodingerStepper,
                                   VacuumError, class_labels, diagnostics, madelung_forward,
                                   madelung_inverse, nls_multiplier, plane_wave_experiment,
                                   qhd_lambda, qhd_simulate, simulate_nls, super_actions,
                                   zero_mode_reduction)

G_OBLIQUE = Metric([[1, Fraction(1, 5)], [Fraction(1, 5), 2]])


def random_state(grid, rng, amp=0.1, support=None):
    support = grid.M / 3 if support is None else support
    sel = grid.kept & (grid.euclid <= support)
    u = np.zeros(grid.shape, complex)
    u[sel] = amp * (rng.standard_normal(sel.sum()) + 1j * rng.standard_normal(sel.sum()))
    u[sel] /= (1 + grid.euclid[sel]) ** 2
    return u


def test_single_mode_linear_phase():
    model = NLSModel(G_OBLIQUE, sample_potential(1, 2, 4))
    grid = Grid.for_model(model, 8)
    u = np.zeros(grid.shape, complex)
    u[2, grid.n - 1] = 0.7
    st = SchrodingerStepper(grid, nls_multiplier(model, grid), None)
    out = st.run(FieldState(u, 8), 0.01, 5000)
    w = nls_multiplier(model, grid)[2, grid.n - 1]
    assert abs(out.modes[2, grid.n - 1] - 0.7 * np.exp(-1j * w * 50.0)) < 1e-13
    assert out.step == 5000 and out.time == pytest.approx(50.0)


def test_constant_field_phase_rotation():
    V = Potential({(0, 0): Fraction(1, 4)}, n=2, truncation=1)
    model = NLSModel(Metric.identity(2), V)
    grid = Grid.for_model(model, 4)
    c = 0.3 + 0.1j
    u = np.zeros(grid.shape, complex)
    u[0, 0] = c * math.sqrt(grid.vol)
    st = SchrodingerStepper(grid, nls_multiplier(model, grid), lambda y: 2.0 * y)
    out = st.run(FieldState(u, 4), 0.01, 1000)
    rate = 0.25 + 2.0 * abs(c) ** 2
    ref = u[0, 0] * np.exp(-1j * rate * 10.0)
    assert abs(out.modes[0, 0] - ref) <= 1e-12 * abs(ref)
    assert np.abs(out.modes[1:, :]).max() < 1e-15


def _order(run, u0, dts):
    errs = [np.abs(run(u0, dt, 1.0) - run(u0, dt / 4, 1.0)).max() for dt in dts]
    return np.polyfit(np.log(dts), np.log(errs), 1)[0]


def test_strang_order_nls():
    model = NLSModel(G_OBLIQUE)
    grid = Grid.for_model(model, 6)
    u0 = np.zeros(grid.shape, complex)
    u0[1, 0], u0[0, 2] = 0.8, 0.5j
    st = SchrodingerStepper(grid, nls_multiplier(model, grid), lambda y: y)

    def run(u, dt, T):
        return st.run(FieldState(u, 6), dt, int(round(T / dt))).modes

    assert 1.8 <= _order(run, u0, [0.04, 0.02, 0.01]) <= 2.2


def test_nonlinear_step_keeps_dealias_zone_empty():
    model = NLSModel(G_OBLIQUE)
    grid = Grid.for_model(model, 6)
    st = SchrodingerStepper(grid, nls_multiplier(model, grid), lambda y: y + y * y)
    out = st.run(FieldState(random_state(grid, np.random.default_rng(0), 1.0, 6), 6), 0.01, 10)
    assert np.all(out.modes[~grid.kept] == 0)


def test_reversibility():
    model = NLSModel(G_OBLIQUE)
    grid = Grid.for_model(model, 6)
    st = SchrodingerStepper(grid, nls_multiplier(model, grid), lambda y: y)
    u0 = random_state(grid, np.random.default_rng(1), 0.3)
    fwd = st.run(FieldState(u0, 6), 0.01, 500)
    back = st.run(fwd, -0.01, 500)
    assert np.abs(back.modes - u0).max() <= 1e-10 * np.abs(u0).max()


@pytest.fixture
def beam():
    model = BeamModel(G_OBLIQUE, 1, 1)
    grid = Grid.for_model(model, 6)
    return model, grid


def test_beam_linear_exact(beam):
    model, grid = beam
    bs = BeamStepper(model, [0, 0, 0, 0], grid)
    u = random_state(grid, np.random.default_rng(2), 0.3)
    p, m = bs.run(FieldState(u, 6), FieldState(np.conj(u), 6), 0.01, 3000)
    assert np.abs(p.modes - u * np.exp(-1j * bs.omega * 30.0)).max() < 1e-13


def test_beam_reality_and_roundtrip(beam):
    model, grid = beam
    bs = BeamStepper(model, [0, 0, 0, 1.0, 0.5], grid)
    rng = np.random.default_rng(3)
    psi = np.real(grid.to_physical(random_state(grid, rng, 0.5)))
    dpsi = np.real(grid.to_physical(random_state(grid, rng, 0.5)))
    p, m = bs.from_physical(psi, dpsi)
    back = bs.physical(p, m)
    assert np.abs(back[0] - psi).max() < 1e-13 and np.abs(back[1] - dpsi).max() < 1e-13
    p2, m2 = bs.run(FieldState(p, 6), FieldState(m, 6), 0.01, 500)
    a, b = bs.physical(p2.modes, m2.modes)
    assert np.abs(a.imag).max() < 1e-12 and np.abs(b.imag).max() < 1e-12


def test_beam_order(beam):
    model, grid = beam
    bs = BeamStepper(model, [0, 0, 0, 1.0], grid)
    u = np.zeros(grid.shape, complex)
    u[1, 0], u[0, 1] = 0.6, 0.4

    def run(p, dt, T):
        out, _ = bs.run(FieldState(p, 6), FieldState(np.conj(p), 6), dt, int(round(T / dt)))
        return out.modes

    assert 1.8 <= _order(run, u, [0.04, 0.02, 0.01]) <= 2.2


def test_madelung_vacuum_value():
    grid = Grid(2, 4)
    zero = np.zeros(grid.shape)
    psi = madelung_forward(MadelungPair(zero, zero, 2.0, 1.0))
    assert np.allclose(psi, math.sqrt(2.0), rtol=1e-15, atol=0)


def test_madelung_roundtrip():
    grid = Grid(2, 4)
    rng = np.random.default_rng(4)
    rho = np.real(grid.to_physical(random_state(grid, rng, 0.05, 4)))
    rho -= rho.mean()
    phi = np.real(grid.to_physical(random_state(grid, rng, 0.05, 4)))
    psi = madelung_forward(MadelungPair(rho, phi, 1.0, 2.0))
    back = madelung_inverse(psi, 2.0, m=1.0)
    assert np.abs(back.rho - rho).max() < 1e-10
    assert np.abs(back.phi - phi).max() < 1e-10


def test_madelung_constant_phase():
    grid = Grid(2, 4)
    psi = np.full(grid.shape, math.sqrt(1.5) * np.exp(1j * 2.0 * 0.4))
    pair = madelung_inverse(psi, 2.0, m=1.5)
    assert np.allclose(pair.phi, 0.4, atol=1e-14)


def test_madelung_refuses_vacuum():
    grid = Grid(2, 4)
    psi = np.ones(grid.shape, complex)
    psi[0, 0] = 0
    with pytest.raises(VacuumError):
        madelung_inverse(psi, 1.0)


def test_qhd_stationary_and_mass():
    model = QHDModel(G_OBLIQUE, 1, 1, 1, Fraction(1, 10))
    n = 3 * 6
    tr = qhd_simulate(model, np.zeros((n, n)), np.full((n, n), 0.3), 0.01, 500, M=6,
                      sample_every=100)
    for c in tr.columns[1:]:
        assert np.ptp(tr.column(c)) < 1e-10
    grid = Grid.for_model(model, 6)
    rng = np.random.default_rng(5)
    rho = np.real(grid.to_physical(random_state(grid, rng, 0.01)))
    rho -= rho.mean()
    phi = np.real(grid.to_physical(random_state(grid, rng, 0.01)))
    tr = qhd_simulate(model, rho, phi, 0.01, 1000, M=6, sample_every=250)
    mass = tr.column("mass")
    assert np.ptp(mass) / mass[0] < 1e-10
    assert qhd_lambda(model) == pytest.approx(1.0)


def test_qhd_rejects_large_data():
    model = QHDModel(G_OBLIQUE)
    grid = Grid.for_model(model, 4)
    rho = np.real(grid.to_physical(random_state(grid, np.random.default_rng(6), 50.0, 4)))
    with pytest.raises(VacuumError):
        qhd_simulate(model, rho - rho.mean(), np.zeros_like(rho), 0.01, 1, M=4)


def test_plane_wave_exact_solution():
    model = PlaneWaveModel(G_OBLIQUE, 1, Fraction(1, 100))
    tr = plane_wave_experiment(model, (1, 0), None, ModeSequence({}, 4, 2), 0.01, 2000, M=6,
                               sample_every=500)
    assert tr.column("dist_ref").max() < 1e-10


def test_plane_wave_frame_reduces_to_zero_mode_at_rest():
    model = PlaneWaveModel(G_OBLIQUE, 1, Fraction(1, 100))
    grid = Grid.for_model(model, 6)
    rng = np.random.default_rng(7)
    pert = random_state(grid, rng, 1e-3, 2)
    pert[0, 0] = 0
    seq = grid.to_sequence(pert)
    tr = plane_wave_experiment(model, (0, 0), None, seq, 0.01, 300, M=6, sample_every=300)
    state = tr.meta["final_state"]
    _, z = zero_mode_reduction(grid, state.modes)
    z *= math.sqrt(grid.vol)
    assert grid.sobolev_norm(z, 1) == pytest.approx(tr.column("z_norm_s1")[-1], rel=1e-12)


def test_super_action_diagnostics():
    model = NLSModel(Metric.identity(2))
    grid = Grid.for_model(model, 6)
    classes = equivalence_classes(model, 2)
    labels = class_labels(grid, classes)
    u = np.zeros(grid.shape, complex)
    u[1, 0] = 0.5 - 0.5j
    rec = diagnostics(FieldState(u, 6), model, classes, [0, 1], grid, labels=labels)
    e = classes.class_of((1, 0))
    J = [rec[f"J_class{k}"] for k in range(len(classes))]
    assert J[e] == pytest.approx(0.5) and sum(J) == pytest.approx(0.5)
    rng = np.random.default_rng(8)
    v = random_state(grid, rng, 1.0, 2)
    J0 = super_actions(v, labels, len(classes))
    phases = np.exp(1j * rng.uniform(0, 6.3, len(classes)))
    rotated = np.where(labels >= 0, v * phases[np.maximum(labels, 0)], v)
    assert np.allclose(super_actions(rotated, labels, len(classes)), J0, rtol=1e-14)
    assert J0.sum() == pytest.approx(np.sum(np.abs(v) ** 2), rel=1e-14)


def test_trajectory_csv_layout():
    model = NLSModel(Metric.identity(2))
    grid = Grid.for_model(model, 6)
    classes = equivalence_classes(model, 2)
    u = random_state(grid, np.random.default_rng(9), 0.1, 2)
    tr = simulate_nls(model, [0, 1.0], FieldState(u, 6), 0.01, 200, 50, [0, 1], classes,
                      escape_factor=1.0 + 1e-15)
    header = tr.to_csv().splitlines()[0].split(",")
    assert header[:5] == ["time", "mass", "energy", "norm_s0", "norm_s1"]
    assert header[5] == "J_class0"
    assert len(tr.to_csv().splitlines()) == 1 + 5
    assert tr.sidecar()["escape_time"] is not None
