"""Pseudo-spectral split-step integrators on the metric torus and their diagnostics.

States are dense Fourier arrays in FFT order on a grid of ``n = 3M`` points per
axis; only modes with ``|j|_inf <= M`` are populated (the top third is the
dealiasing zone).  Amplitudes use the same normalisation as the polynomial
Hamiltonians: ``psi(x) = |T|^(-1/2) sum_j u_j e^{i j.x}``.

Linear phases are applied in the interaction picture, computed from the
absolute time ``n dt`` rather than accumulated, so the linear flow is exact.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ConvergenceError
from .frequencies import BeamModel, FrequencyModel, NLSModel, PlaneWaveModel, QHDModel
from .lattice import ModeSequence, SignedIndex
from .poly import torus_volume


class VacuumError(ConvergenceError):
    """The field comes too close to zero for the polar (hydrodynamic) variables."""


# ---------------------------------------------------------------------------
# grids and states


class Grid:
    def __init__(self, d: int, M: int, metric=None, vol: float | None = None):
        if M < 1:
            raise ValueError("grid half-width M must be >= 1")
        self.d, self.M = d, M
        self.n = 3 * M
        self.shape = (self.n,) * d
        freq = np.rint(np.fft.fftfreq(self.n) * self.n).astype(np.int64)
        mesh = np.meshgrid(*([freq] * d), indexing="ij")
        self.k = np.stack(mesh, axis=-1)                      # (n,...,n,d)
        self.kept = np.all(np.abs(self.k) <= M, axis=-1)
        self.euclid = np.sqrt((self.k * self.k).sum(axis=-1).astype(float))
        gf = np.eye(d) if metric is None else metric.as_float()
        self.metric_float = gf
        self.norm_sq_g = np.einsum("...i,ij,...j->...", self.k, gf, self.k)
        self.vol = (2 * math.pi) ** d * math.sqrt(np.linalg.det(gf)) if vol is None else vol
        size = self.n ** d
        self._to_phys = size / math.sqrt(self.vol)
        # index of -k for every grid point
        neg = (-self.k) % self.n
        self.neg_index = tuple(neg[..., i] for i in range(d))

    @classmethod
    def for_model(cls, model: FrequencyModel, M: int) -> "Grid":
        return cls(model.d, M, model.metric, torus_volume(model))

    def to_physical(self, modes: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(modes) * self._to_phys

    def to_modes(self, psi: np.ndarray) -> np.ndarray:
        return np.fft.fftn(psi) / self._to_phys

    def dealias(self, modes: np.ndarray) -> np.ndarray:
        modes[~self.kept] = 0
        return modes

    def reflect(self, modes: np.ndarray) -> np.ndarray:
        """``w_j = modes_{-j}``."""
        return modes[self.neg_index]

    def from_sequence(self, u: ModeSequence) -> np.ndarray:
        """Dense ``(+)`` components of a mode sequence."""
        out = np.zeros(self.shape, dtype=complex)
        for key, v in u.items():
            if key.sigma > 0:
                if max(abs(x) for x in key.j) > self.M:
                    raise ValueError(f"mode {key.j} outside the grid half-width {self.M}")
                out[tuple(x % self.n for x in key.j)] = v
        return out

    def to_sequence(self, modes: np.ndarray, N: int | None = None,
                    minus: np.ndarray | None = None) -> ModeSequence:
        """Inverse of :meth:`from_sequence`; ``(-)`` parts default to the conjugates."""
        amp = {}
        idx = np.argwhere(self.kept & ((modes != 0) | ((minus != 0) if minus is not None else False)))
        for p in idx:
            j = tuple(int(x) for x in self.k[tuple(p)])
            v = complex(modes[tuple(p)])
            w = complex(minus[tuple(p)]) if minus is not None else v.conjugate()
            if v:
                amp[SignedIndex(j, 1)] = v
            if w:
                amp[SignedIndex(j, -1)] = w
        radius = N if N is not None else int(math.ceil(self.M * math.sqrt(self.d)))
        return ModeSequence(amp, radius, self.d)

    def sobolev_norm(self, modes: np.ndarray, s: float, both_signs: bool = True) -> float:
        """Norm over signed modes (both ``(j,+)`` and ``(j,-)`` for real sequences)."""
        w = (1.0 + self.euclid) ** (2 * s)
        total = float(np.sum(w * (modes.real ** 2 + modes.imag ** 2)))
        return math.sqrt((2.0 if both_signs else 1.0) * total)


@dataclass
class FieldState:
    modes: np.ndarray
    M: int
    time: float = 0.0
    step: int = 0

    def copy(self) -> "FieldState":
        return FieldState(self.modes.copy(), self.M, self.time, self.step)


def _poly_fn(coeffs: Sequence[float]) -> Callable[[np.ndarray], np.ndarray]:
    c = np.asarray([float(x) for x in coeffs] or [0.0])
    return lambda x: np.polynomial.polynomial.polyval(x, c)


def _antiderivative(coeffs: Sequence[float]) -> list[float]:
    return [0.0] + [float(c) / (k + 1) for k, c in enumerate(coeffs)]


# ---------------------------------------------------------------------------
# Schrodinger type (NLS, plane wave, hydrodynamic psi-equation)


class SchrodingerStepper:
    """Strang splitting for ``i u_t = L u + g(|psi|^2) psi`` with diagonal ``L``."""

    def __init__(self, grid: Grid, multiplier: np.ndarray, g: Callable | None):
        self.grid = grid
        self.L = np.where(grid.kept, multiplier, 0.0)
        self.g = g

    def _phase(self, t: float) -> np.ndarray:
        return np.exp(-1j * self.L * t)

    def step(self, state: FieldState, dt: float) -> FieldState:
        return self.run(state, dt, 1)

    def run(self, state: FieldState, dt: float, steps: int, t0_step: int | None = None) -> FieldState:
        """``steps`` Strang steps; the time after step ``k`` is ``(step + k) * dt``."""
        grid = self.grid
        start = state.step if t0_step is None else t0_step
        t_start = state.time
        # interaction picture: v = e^{i L t} u
        v = state.modes * np.exp(1j * self.L * t_start)
        if self.g is not None:
            for k in range(steps):
                tm = t_start + (k + 0.5) * dt
                ph = self._phase(tm)
                psi = grid.to_physical(v * ph)
                psi *= np.exp(-1j * dt * self.g((psi * psi.conj()).real))
                v = grid.dealias(grid.to_modes(psi)) * ph.conj()
        t_end = t_start + steps * dt
        out = v * self._phase(t_end)
        return FieldState(grid.dealias(out), state.M, t_end, start + steps)


def nls_multiplier(model: FrequencyModel, grid: Grid) -> np.ndarray:
    """``|j|_g^2 + V_j`` on the grid."""
    mult = grid.norm_sq_g.astype(float).copy()
    V = getattr(model, "V", None)
    if V is not None:
        pts = grid.k[grid.kept]
        mult[grid.kept] += V.array(pts)
    return mult


def step_nls(model: FrequencyModel, fcoeffs: Sequence[float], u: FieldState, dt: float,
             grid: Grid | None = None) -> FieldState:
    """One Strang split step of the NLS with nonlinearity ``f(x) = sum fcoeffs[k] x^k``."""
    grid = grid or Grid.for_model(model, u.M)
    g = _poly_fn(fcoeffs) if any(fcoeffs) else None
    return SchrodingerStepper(grid, nls_multiplier(model, grid), g).step(u, dt)


def nls_energy(grid: Grid, model: FrequencyModel, fcoeffs, modes: np.ndarray) -> float:
    lin = float(np.sum(nls_multiplier(model, grid) * np.abs(modes) ** 2))
    if not any(fcoeffs):
        return lin
    psi = grid.to_physical(modes)
    F = _poly_fn(_antiderivative(fcoeffs))
    return lin + grid.vol * float(np.mean(F(np.abs(psi) ** 2)))


# ---------------------------------------------------------------------------
# beam


class BeamStepper:
    """Strang splitting with exact linear phases and an exact nonlinear kick.

    ``u_+ = (w^(1/2) psi + i w^(-1/2) psi_t) / sqrt 2`` and ``u_-`` its conjugate
    partner; ``psi_tt + (Delta^2 + m) psi + F'(psi) = 0``.
    """

    def __init__(self, model: BeamModel, fcoeffs: Sequence[float], grid: Grid):
        if any(float(c) for c in list(fcoeffs)[:3]):
            raise ValueError("beam nonlinearity must vanish to second order")
        self.grid = grid
        self.model = model
        w = np.sqrt(grid.norm_sq_g.astype(float) ** 2 + float(model.m))
        self.omega = np.where(grid.kept, w, 0.0)
        self.inv_sqrt = np.where(grid.kept, 1.0 / np.sqrt(2 * w), 0.0)      # w^(-1/2)/sqrt 2
        self.sqrt_half = np.where(grid.kept, np.sqrt(w / 2), 0.0)            # w^(1/2)/sqrt 2
        self.fc = [float(c) for c in fcoeffs]
        self.dF = _poly_fn([k * c for k, c in enumerate(self.fc)][1:]) if any(self.fc) else None

    # (psi_hat, psi_t_hat) in u-normalised Fourier coefficients
    def to_fields(self, plus: np.ndarray, minus: np.ndarray):
        g = self.grid
        mr = g.reflect(minus)
        psi_h = self.inv_sqrt * (plus + mr)
        dpsi_h = self.sqrt_half * (plus - mr) / 1j
        return psi_h, dpsi_h

    def from_fields(self, psi_h: np.ndarray, dpsi_h: np.ndarray):
        g = self.grid
        plus = g.dealias(self.sqrt_half * psi_h + 1j * self.inv_sqrt * dpsi_h)
        minus = g.dealias(g.reflect(self.sqrt_half * psi_h - 1j * self.inv_sqrt * dpsi_h))
        return plus, minus

    def physical(self, plus, minus):
        psi_h, dpsi_h = self.to_fields(plus, minus)
        return self.grid.to_physical(psi_h), self.grid.to_physical(dpsi_h)

    def from_physical(self, psi: np.ndarray, dpsi: np.ndarray):
        g = self.grid
        return self.from_fields(g.dealias(g.to_modes(psi)), g.dealias(g.to_modes(dpsi)))

    def run(self, plus: FieldState, minus: FieldState, dt: float, steps: int):
        g = self.grid
        w = self.omega
        t0 = plus.time
        vp = plus.modes * np.exp(1j * w * t0)
        vm = minus.modes * np.exp(-1j * w * t0)
        if self.dF is not None:
            for k in range(steps):
                tm = t0 + (k + 0.5) * dt
                ph = np.exp(-1j * w * tm)
                up, um = vp * ph, vm * ph.conj()
                psi_h = self.inv_sqrt * (up + g.reflect(um))
                psi = g.to_physical(psi_h)
                force = g.dealias(g.to_modes(self.dF(psi)))
                # psi_t_hat -> psi_t_hat - dt F'(psi)_hat
                up = up - 1j * dt * self.inv_sqrt * force
                um = um + 1j * dt * self.inv_sqrt * g.reflect(force)
                vp, vm = up * ph.conj(), um * ph
        t1 = t0 + steps * dt
        out_p = g.dealias(vp * np.exp(-1j * w * t1))
        out_m = g.dealias(vm * np.exp(1j * w * t1))
        n = plus.step + steps
        return FieldState(out_p, plus.M, t1, n), FieldState(out_m, minus.M, t1, n)

    def energy(self, plus, minus) -> float:
        lin = float(np.sum(self.omega * (plus * minus).real))
        if not any(self.fc):
            return lin
        psi, _ = self.physical(plus, minus)
        F = _poly_fn(self.fc)
        return lin + self.grid.vol * float(np.mean(F(psi.real)))


def step_beam(model: BeamModel, state, dt: float, fcoeffs: Sequence[float] = (0, 0, 0, 1.0),
              grid: Grid | None = None):
    """One Strang step on the pair ``(u_plus, u_minus)``."""
    plus, minus = state
    grid = grid or Grid.for_model(model, plus.M)
    return BeamStepper(model, fcoeffs, grid).run(plus, minus, dt, 1)


# ---------------------------------------------------------------------------
# Madelung variables


@dataclass
class MadelungPair:
    rho: np.ndarray
    phi: np.ndarray
    m: float
    lam: float

    def __post_init__(self):
        if self.m <= 0 or self.lam <= 0:
            raise ValueError("need m > 0 and lambda > 0")
        if np.any(self.m + self.rho <= 0):
            raise VacuumError("m + rho must stay positive")

    @property
    def kappa(self) -> float:
        return 1.0 / (4 * self.lam ** 2)


def madelung_forward(p: MadelungPair) -> np.ndarray:
    """``psi = sqrt(m + rho) e^{i lambda phi}`` pointwise."""
    return np.sqrt(p.m + p.rho) * np.exp(1j * p.lam * p.phi)


def _unwrap_lines(theta: np.ndarray) -> np.ndarray:
    """Continuous angle along grid lines starting at the origin cell."""
    out = np.array(theta, dtype=float)
    d = out.ndim
    for axis in range(d):
        # unwrap along this axis on the hyperplane where all later axes sit at 0
        sl = [slice(None)] * d
        for later in range(axis + 1, d):
            sl[later] = 0
        out[tuple(sl)] = np.unwrap(out[tuple(sl)], axis=axis)
    return out


def madelung_inverse(psi: np.ndarray, lam: float, threshold: float = 1e-3,
                     m: float | None = None) -> MadelungPair:
    """Recover ``(rho, phi)`` with ``rho = |psi|^2 - m`` and unwrapped ``phi``."""
    amp2 = (psi * psi.conj()).real
    if np.min(np.sqrt(amp2)) < threshold:
        raise VacuumError(f"|psi| drops below {threshold}; polar variables undefined")
    m = float(np.mean(amp2)) if m is None else m
    theta = _unwrap_lines(np.angle(psi))
    for axis in range(psi.ndim):
        jump = np.abs(np.diff(theta, axis=axis))
        if jump.size and jump.max() >= math.pi:
            raise ConvergenceError("phase jump of pi or more between neighbouring cells")
        wrap = np.take(theta, [0], axis=axis) - np.take(theta, [-1], axis=axis)
        if np.abs(wrap).max() >= math.pi:
            raise ConvergenceError("phase winds around the torus; no single-valued phi")
    return MadelungPair(amp2 - m, theta / lam, m, lam)


# ---------------------------------------------------------------------------
# diagnostics and trajectories


@dataclass
class Trajectory:
    samples: list = field(default_factory=list)
    epsilon: float = 0.0
    escape_time: float | None = None
    horizon: float = 0.0
    meta: dict = field(default_factory=dict)
    columns: list = field(default_factory=list)

    def add(self, record: dict, escape_key: str | None = None, threshold: float | None = None):
        if self.samples and record["time"] <= self.samples[-1]["time"]:
            raise ValueError("sample times must increase")
        self.samples.append(record)
        for k in record:
            if k not in self.columns:
                self.columns.append(k)
        if (escape_key and threshold is not None and self.escape_time is None
                and record.get(escape_key, 0.0) > threshold):
            self.escape_time = record["time"]

    def column(self, name: str) -> np.ndarray:
        return np.array([s.get(name, np.nan) for s in self.samples], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for s in self.samples:
            w.writerow([repr(float(s[c])) if c in s and s[c] is not None else "" for c in self.columns])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {"epsilon": self.epsilon, "horizon": self.horizon,
                "escape_time": self.escape_time if self.escape_time is not None else "not escaped",
                "columns": self.columns, **self.meta}


def class_labels(grid: Grid, classes) -> np.ndarray:
    """Class number per grid point (``-1`` outside every class)."""
    lab = np.full(grid.shape, -1, dtype=np.int64)
    if classes is None:
        return lab
    for site, c in classes.label.items():
        if max(abs(x) for x in site) <= grid.M:
            lab[tuple(x % grid.n for x in site)] = c
    return lab


def super_actions(modes: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    sel = labels >= 0
    return np.bincount(labels[sel], weights=np.abs(modes[sel]) ** 2, minlength=n_classes)


def diagnostics(u: FieldState, model: FrequencyModel, classes, slist: Sequence[float],
                grid: Grid | None = None, fcoeffs: Sequence[float] = (), labels=None) -> dict:
    """Mass, energy, Sobolev norms and super-actions ``J_e = sum_{j in e} |u_j|^2``."""
    grid = grid or Grid.for_model(model, u.M)
    modes = u.modes
    rec = {"time": u.time, "mass": float(np.sum(np.abs(modes) ** 2))}
    if isinstance(model, (NLSModel, PlaneWaveModel)):
        rec["energy"] = nls_energy(grid, model, fcoeffs, modes)
    for s in slist:
        rec[f"norm_s{s:g}"] = grid.sobolev_norm(modes, s)
    if classes is not None:
        lab = class_labels(grid, classes) if labels is None else labels
        J = super_actions(modes, lab, len(classes))
        for e, val in enumerate(J):
            rec[f"J_class{e}"] = float(val)
    return rec


def _record_every(steps: int, sample_every: int) -> list[int]:
    marks = list(range(0, steps, max(1, sample_every)))
    if not marks or marks[-1] != steps:
        marks.append(steps)
    return marks


def simulate_nls(model: FrequencyModel, fcoeffs: Sequence[float], u0: FieldState, dt: float,
                 steps: int, sample_every: int = 100, slist: Sequence[float] = (0, 1),
                 classes=None, escape_factor: float | None = None, s_escape: float = 1.0,
                 grid: Grid | None = None, on_sample: Callable | None = None) -> Trajectory:
    grid = grid or Grid.for_model(model, u0.M)
    g = _poly_fn(fcoeffs) if any(fcoeffs) else None
    stepper = SchrodingerStepper(grid, nls_multiplier(model, grid), g)
    labels = class_labels(grid, classes) if classes is not None else None
    eps = grid.sobolev_norm(u0.modes, s_escape)
    traj = Trajectory(epsilon=eps, horizon=steps * dt,
                      meta={"model": model.kind, "dt": dt, "steps": steps, "M": u0.M})
    key = f"norm_s{s_escape:g}"
    thr = None if escape_factor is None else escape_factor * eps
    state = u0
    done = 0
    for mark in _record_every(steps, sample_every):
        state = stepper.run(state, dt, mark - done) if mark > done else state
        done = mark
        rec = diagnostics(state, model, classes, slist, grid, fcoeffs, labels)
        if on_sample is not None:
            rec.update(on_sample(state))
        traj.add(rec, key if key in rec else None, thr)
    traj.meta["final_state"] = state
    return traj


def simulate_beam(model: BeamModel, fcoeffs, plus: FieldState, minus: FieldState, dt: float,
                  steps: int, sample_every: int = 100, slist: Sequence[float] = (0, 1),
                  classes=None) -> Trajectory:
    grid = Grid.for_model(model, plus.M)
    stepper = BeamStepper(model, fcoeffs, grid)
    labels = class_labels(grid, classes) if classes is not None else None
    traj = Trajectory(epsilon=grid.sobolev_norm(plus.modes, 1.0), horizon=steps * dt,
                      meta={"model": "beam", "dt": dt, "steps": steps, "M": plus.M})
    done = 0
    for mark in _record_every(steps, sample_every):
        if mark > done:
            plus, minus = stepper.run(plus, minus, dt, mark - done)
        done = mark
        rec = diagnostics(plus, model, classes, slist, grid, labels=labels)
        rec["energy"] = stepper.energy(plus.modes, minus.modes)
        psi, _ = stepper.physical(plus.modes, minus.modes)
        rec["imag_psi"] = float(np.abs(psi.imag).max())
        traj.add(rec)
    traj.meta["final_state"] = (plus, minus)
    return traj


# ---------------------------------------------------------------------------
# hydrodynamic model in psi variables


def qhd_lambda(model: QHDModel) -> float:
    return 1.0 / float(model.hbar)


def qhd_stepper(model: QHDModel, fcoeffs: Sequence[float], grid: Grid) -> SchrodingerStepper:
    """``psi_t = -i(-(hbar/2) Delta_g psi + p(|psi|^2) psi / hbar)`` with ``p(x) = sum c_k (x-m)^k``."""
    hbar, m = float(model.hbar), float(model.m)
    c = [float(x) for x in fcoeffs]
    if c and c[0] != 0:
        raise ConfigError("pressure coefficients need p(m) = 0")
    p = _poly_fn(c)

    def g(x):
        return p(x - m) / hbar

    return SchrodingerStepper(grid, hbar / 2 * grid.norm_sq_g.astype(float), g)


def zero_mode_reduction(grid: Grid, modes: np.ndarray):
    """``(theta, z)`` with ``theta = -arg psi_0`` and ``z_j = psi_j e^{i theta}`` (average normalised)."""
    hat = modes / math.sqrt(grid.vol)
    zero = (0,) * grid.d
    theta = -float(np.angle(hat[zero]))
    z = hat * np.exp(1j * theta)
    z[zero] = 0
    return theta, z


def qhd_simulate(model: QHDModel, rho0: np.ndarray, phi0: np.ndarray, dt: float, steps: int,
                 fcoeffs: Sequence[float] | None = None, M: int | None = None,
                 sample_every: int = 100, slist: Sequence[float] = (0, 1), s_small: float = 1.0,
                 smallness: float = 0.5, threshold: float = 1e-3) -> Trajectory:
    """Evolve the hydrodynamic system through the Madelung field ``psi``."""
    rho0 = np.asarray(rho0, dtype=float)
    phi0 = np.asarray(phi0, dtype=float)
    n = rho0.shape[0]
    if n % 3:
        raise ConfigError("grid size must be a multiple of 3")
    M = M or n // 3
    grid = Grid.for_model(model, M)
    if rho0.shape != grid.shape or phi0.shape != grid.shape:
        raise ConfigError("rho0 and phi0 must live on the simulation grid")
    m = float(model.m)
    lam = qhd_lambda(model)
    if abs(np.mean(rho0)) > 1e-12 * max(1.0, m):
        raise ConfigError("rho0 must have zero mean")
    if fcoeffs is None:
        fcoeffs = [0.0, float(model.pprime)]
    pair = MadelungPair(rho0, phi0, m, lam)
    avg = lambda a: grid.to_modes(a) / math.sqrt(grid.vol)  # noqa: E731 - average normalised coefficients
    rho_h = avg(rho0)
    phi_h = avg(phi0)
    phi_h[(0,) * grid.d] = 0
    size0 = (grid.sobolev_norm(rho_h, s_small, False) / m
             + grid.sobolev_norm(phi_h, s_small, False) / math.sqrt(pair.kappa))
    if size0 > smallness:
        raise ConfigError(f"initial data too large: {size0:.3g} > {smallness}")
    modes = grid.dealias(grid.to_modes(madelung_forward(pair)))
    state = FieldState(modes, M)
    stepper = qhd_stepper(model, fcoeffs, grid)
    traj = Trajectory(meta={"model": "qhd", "dt": dt, "steps": steps, "M": M, "lambda": lam})
    first = True
    done = 0
    for mark in _record_every(steps, sample_every):
        if mark > done:
            state = stepper.run(state, dt, mark - done)
        done = mark
        rec = {"time": state.time, "mass": float(np.sum(np.abs(state.modes) ** 2))}
        _, z = zero_mode_reduction(grid, state.modes)
        mp = madelung_inverse(grid.to_physical(state.modes), lam, threshold, m=m)
        r_h, p_h = avg(mp.rho), avg(mp.phi)
        p_h[(0,) * grid.d] = 0
        for s in slist:
            rec[f"z_norm_s{s:g}"] = grid.sobolev_norm(z, s, False)
            rec[f"rho_norm_s{s:g}"] = grid.sobolev_norm(r_h, s, False)
            rec[f"phi_norm_s{s:g}"] = grid.sobolev_norm(p_h, s, False)
        if first:
            traj.epsilon = rec[f"z_norm_s{slist[-1]:g}"]
            first = False
        traj.add(rec)
    traj.horizon = steps * dt
    traj.meta["final_state"] = state
    return traj


# ---------------------------------------------------------------------------
# plane waves


def plane_wave_frequency(model: PlaneWaveModel, mvec, a: float, fcoeffs) -> float:
    """``nu = |m|_g^2 + f(a^2)`` for ``psi = a e^{i(m.x - nu t)}``."""
    j = np.asarray(mvec, dtype=np.int64)
    return float(model.metric.norm_sq_array(j[None, :])[0]) + float(_poly_fn(fcoeffs)(a * a))


def moving_frame(grid: Grid, modes: np.ndarray, mvec, t: float) -> np.ndarray:
    """``phi_hat_j = psi_hat_{j+m} e^{i(|j+m|_g^2 - |j|_g^2) t}`` (exact linear-flow frame)."""
    m = np.asarray(mvec, dtype=np.int64)
    shift = tuple(int(x) for x in m)
    out = np.roll(modes, tuple(-x for x in shift), axis=tuple(range(grid.d)))
    jm = grid.k + m
    gf = grid.metric_float
    dphase = np.einsum("...i,ij,...j->...", jm, gf, jm) - grid.norm_sq_g
    return out * np.exp(1j * dphase * t)


def plane_wave_experiment(model: PlaneWaveModel, mvec, a: float | None,
                          perturbation: ModeSequence, dt: float, steps: int, *,
                          fcoeffs: Sequence[float] | None = None, M: int = 8,
                          sample_every: int = 100, slist: Sequence[float] = (0, 1),
                          l2_tol: float = 0.1) -> Trajectory:
    a = float(model.a) if a is None else float(a)
    if abs(a - float(model.a)) > 1e-12 * max(1.0, a):
        raise ConfigError("amplitude a differs from the model's plane-wave amplitude")
    if fcoeffs is None:
        fcoeffs = [0.0, float(model.fprime)]
    grid = Grid.for_model(model, M)
    mvec = tuple(int(x) for x in mvec)
    if max(abs(x) for x in mvec) > M:
        raise ConfigError("plane-wave momentum outside the grid")
    base = np.zeros(grid.shape, dtype=complex)
    mpos = tuple(x % grid.n for x in mvec)
    amp = a * math.sqrt(grid.vol)
    base[mpos] = amp
    pert = grid.from_sequence(perturbation)
    u0 = base + pert
    target = amp * amp
    mass = float(np.sum(np.abs(u0) ** 2))
    scale = math.sqrt(target / mass)
    if abs(scale - 1) > l2_tol:
        raise ConfigError(f"L2 rescaling factor {scale:.4f} outside tolerance {l2_tol}")
    u0 = u0 * scale
    nu = plane_wave_frequency(model, mvec, a, fcoeffs)
    s_top = slist[-1]
    eps = grid.sobolev_norm(u0 - base, s_top)

    def extra(state: FieldState) -> dict:
        ref = np.zeros_like(base)
        ref[mpos] = amp * np.exp(-1j * nu * state.time)
        out = {f"dist_ref_s{s:g}": grid.sobolev_norm(state.modes - ref, s) for s in slist}
        out["dist_ref"] = out[f"dist_ref_s{s_top:g}"]
        frame = moving_frame(grid, state.modes, mvec, state.time)
        _, z = zero_mode_reduction(grid, frame)
        z *= math.sqrt(grid.vol)                 # back to the normalisation of dist_ref
        for s in slist:
            out[f"z_norm_s{s:g}"] = grid.sobolev_norm(z, s)
        return out

    traj = simulate_nls(model, fcoeffs, FieldState(u0, M), dt, steps, sample_every, slist,
                        grid=grid, on_sample=extra)
    traj.epsilon = eps
    traj.meta.update({"mvec": list(mvec), "a": a, "nu": nu, "l2_scale": scale})
    return traj
