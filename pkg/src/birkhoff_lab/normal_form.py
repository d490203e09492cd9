"""Homological equations, Lie transforms and the iterative normal-form loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, NearResonanceError
from .frequencies import FrequencyModel
from .lattice import ModeSequence, get_box
from .poly import (ArrayPoly, PolyHamiltonian, QuadraticDiagonal, eff_and_perp, poisson_bracket,
                   r_norm)
from .resonance import (NF_LOW, NF_PAIRED, ClusterPartition, classify_ids, site_data,
                        verify_nonresonance)


@dataclass
class HomologicalSolution:
    Z: PolyHamiltonian
    G: PolyHamiltonian
    min_divisor_used: float
    tol_div: float = 0.0
    counts: dict = field(default_factory=dict)


_TOL_CACHE: dict = {}


def default_tol_div(model: FrequencyModel, N: int, r: int) -> float:
    """Half the fitted divisor floor ``gamma_fit / (2 N^tau_fit)``."""
    key = (id(model), N, r)
    hit = _TOL_CACHE.get(key)
    if hit is None or hit[0] is not model:
        w = verify_nonresonance(model, N, r, nr2=False)
        tol = w.gamma_fit / (2 * N ** w.tau_fit) if math.isfinite(w.gamma_fit) else 0.0
        hit = (model, tol, w)
        _TOL_CACHE[key] = hit
    return hit[1]


def _check_partition(model: FrequencyModel, partition: ClusterPartition):
    if partition.model is not model and partition.model.class_key != model.class_key:
        raise ValueError("partition was built for a different frequency model")


def _split_arrays(model, ids: np.ndarray, coef: np.ndarray, N: float,
                  partition: ClusterPartition, tol_div: float):
    """Masks for the normal form part and the generator coefficients on ``ids``."""
    code = classify_ids(ids, N, partition)
    if np.any(code == 3):
        row = int(np.flatnonzero(code == 3)[0])
        raise ValueError(f"key {partition.box.key_from_ids(ids[row])} has three or more "
                         f"large entries; split off the perpendicular remainder first")
    keep = code <= 1
    solve = ~keep
    sd = site_data(partition.model, partition.N)
    gcoef = np.zeros(len(ids), dtype=complex)
    min_div = math.inf
    if solve.any():
        sub = np.flatnonzero(solve)
        div, res, _, _ = sd.classify_rows(ids[sub])
        bad = res | (np.abs(div) < tol_div) | ~np.isfinite(div)
        if bad.any():
            row = sub[int(np.flatnonzero(bad)[0])]
            val = 0.0 if res[np.flatnonzero(bad)[0]] else float(div[np.flatnonzero(bad)[0]])
            raise NearResonanceError(
                f"divisor {val:.3e} below tolerance {tol_div:.3e}",
                key=partition.box.key_from_ids(ids[row]), divisor=val)
        gcoef[sub] = coef[sub] / (1j * div)
        min_div = float(np.abs(div).min())
    counts = {NF_LOW: int((code == 0).sum()), NF_PAIRED: int((code == 1).sum()),
              "nonresonant_set": int(solve.sum())}
    return keep, solve, gcoef, min_div, counts


def solve_homological(model: FrequencyModel, F: PolyHamiltonian, N: float,
                      partition: ClusterPartition, tol_div: float | None = None) -> HomologicalSolution:
    """Split ``F`` into the normal-form part ``Z`` and solve ``{H0; G} + Z = F``."""
    _check_partition(model, partition)
    if not F:
        return HomologicalSolution(PolyHamiltonian({}, F.d), PolyHamiltonian({}, F.d), math.inf,
                                   tol_div or 0.0)
    if tol_div is None:
        tol_div = default_tol_div(partition.model, partition.N, max(F.grades))
    box = partition.box
    keys = list(F.keys())
    by_deg: dict[int, list[int]] = {}
    for n, k in enumerate(keys):
        by_deg.setdefault(len(k), []).append(n)
    Z, G = {}, {}
    min_div = math.inf
    counts: dict = {}
    for r, rows in sorted(by_deg.items()):
        ids = np.array([box.ids_from_key(keys[n]) for n in rows], dtype=np.int64)
        coef = np.array([F.terms[keys[n]] for n in rows])
        keep, solve, gcoef, md, cnt = _split_arrays(model, ids, coef, N, partition, tol_div)
        min_div = min(min_div, md)
        for c, v in cnt.items():
            counts[c] = counts.get(c, 0) + v
        for n, row in enumerate(rows):
            if keep[n]:
                Z[keys[row]] = complex(coef[n])
            else:
                G[keys[row]] = complex(gcoef[n])
    return HomologicalSolution(PolyHamiltonian._raw(Z, F.d),
                               PolyHamiltonian._raw(G, F.d), min_div, tol_div, counts)


def solve_homological_arrays(model: FrequencyModel, F: ArrayPoly, N: float,
                             partition: ClusterPartition, tol_div: float):
    """Array version of :func:`solve_homological`; returns ``(Z, G, min_divisor)``."""
    _check_partition(model, partition)
    if F.box is not partition.box:
        raise ValueError("polynomial and partition live on different boxes")
    zb, gb = {}, {}
    min_div = math.inf
    for r, (ids, coef) in F.blocks.items():
        keep, solve, gcoef, md, _ = _split_arrays(model, ids, coef, N, partition, tol_div)
        min_div = min(min_div, md)
        zb[r] = (ids[keep], coef[keep])
        gb[r] = (ids[solve], gcoef[solve])
    return ArrayPoly(F.box, zb), ArrayPoly(F.box, gb), min_div


def homological_residual(H0: QuadraticDiagonal, sol: HomologicalSolution,
                         F: PolyHamiltonian) -> PolyHamiltonian:
    """``{H0; G} + Z - F`` key by key."""
    return poisson_bracket(H0, sol.G) + sol.Z - F


# ---------------------------------------------------------------------------
# Lie transforms


def _min_degree(P: PolyHamiltonian) -> int:
    return min(P.grades) if P else 0


def lie_transform_expand(H_parts, G: PolyHamiltonian, rbar: int, first_order=None,
                         R: float = 1.0, q_max: float = 1.0):
    """Truncated ``F o Phi_G = sum_k ad_G^k F / k!`` applied to ``(H0, F)``.

    Returns ``(transformed, tail_bound)`` where ``transformed`` excludes the
    unchanged ``H0`` itself and keeps degrees ``<= rbar``.  ``first_order`` may
    supply ``{G; H0}`` (for a homological generator it is ``Z - F_eff``).
    The tail bound is the geometric estimate ``||F||_R q^n0 / (1 - q)`` with
    ``q = 2 deg(G) rbar ||G||_R / R^2`` and ``n0`` the first dropped order.
    """
    H0, F = H_parts
    F = F if F is not None else PolyHamiltonian({}, G.d)
    if not G:
        return F.truncated(rbar), 0.0
    gdeg = max(G.grades)
    if min(G.grades) < 3:
        raise ValueError("generator must have degree >= 3")
    total = F.truncated(rbar)
    term = F.truncated(rbar)
    n = 0
    while term:
        n += 1
        term = poisson_bracket(G, term, max_degree=rbar).scaled(1.0 / n)
        total = total + term
    if H0 is not None:
        term = first_order if first_order is not None else poisson_bracket(G, H0, max_degree=rbar)
        term = term.truncated(rbar)
        total = total + term
        n = 1
        while term:
            n += 1
            term = poisson_bracket(G, term, max_degree=rbar).scaled(1.0 / n)
            total = total + term
    q = 2 * gdeg * rbar * r_norm(G, R) / R ** 2
    if q >= q_max:
        raise ConvergenceError(f"Lie series ratio {q:.3g} >= {q_max}: generator too large for R={R}")
    base = F + (first_order if first_order is not None else PolyHamiltonian({}, G.d))
    lowest = _min_degree(base) or gdeg
    n0 = max(1, (rbar - lowest) // (gdeg - 2) + 1)
    tail = r_norm(base, R) * q ** n0 / (1 - q)
    return total, float(tail)


# ---------------------------------------------------------------------------
# iterative normal form


@dataclass
class NormalFormResult:
    Z_total: PolyHamiltonian
    generators: list
    mu: float
    norm_report: list
    N: float
    rbar: int
    remainder_perp: PolyHamiltonian | None = None
    tail_total: float = 0.0

    def ledger_json(self) -> str:
        return json.dumps(self.norm_report, indent=1, sort_keys=True)


def normal_form_iterate(model: FrequencyModel, P: PolyHamiltonian, rbar: int, N: float, R: float,
                        partition: ClusterPartition, *, tol_div: float | None = None,
                        tau: float | None = None, mu_max: float | None = None) -> NormalFormResult:
    """Normalise ``H0 + P`` degree by degree up to ``rbar``."""
    _check_partition(model, partition)
    H0 = QuadraticDiagonal(partition.model, partition.N)
    P = P.truncated(rbar)
    if not P:
        return NormalFormResult(PolyHamiltonian({}, P.d), [], 0.0, [], N, rbar,
                                PolyHamiltonian({}, P.d))
    first = max(min(P.grades), 3)
    if tau is None:
        default_tol_div(partition.model, partition.N, first)
        tau = _TOL_CACHE[(id(partition.model), partition.N, first)][2].tau_fit
    n_eff = max(N, 1)
    mu = r_norm(P, R) * n_eff ** tau / R ** 2
    if mu_max is not None and mu >= mu_max:
        raise ConvergenceError(f"smallness parameter mu={mu:.3g} exceeds {mu_max}")
    Z = PolyHamiltonian({}, P.d)
    perp_total = PolyHamiltonian({}, P.d)
    gens, report = [], []
    tail_total = 0.0
    cur = P
    for k in range(min(P.grades), rbar + 1):
        Pk = cur.degree_part(k)
        rest = PolyHamiltonian._raw({key: v for key, v in cur.items() if len(key) > k}, cur.d)
        eff, perp = eff_and_perp(Pk, N)
        perp_total = perp_total + perp
        tol_k = tol_div
        if tol_k is None and eff:
            tol_k = default_tol_div(partition.model, partition.N, max(k, 3))
        sol = solve_homological(model, eff, N, partition, tol_k)
        Z_old, Z = Z, Z + sol.Z
        gens.append(sol.G)
        tail = 0.0
        if sol.G:
            transformed, tail = lie_transform_expand(
                (H0, Z_old + eff + rest), sol.G, rbar, first_order=sol.Z - eff, R=R)
            cur = PolyHamiltonian._raw({key: v for key, v in transformed.items() if len(key) > k},
                                       P.d)
        else:
            cur = rest
        tail_total += tail
        if mu_max is not None:
            mu_k = r_norm(cur, R) * n_eff ** tau / R ** 2
            if mu_k >= mu_max:
                raise ConvergenceError(f"mu={mu_k:.3g} exceeds {mu_max} after step {k}")
        report.append({"k": k, "norm_Z": r_norm(Z, R), "norm_P": r_norm(cur, R),
                       "norm_G": r_norm(sol.G, R), "norm_perp": r_norm(perp, R), "mu": mu,
                       "min_divisor": sol.min_divisor_used if math.isfinite(sol.min_divisor_used) else None,
                       "tail_bound": tail, "counts": sol.counts})
    return NormalFormResult(Z, gens, mu, report, N, rbar, perp_total, tail_total)


# ---------------------------------------------------------------------------
# generator flows


def _rk4(field, u: np.ndarray, t: float, steps: int) -> np.ndarray:
    h = t / steps
    for _ in range(steps):
        k1 = field(u)
        k2 = field(u + 0.5 * h * k1)
        k3 = field(u + 0.5 * h * k2)
        k4 = field(u + h * k3)
        u = u + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


def flow_array(G: ArrayPoly, u: np.ndarray, t: float = 1.0, steps: int = 16, *,
               check: bool = False, rtol: float = 1e-10) -> np.ndarray:
    """Integrate ``du/dt = X_G(u)`` with classical RK4 on the array form."""
    if t == 0 or len(G) == 0:
        return u.copy()
    out = _rk4(G.vector_field, u, t, steps)
    if check:
        half = _rk4(G.vector_field, u, t, 2 * steps)
        err = np.abs(out - half).max()
        scale = max(np.abs(half).max(), 1e-300)
        if err > rtol * scale:
            quarter = _rk4(G.vector_field, u, t, 4 * steps)
            err2 = np.abs(half - quarter).max()
            order = math.log2(err / err2) if err2 > 0 else math.inf
            if err2 > rtol * scale:
                raise ConvergenceError(f"generator flow not converged: step-halving error "
                                       f"{err2:.3e}, observed order {order:.2f}")
            return quarter
        return half
    return out


def flow_integrate_generator(G: PolyHamiltonian, u0: ModeSequence, t: float = 1.0,
                             steps: int = 16, check: bool = True) -> ModeSequence:
    """Time-``t`` flow of the generator's Hamiltonian vector field."""
    if t == 0 or not G:
        return u0
    N = max(G.site_radius(), u0.N, 1)
    box = get_box(G.d if G.d is not None else u0.d, N)
    vec = flow_array(G.compiled(box), box.sequence_to_array(u0), t, steps, check=check)
    return box.array_to_sequence(vec, u0.N)


def transport(generators, u: ModeSequence, inverse: bool = False, steps: int = 16,
              check: bool = False) -> ModeSequence:
    """Apply ``T = Phi_G1 o Phi_G2 o ...`` (or its inverse) to a state.

    With ``H o T = H0 + Z + ...``, normal-form coordinates ``v`` map to physical
    ``u = T(v)``: the last generator acts first.
    """
    order = list(generators) if inverse else list(reversed(generators))
    sign = -1.0 if inverse else 1.0
    for G in order:
        if isinstance(G, ArrayPoly):
            box = G.box
            vec = flow_array(G, box.sequence_to_array(u), sign, steps, check=check)
            u = box.array_to_sequence(vec, u.N)
        else:
            u = flow_integrate_generator(G, u, sign, steps, check)
    return u
