"""Command-line experiment runner.

``birkhoff-lab TASK --config run.ini --out results/`` validates the whole
configuration, runs one task and writes its artifacts next to a
``manifest.json``.  Exit status: 0 ok, 2 config, 3 near-resonance, 4 budget,
5 numerical convergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import TASKS, ExperimentConfig, load_config
from .errors import ConfigError, LabError
from .frequencies import NLSModel, equivalence_classes, sample_potential
from .normal_form import normal_form_iterate
from .poly import expand_nonlinearity, tame_ratios, torus_volume
from .resonance import build_clusters, measure_monte_carlo, verify_nonresonance
from .spectral import (FieldState, Grid, plane_wave_experiment, qhd_lambda, qhd_simulate,
                       simulate_beam, simulate_nls)


def to_jsonable(obj):
    """Plain JSON types; non-finite floats become strings so output stays strict JSON."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, complex):
        return [to_jsonable(obj.real), to_jsonable(obj.imag)]
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_json"):
        return to_jsonable(obj.to_json())
    return str(obj)


def dump_json(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# initial data


def random_modes(grid: Grid, support: int, decay: float, rng: np.random.Generator,
                 zero_mode: bool = True) -> np.ndarray:
    z = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    modes = np.where(grid.euclid <= support, z / (1 + grid.euclid) ** decay, 0)
    if not zero_mode:
        modes[(0,) * grid.d] = 0
    return grid.dealias(modes)


def _real_field(grid: Grid, modes: np.ndarray) -> np.ndarray:
    phys = grid.to_physical(modes).real
    return phys - phys.mean()


# ---------------------------------------------------------------------------
# tasks; each returns {filename: text}


def task_resonance_scan(cfg: ExperimentConfig, threads: int) -> dict:
    p = cfg.task("resonance-scan")
    model = cfg.build_model()
    wit = verify_nonresonance(model, cfg.session["N"], p["r"], engine=p["engine"],
                              budget=p["budget"], nr2=p["nr2"], workers=threads)
    return {"witness.json": dump_json(wit.to_json()),
            "ladder.csv": _csv(["N", "min_nonzero"], wit.ladder)}


def task_cluster_build(cfg: ExperimentConfig, threads: int) -> dict:
    p = cfg.task("cluster-build")
    model = cfg.build_model()
    part = build_clusters(model, cfg.session["N"], p["C0"], p["delta"], p["C1_origin"],
                          p["C2_max"], p["C3_min"], check_separation=p["check_separation"])
    d = cfg.session["d"]
    rows = []
    for c, sites in enumerate(part.clusters):
        for j in sites:
            rows.append([c, *j, sum(x * x for x in j)])
    header = ["cluster", *[f"j{i}" for i in range(d)], "euclid_sq"]
    return {"partition.json": dump_json({**part.to_json(), "witness": part.witness}),
            "clusters.csv": _csv(header, rows)}


def task_normal_form(cfg: ExperimentConfig, threads: int) -> dict:
    p = cfg.task("normal-form")
    model = cfg.build_model()
    N = cfg.session["N"]
    P = expand_nonlinearity(model, cfg.fcoeffs(), p["rbar"], N)
    part = build_clusters(model, N, p["C0"], p["delta"])
    res = normal_form_iterate(model, P, p["rbar"], p["N_nf"] or N, p["R"], part,
                              tol_div=p["tol_div"], mu_max=p["mu_max"])
    summary = {"mu": res.mu, "N_nf": res.N, "rbar": res.rbar, "tail_total": res.tail_total,
               "n_terms_P": len(P), "n_terms_Z": len(res.Z_total),
               "n_terms_perp": len(res.remainder_perp or {}),
               "generator_terms": [len(G) for G in res.generators]}
    out = {"ledger.json": res.ledger_json() + "\n",
           "normal_form.json": dump_json(summary),
           "Z_total.jsonl": res.Z_total.to_jsonl()}
    for k, G in zip((row["k"] for row in res.norm_report), res.generators):
        out[f"generator_{k}.jsonl"] = G.to_jsonl()
    return out


def _trajectory_files(cfg: ExperimentConfig, traj, extra: dict) -> dict:
    meta = {k: v for k, v in traj.sidecar().items() if k != "final_state"}
    meta.update(extra)
    meta["config"] = cfg.as_json()
    return {"trajectory.csv": traj.to_csv(), "trajectory.json": dump_json(meta)}


def task_simulate(cfg: ExperimentConfig, threads: int) -> dict:
    p = cfg.task("simulate")
    s = cfg.session
    model = cfg.build_model()
    kind = cfg.model_block["kind"]
    if kind == "planewave":
        raise ConfigError("use the plane-wave task for plane-wave models")
    rng = np.random.default_rng(s["seed"])
    grid = Grid.for_model(model, s["M"])
    fc = cfg.fcoeffs()
    classes = None
    if p["classes"] and kind != "qhd":
        classes = equivalence_classes(model, min(s["N"], s["M"]))
    if kind == "qhd":
        m = float(model.m)
        lam = qhd_lambda(model)
        kappa = 1.0 / (4 * lam ** 2)
        avg = lambda a: grid.to_modes(a) / math.sqrt(grid.vol)  # noqa: E731
        rho = _real_field(grid, random_modes(grid, p["support"], p["decay"], rng, False))
        phi = _real_field(grid, random_modes(grid, p["support"], p["decay"], rng, False))
        rho *= p["epsilon"] / 2 * m / grid.sobolev_norm(avg(rho), p["s_escape"], False)
        phi *= p["epsilon"] / 2 * math.sqrt(kappa) / grid.sobolev_norm(avg(phi), p["s_escape"], False)
        traj = qhd_simulate(model, rho, phi, p["dt"], p["steps"], fc, s["M"], p["sample_every"],
                            s["slist"], p["s_escape"])
    else:
        u = random_modes(grid, p["support"], p["decay"], rng)
        u *= p["epsilon"] / grid.sobolev_norm(u, p["s_escape"])
        if kind == "nls":
            traj = simulate_nls(model, fc, FieldState(u, s["M"]), p["dt"], p["steps"],
                                p["sample_every"], s["slist"], classes, p["escape_factor"],
                                p["s_escape"], grid)
        else:
            traj = simulate_beam(model, fc, FieldState(u, s["M"]), FieldState(np.conj(u), s["M"]),
                                 p["dt"], p["steps"], p["sample_every"], s["slist"], classes)
    return _trajectory_files(cfg, traj, {"seed": s["seed"], "fcoeffs": fc})


def task_plane_wave(cfg: ExperimentConfig, threads: int) -> dict:
    p = cfg.task("plane-wave")
    s = cfg.session
    if cfg.model_block["kind"] != "planewave":
        raise ConfigError("plane-wave task needs [model] kind = planewave")
    if len(p["mvec"]) != s["d"]:
        raise ConfigError(f"[plane-wave] mvec needs {s['d']} entries")
    model = cfg.build_model()
    rng = np.random.default_rng(s["seed"])
    grid = Grid.for_model(model, s["M"])
    z = random_modes(grid, p["support"], p["decay"], rng, zero_mode=False)
    mpos = tuple(x % grid.n for x in p["mvec"])
    shifted = np.roll(z, shift=p["mvec"], axis=tuple(range(s["d"])))
    shifted[mpos] = 0
    shifted = grid.dealias(shifted)
    shifted *= p["epsilon"] / grid.sobolev_norm(shifted, s["slist"][-1])
    pert = grid.to_sequence(shifted)
    traj = plane_wave_experiment(model, p["mvec"], None, pert, p["dt"], p["steps"],
                                 fcoeffs=cfg.fcoeffs(), M=s["M"], sample_every=p["sample_every"],
                                 slist=s["slist"], l2_tol=p["l2_tol"])
    return _trajectory_files(cfg, traj, {"seed": s["seed"]})


def task_measure_mc(cfg: ExperimentConfig, threads: int) -> dict:
    p = cfg.task("measure-mc")
    s = cfg.session
    if cfg.model_block["kind"] != "nls":
        raise ConfigError("measure-mc samples potentials of the nls model")
    g = cfg.build_model().metric

    def sampler(seed):
        return NLSModel(g, sample_potential(seed, p["n"], s["N"], s["d"]))

    table = measure_monte_carlo(sampler, s["N"], p["r"], p["gammas"], p["trials"], p["tau"],
                                seed0=s["seed"])
    rows = [[r["gamma"], r["threshold"], r["violating"], r["fraction"], r.get("envelope", "")]
            for r in table.rows]
    return {"mc.json": dump_json(table.to_json()),
            "mc.csv": _csv(["gamma", "threshold", "violating", "fraction", "envelope"], rows)}


def task_tame_check(cfg: ExperimentConfig, threads: int) -> dict:
    p = cfg.task("tame-check")
    s = cfg.session
    if cfg.model_block["kind"] != "nls":
        raise ConfigError("tame-check applies to the nls model")
    fc = cfg.fcoeffs()
    if len(fc) < 2 or any(fc[2:]) or fc[0]:
        raise ConfigError("tame-check needs a purely quartic nonlinearity (fcoeffs = 0, c)")
    if p["s0"] <= s["d"] / 2:
        raise ConfigError("tame-check needs s0 > d/2")
    model = cfg.build_model()
    vol = torus_volume(model)
    rows, maxima = [], []
    for N in p["sizes"]:
        r = tame_ratios(fc[1], vol, N, p["s"], p["s0"], p["samples"], seed=s["seed"], d=s["d"],
                        decay=p["decay"])
        rows.append([N, float(r.max()), float(r.mean()), float(r.min())])
        maxima.append(float(r.max()))
    spread = max(maxima) / min(maxima)
    summary = {"sizes": p["sizes"], "max_ratio": maxima, "spread": spread,
               "stable": spread <= p["stable_factor"], "stable_factor": p["stable_factor"]}
    return {"tame.csv": _csv(["N", "max_ratio", "mean_ratio", "min_ratio"], rows),
            "tame.json": dump_json(summary)}


TASK_FUNCS = {
    "resonance-scan": task_resonance_scan,
    "cluster-build": task_cluster_build,
    "normal-form": task_normal_form,
    "simulate": task_simulate,
    "plane-wave": task_plane_wave,
    "measure-mc": task_measure_mc,
    "tame-check": task_tame_check,
}


# ---------------------------------------------------------------------------
# artifact writing


def versions() -> dict:
    import mpmath
    import scipy
    return {"birkhoff_lab": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "mpmath": mpmath.__version__}


def _write_atomic(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _error_record(exc: BaseException) -> dict:
    rec = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("key", "divisor", "estimate", "budget"):
        v = getattr(exc, attr, None)
        if v is not None:
            rec[attr] = v
    return rec


def run_experiment(cfg: ExperimentConfig, task: str, out_dir: str | Path,
                   threads: int | None = None) -> int:
    """Run ``task`` and write its artifacts plus ``manifest.json``; returns the exit status.

    Artifacts are only written when the task succeeds; the manifest is always
    written and carries the error on failure.
    """
    if task not in TASK_FUNCS:
        raise ConfigError(f"unknown task {task!r}")
    threads = threads or cfg.session["threads"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    error, code, files = None, 0, {}
    try:
        files = TASK_FUNCS[task](cfg, threads)
    except LabError as exc:
        error, code = _error_record(exc), exc.exit_code
    except (ValueError, ArithmeticError) as exc:
        # invalid parameter combinations surfacing inside a module
        error, code = _error_record(exc), ConfigError.exit_code
    except Exception as exc:  # noqa: BLE001 - recorded, then reported as an internal failure
        error, code = _error_record(exc), 1
    wall = time.perf_counter() - t0
    listing = []
    for name in sorted(files):
        data = files[name]
        _write_atomic(out / name, data)
        listing.append({"name": name, "bytes": len(data.encode()),
                        "sha256": hashlib.sha256(data.encode()).hexdigest()})
    manifest = {"task": task, "exit_code": code, "status": "ok" if code == 0 else "error",
                "error": error, "config_sha256": cfg.sha256, "config": cfg.as_json(),
                "seed": cfg.session["seed"], "threads": threads, "versions": versions(),
                "wall_time_s": wall, "outputs": listing}
    _write_atomic(out / "manifest.json", dump_json(manifest))
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="birkhoff-lab", description=__doc__.splitlines()[0])
    ap.add_argument("task", choices=TASKS)
    ap.add_argument("--config", required=True, metavar="PATH")
    ap.add_argument("--out", metavar="DIR", help="output directory (overrides [session] out)")
    ap.add_argument("--threads", type=int, metavar="K")
    ap.add_argument("--seed", type=int, metavar="INT", help="overrides [session] seed")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.session["seed"] = args.seed
            cfg.text += f"\n# seed override {args.seed}\n"
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = args.out or cfg.session["out"]
        if not out:
            raise ConfigError("no output directory: pass --out or set [session] out")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    code = run_experiment(cfg, args.task, out, args.threads)
    if code:
        rec = json.loads(Path(out, "manifest.json").read_text())["error"]
        print(f"{args.task} failed ({rec['type']}): {rec['message']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
