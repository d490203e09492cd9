import hashlib
import json
import subprocess
import sys
from fractions import Fraction
from pathlib import Path

import pytest

from birkhoff_lab.cli import dump_json, main
from birkhoff_lab.config import parse_config, parse_metric, parse_rational
from birkhoff_lab.errors import ConfigError

BASE = """
[session]
d = 2
N = 4
M = 12
seed = 7

[model]
kind = nls
potential = sampled
"""


def write(tmp_path, body, name="exp.ini"):
    p = tmp_path / name
    p.write_text(BASE + body)
    return p


def run(tmp_path, task, body="", out="out", extra=()):
    cfg = write(tmp_path, body)
    outdir = tmp_path / out
    code = main([task, "--config", str(cfg), "--out", str(outdir), *extra])
    manifest = json.loads((outdir / "manifest.json").read_text()) if (outdir / "manifest.json").exists() else None
    return code, outdir, manifest


def test_rational_and_surd_parsing():
    assert parse_rational(" 3/10 ") == Fraction(3, 10)
    assert parse_rational("-2") == -2
    with pytest.raises(ValueError):
        parse_rational("0.1.2")
    g = parse_metric("1, 1/3+sqrt(2)/7; 1/3+sqrt(2)/7, 3/2")
    assert g.d == 2 and g.entries[0][1] == g.entries[1][0]


def test_unknown_key_is_rejected_before_any_output(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[session]\nN = 4\ncolour = red\n[model]\nkind = nls\n")
    code = main(["resonance-scan", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert not (tmp_path / "o").exists()
    assert "colour" in capsys.readouterr().err


@pytest.mark.parametrize("text,fragment", [
    ("[session]\nN = 4\n[model]\nkind = nls\n[extra]\nx = 1\n", "unknown section"),
    ("[session]\nN = 4\n", "missing section"),
    ("[session]\nN = 4\n[model]\nkind = beam\npotential = sampled\n", "nls model only"),
    ("[session]\nN = 4\nd = 2\n[model]\nkind = nls\nmetric = 1, sqrt(2); sqrt(2), 3\n",
     "needs [session] D"),
    ("[session]\nN = 4\n[model]\nkind = nls\nmetric = 1, 0, 0; 0, 1, 0; 0, 0, 1\n", "3x3"),
])
def test_config_validation(text, fragment):
    with pytest.raises(ConfigError, match=fragment.replace("[", r"\[").replace("]", r"\]")):
        parse_config(text)


def test_resonance_scan_outputs_and_manifest(tmp_path):
    code, out, man = run(tmp_path, "resonance-scan", "[resonance-scan]\nr = 3\n")
    assert code == 0 and man["status"] == "ok" and man["error"] is None
    witness = json.loads((out / "witness.json").read_text())
    assert witness["r"] == 3 and witness["N"] == 4 and witness["min_nonzero"] > 0
    listed = {o["name"] for o in man["outputs"]}
    assert listed == {"witness.json", "ladder.csv"}
    for o in man["outputs"]:
        data = (out / o["name"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == o["sha256"] and len(data) == o["bytes"]
    assert man["config_sha256"] == hashlib.sha256(write(tmp_path, "[resonance-scan]\nr = 3\n")
                                                  .read_text().encode()).hexdigest()
    assert {"python", "numpy", "birkhoff_lab"} <= set(man["versions"])


def test_integer_torus_witness_gamma(tmp_path):
    body = "[resonance-scan]\nr = 3\n"
    cfg = tmp_path / "t.ini"
    cfg.write_text("[session]\nN = 3\n[model]\nkind = nls\n" + body)
    assert main(["resonance-scan", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    w = json.loads((tmp_path / "o" / "witness.json").read_text())
    # every nonresonant divisor on the square torus is an even integer
    assert w["gamma_fit"] == 2 and w["tau_fit"] == 0


def test_normal_form_is_reproducible(tmp_path):
    body = "[normal-form]\nrbar = 4\nR = 1/100\n"
    outs = []
    for k in range(2):
        code, out, man = run(tmp_path, "normal-form", body, out=f"o{k}")
        assert code == 0, man["error"]
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir() if p.name != "manifest.json")
    assert "ledger.json" in names and "Z_total.jsonl" in names
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


@pytest.mark.parametrize("task,body,code", [
    ("normal-form", "[normal-form]\nrbar = 4\ntol_div = 1e6\n", 3),
    ("resonance-scan", "[resonance-scan]\nr = 4\nbudget = 1\nengine = enumerate\n", 4),
    ("normal-form", "[normal-form]\nrbar = 4\nR = 1/10\n", 5),
])
def test_runtime_errors_map_to_exit_codes(tmp_path, task, body, code):
    got, out, man = run(tmp_path, task, body)
    assert got == code
    assert man["exit_code"] == code and man["status"] == "error"
    assert man["outputs"] == [] and man["error"]["type"]
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json"]


def test_seed_override_changes_config_hash(tmp_path):
    _, _, a = run(tmp_path, "tame-check", "[tame-check]\nsamples = 5\nsizes = 4\n", out="a")
    _, _, b = run(tmp_path, "tame-check", "[tame-check]\nsamples = 5\nsizes = 4\n", out="b",
                  extra=("--seed", "8"))
    assert a["seed"] == 7 and b["seed"] == 8
    assert a["config_sha256"] != b["config_sha256"]


def test_dump_json_encodes_non_finite():
    text = dump_json({"x": float("inf"), "y": [float("nan"), 1.0]})
    assert json.loads(text) == {"x": "inf", "y": ["nan", 1.0]}


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, "[measure-mc]\ntrials = 10\ngammas = 1/10, 1/100\n")
    r = subprocess.run([sys.executable, "-m", "birkhoff_lab", "measure-mc", "--config", str(cfg),
                        "--out", str(tmp_path / "mc")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "mc" / "mc.csv").read_text().startswith("gamma")


def test_inline_comments_leave_metric_rows_intact():
    cfg = parse_config("[session]\nN = 2\nD = 2\n[model]\nkind = nls   # quartic\n"
                       "metric = 1, 1/3+sqrt(2)/7; 1/3+sqrt(2)/7, 3/2   # oblique\n")
    g = cfg.model_block["metric"]
    assert cfg.model_block["kind"] == "nls" and g.d == 2
    assert str(g.entries[1][1]) == str(parse_metric("3/2, 0; 0, 3/2").entries[0][0])
