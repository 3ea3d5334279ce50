import json
import os
import subprocess
import sys

import pytest

from vsqrt.cli import main, validate_config
from vsqrt.errors import ValidationError

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")

GAMMA = {"kind": "gamma", "H": 0.3, "lambda": 1.0}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(tmp_path, command, cfg, *extra):
    out = tmp_path / command
    code = main([command, "-c", write_cfg(tmp_path, cfg), "-o", str(out), *extra])
    return code, out


def load(out, name):
    return json.loads((out / name).read_text())


def model(**kw):
    d = {"kernel": GAMMA, "b": 0.2, "beta": -0.5, "sigma": 0.4, "x0": 1.0}
    d.update(kw)
    return d


def test_schema_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        validate_config({"model": model(), "colour": "red"})
    with pytest.raises(ValidationError):
        validate_config({"model": dict(model(), extra=1)})
    with pytest.raises(ValidationError):
        validate_config({"model": model(kernel={"kind": "fractional"})})
    validate_config({"model": model(), "grid": {"step": 0.01, "horizon": 1.0}})


def test_validation_exit_code(tmp_path):
    code, out = run(tmp_path, "cf", {"model": model(), "bogus": 1})
    assert code == 1
    assert load(out, "error.json")["kind"] == "validation"
    assert load(out, "manifest.json")["status"] == "validation_error"


def test_inadmissible_parameters_exit_code(tmp_path):
    code, _ = run(tmp_path, "moments", {"model": model(sigma=-1.0)})
    assert code == 1


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["cf", "-c", str(bad), "-o", str(tmp_path / "x")]) == 1


def test_numerical_exit_code(tmp_path):
    cfg = {"model": model(kernel={"kind": "fractional", "H": 0.3}, beta=0.0)}
    code, out = run(tmp_path, "limit", cfg)
    assert code == 2
    err = load(out, "error.json")
    assert err["kind"] == "numerical" and "diagnostics" in err


def test_cf_trivial_forcing(tmp_path):
    cfg = {"model": model(), "grid": {"step": 0.01, "horizon": 1.0}, "forcing": {"atoms": []}}
    code, out = run(tmp_path, "cf", cfg)
    assert code == 0
    cf = load(out, "cf.json")
    assert cf["exponent_re"] == 0.0 and cf["exponent_im"] == 0.0


def test_moments_limit(tmp_path):
    with open(os.path.join(CONFIGS, "moments_example.json")) as fh:
        cfg = json.load(fh)
    cfg["grid"] = {"step": 0.05, "horizon": 5.0}
    code, out = run(tmp_path, "moments", cfg)
    assert code == 0
    res = load(out, "moments.json")
    assert res["limit"]["A"][0] == pytest.approx(0.8, abs=1e-3)
    assert res["mean_form_rel_diff"] < 1e-3
    assert (out / "moments.csv").read_text().startswith("t,mean[0]\n")


def test_check_fractional(tmp_path):
    with open(os.path.join(CONFIGS, "fractional_check.json")) as fh:
        cfg = json.load(fh)
    code, out = run(tmp_path, "check", cfg)
    assert code == 0
    res = load(out, "check.json")
    assert res["limit"]["independent_of_x0"] is True
    assert res["all_invariants_ok"] is True


def test_simulate_reproducible(tmp_path):
    cfg = {"model": model(), "grid": {"step": 0.05, "horizon": 1.0}, "simulation": {"paths": 300}, "seed": 11}
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["simulate", "-c", write_cfg(tmp_path, cfg), "-o", str(out), "--threads", str(k + 1)]) == 0
        outs.append(out)
    for name in ("ensemble.bin", "paths_summary.csv", "simulate.json", "manifest.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    man = load(outs[0], "manifest.json")
    assert man["status"] == "ok" and man["seed"] == 11
    assert man["outputs"] == ["ensemble.bin", "paths_summary.csv", "simulate.json"]
    assert set(man["versions"]) >= {"vsqrt", "numpy", "scipy", "python"}


def test_seed_override_changes_config_hash(tmp_path):
    cfg = {"model": model(), "grid": {"step": 0.1, "horizon": 1.0}, "simulation": {"paths": 10, "dump": False}}
    path = write_cfg(tmp_path, cfg)
    assert main(["simulate", "-c", path, "-o", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main(["simulate", "-c", path, "-o", str(tmp_path / "b"), "--seed", "2"]) == 0
    a, b = load(tmp_path / "a", "manifest.json"), load(tmp_path / "b", "manifest.json")
    assert a["config_sha256"] != b["config_sha256"]
    assert not (tmp_path / "a" / "ensemble.bin").exists()


def test_resolvent_and_riccati_outputs(tmp_path):
    cfg = {"model": model(), "grid": {"step": 0.01, "horizon": 1.0}, "forcing": {"atoms": [{"time": 0.0, "weight": -1.0}]}}
    assert run(tmp_path, "resolvent", cfg)[0] == 0
    code, out = run(tmp_path, "riccati", cfg)
    assert code == 0
    assert load(out, "riccati.json")["bounds"]["l2_ok"] is True


def test_console_script(tmp_path):
    cfg = write_cfg(tmp_path, {"model": model(), "grid": {"step": 0.05, "horizon": 0.5}})
    proc = subprocess.run(
        [sys.executable, "-m", "vsqrt.cli", "cf", "-c", cfg, "-o", str(tmp_path / "o")], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "cf.json").exists()
