import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from foliated_paths.cli_runner import EXIT_CONFIG, EXIT_OK, ExperimentConfig, ConfigError, main

SMALL = {
    "model": "flat",
    "mc": {"n_paths": 1000, "dt": 0.015625, "seed": 4},
    "cylinder_functions": {"u1": {"kind": "coordinate", "params": ["u1"]}},
    "point_functions": {"r2": "u1**2 + u2**2"},
    "cm_paths": {"pl": {"kind": "piecewise_linear", "coeffs": [[1.0, 0.3, -0.2]]}},
    "identities": ["weitzenbock", {"identity": "ibp_directional", "F": "u1", "h": "pl"}],
}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("dt", ["0.3", "0.1", "0.0001220703125", "-0.015625"])
def test_bad_dt_exits_with_config_code(dt, capsys):
    assert main(["verify", "ibp_directional", "--model", "flat", "--dt", dt]) == EXIT_CONFIG
    assert "dt must be a dyadic step" in capsys.readouterr().err


def test_non_numeric_dt_is_a_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["verify", "ibp_directional", "--dt", "abc"])
    assert e.value.code == EXIT_CONFIG


def test_too_few_paths_and_unknown_identity(capsys):
    assert main(["verify", "ibp_directional", "--n-paths", "999"]) == EXIT_CONFIG
    assert main(["verify", "frobnicate", "--n-paths", "1000", "--dt", "0.015625"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "n_paths" in err or "n-paths" in err
    assert "frobnicate" in err


def test_usage_errors_exit_2():
    assert main([]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as e:
        main(["nonsense"])
    assert e.value.code == EXIT_CONFIG
    assert main(["--threads", "0", "develop"]) == EXIT_CONFIG


def test_config_validation_names_the_field(tmp_path):
    for doc, field in [
        (dict(SMALL, mc={"n_paths": 10, "dt": 0.015625}), "mc.n_paths"),
        (dict(SMALL, mc={"n_paths": 1000, "dt": 0.02}), "mc.dt"),
        (dict(SMALL, identities=[{"identity": "ibp_directional", "F": "nope"}]), "identities[0].F"),
        (dict(SMALL, bogus=1), "bogus"),
        (dict(SMALL, model="klein_bottle"), "model"),
        (dict(SMALL, identities=["unknown_thing"]), "identities[0].identity"),
    ]:
        with pytest.raises(ConfigError) as e:
            ExperimentConfig.load(write(tmp_path, doc))
        assert e.value.field == field, (doc, e.value)
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    assert main(["suite", str(bad)]) == EXIT_CONFIG


def test_suite_writes_reports_and_summary(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    out = tmp_path / "out"
    assert main(["suite", cfg, "--out-dir", str(out)]) == EXIT_OK
    summary = rows(out / "summary.csv")
    assert [r["identity_name"] for r in summary] == ["weitzenbock", "ibp_directional[F=u1,h=pl]"]
    assert all(r["verdict"] == "pass" for r in summary)
    rep = json.loads((out / "reports" / "flat_product2_1__weitzenbock.json").read_text())
    assert rep["estimate"] == 0.0 and rep["verdict"] is True
    # --config before the subcommand is accepted too
    assert main(["--config", cfg, "--out-dir", str(tmp_path / "o2")]) == EXIT_OK


def test_reports_repeat_byte_for_byte_apart_from_runtime(tmp_path):
    cfg = write(tmp_path, SMALL)
    docs = []
    for t in ("1", "3"):
        out = tmp_path / f"t{t}"
        assert main(["suite", cfg, "--out-dir", str(out), "--threads", t]) == EXIT_OK
        doc = json.loads((out / "reports" / "flat_product2_1__ibp_directional_F=u1,h=pl.json").read_text())
        doc.pop("runtime_seconds")
        docs.append(json.dumps(doc, sort_keys=True))
    assert docs[0] == docs[1]


def test_report_merge_deduplicates(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    main(["suite", cfg, "--out-dir", str(a)])
    main(["suite", cfg, "--out-dir", str(b), "--seed", "11"])
    merged = tmp_path / "m.csv"
    code = main(["report-merge", str(a / "summary.csv"), str(a / "summary.csv"),
                 str(b / "summary.csv"), "-o", str(merged)])
    assert code == EXIT_OK
    got = rows(merged)
    # the deterministic weitzenbock row carries seed 0 in both runs
    assert len(got) == 3
    assert sorted(r["seed"] for r in got) == ["0", "11", "4"]
    assert main(["report-merge", str(tmp_path / "missing.csv"), "-o", str(merged)]) == EXIT_CONFIG


def test_verify_prints_csv(capsys):
    code = main(["verify", "ibp-directional", "--model", "flat", "--n-paths", "1000",
                 "--dt", "0.015625", "--seed", "3"])
    out = capsys.readouterr().out.splitlines()
    assert code == EXIT_OK
    assert out[0].split(",") == ["identity_name", "model", "n_paths", "dt", "epsilon", "estimate",
                                 "stderr", "verdict", "runtime", "seed"]
    assert out[1].endswith(",3") and ",pass," in out[1]


def test_simulate_and_dump(tmp_path, capsys):
    dump = tmp_path / "p.csv"
    code = main(["simulate", "--model", "su2", "--n-paths", "3", "--dt", "0.015625", "--eps", "1",
                 "--out-dir", str(tmp_path), "--dump", str(dump)])
    assert code == EXIT_OK
    data = np.load(tmp_path / "paths.npz")
    assert data["points"].shape == (3, 65, 4)
    got = rows(dump)
    assert len(got) == 3 * 65
    assert {"q0", "frame_00", "theta_22", "tau_01"} <= set(got[0])


def test_develop_circle(capsys):
    assert main(["develop", "--model", "heisenberg1", "--path", "circle", "--N", "2048"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "z=+6.28318530" in out
    assert "levy area: +3.14159265" in out
    assert main(["develop", "--path", "spiral"]) == EXIT_CONFIG


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "foliated_paths", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "report-merge" in r.stdout
    r = subprocess.run([sys.executable, "-m", "foliated_paths", "verify", "ibp_directional",
                        "--dt", "0.3"], capture_output=True, text=True)
    assert r.returncode == 2 and "2^-k" in r.stderr
