import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import tomli_w

from kfbias.cli import cmd_validate, main, run
from kfbias.config import parse_config

AR1 = """\
[model]
kind = "ar1"
phi0 = 0.7
q = 0.3
r = 0.5

[bias]
{bias}

[run]
T = {T}
seed = 42
{extra}
"""


def write_config(tmp_path, bias="theta = [0.85]", T=100, extra="", name="s.toml", text=None):
    path = tmp_path / name
    path.write_text(text if text is not None else AR1.format(bias=bias, T=T, extra=extra))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_ar1_demo_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["ar1-demo", "--config", write_config(tmp_path), "--out", str(out)]) == 0
    rows = read_csv(out / "ar1_demo.csv")
    assert rows[0] == ["t", "exact_error", "approx_error", "abs_gap"]
    assert len(rows) == 101
    data = np.array(rows[1:], dtype=float)
    assert np.array_equal(data[:, 0], np.arange(1, 101))
    assert np.allclose(data[:, 3], np.abs(data[:, 1] - data[:, 2]))
    # the two curves move together
    assert np.corrcoef(data[:, 1], data[:, 2])[0, 1] > 0.9
    report = json.loads((out / "report.json").read_text())
    assert report["summary"]["max_gap"] == pytest.approx(data[:, 3].max())
    for f in report["files"]:
        assert (out / f).exists()
    assert parse_config(tomli_w.dumps(report["config"])) == parse_config(
        open(write_config(tmp_path)).read())


def test_ar1_demo_scaling(tmp_path):
    plain, scaled = tmp_path / "a", tmp_path / "b"
    main(["ar1-demo", "--config", write_config(tmp_path), "--out", str(plain)])
    main(["ar1-demo", "--config",
          write_config(tmp_path, extra="emit_scaled_by_100 = true", name="x.toml"),
          "--out", str(scaled)])
    a = np.array(read_csv(plain / "ar1_demo.csv")[1:], dtype=float)
    b = np.array(read_csv(scaled / "ar1_demo.csv")[1:], dtype=float)
    assert np.allclose(b[:, 1:], 100 * a[:, 1:], rtol=1e-12)


def test_ar1_demo_zero_bias(tmp_path):
    out = tmp_path / "out"
    main(["ar1-demo", "--config", write_config(tmp_path, bias="epsilon = [0.0]"),
          "--out", str(out)])
    data = np.array(read_csv(out / "ar1_demo.csv")[1:], dtype=float)
    assert np.all(data[:, 1:] == 0.0)


def test_ar1_demo_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    main(["ar1-demo", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["ar1-demo", "--config", cfg, "--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "ar1_demo.csv").read_bytes()
    b = (tmp_path / "b" / "ar1_demo.csv").read_bytes()
    assert a == b
    assert a.endswith(b"\n") and b"," in a


def test_seed_override(tmp_path):
    cfg = write_config(tmp_path)
    main(["ar1-demo", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["ar1-demo", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"])
    assert (tmp_path / "a" / "ar1_demo.csv").read_bytes() != \
        (tmp_path / "b" / "ar1_demo.csv").read_bytes()


def test_ar1_demo_requires_ar1(tmp_path):
    text = ('[model]\nkind = "tanh"\ntheta0 = 0.9\nq = 0.3\nr = 0.5\n[bias]\n'
            'epsilon = [0.01]\n[run]\nT = 10\nseed = 1\n')
    assert main(["ar1-demo", "--config", write_config(tmp_path, text=text),
                 "--out", str(tmp_path / "o")]) == 2


PROPAGATE_HEADER = ["t", "m", "residual", "V", "S", "P", "Vy", "Sy", "Py", "gain",
                    "filter_P"]


def test_propagate_golden_header(tmp_path):
    out = tmp_path / "out"
    assert main(["propagate", "--config", write_config(tmp_path, T=300),
                 "--out", str(out)]) == 0
    rows = read_csv(out / "propagate.csv")
    assert rows[0] == PROPAGATE_HEADER
    data = np.array(rows[1:], dtype=float)
    P = data[:, PROPAGATE_HEADER.index("P")]
    assert abs(P[-1] - 0.3 / 0.51) < 1e-12
    assert abs(P[-1] - 0.58824) < 5e-6


def test_propagate_zero_bias_error_block(tmp_path):
    out = tmp_path / "out"
    main(["propagate", "--config", write_config(tmp_path, bias="epsilon = [0.0]"),
          "--out", str(out)])
    rows = read_csv(out / "propagate.csv")
    data = np.array(rows[1:], dtype=float)
    V = data[:, PROPAGATE_HEADER.index("V")]
    fP = data[:, PROPAGATE_HEADER.index("filter_P")]
    assert np.max(np.abs(V - fP)) <= 1e-10


def test_propagate_flattened_headers(tmp_path):
    text = ('[model]\nkind = "ar1_scaled_obs"\nphi0 = 0.7\nc0 = 1.0\nq = 0.3\nr = 0.5\n'
            '[bias]\nepsilon = [0.05, 0.05]\n[run]\nT = 5\nseed = 1\n')
    out = tmp_path / "out"
    assert main(["propagate", "--config", write_config(tmp_path, text=text),
                 "--out", str(out)]) == 0
    assert read_csv(out / "propagate.csv")[0] == PROPAGATE_HEADER


def test_validate_small_run(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, bias="epsilon = [0.05]", T=50,
                       extra="replications = 4000")
    assert main(["validate", "--config", cfg, "--out", str(out)]) == 0
    rows = read_csv(out / "validate.csv")
    assert rows[0] == ["t", "entry", "theory", "empirical", "se", "z", "pass"]
    # 4 times x 6 blocks for a scalar model
    assert len(rows) == 1 + 24
    assert all(r[-1] == "true" for r in rows[1:])


def test_validate_detects_corruption(tmp_path):
    cfg = parse_config(AR1.format(bias="epsilon = [0.05]", T=50, extra="replications = 4000"))

    def corrupt(theory):
        theory["S"][2] += 1.0
        return theory

    report = cmd_validate(cfg, tmp_path, corrupt=corrupt)
    assert report.exit_code == 1
    assert report.summary["failures"] == ["t=20 S[0,0]"]
    assert (tmp_path / "validate.csv").exists()


def test_validate_two_replications_is_vacuous(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, extra="replications = 1000")
    assert main(["validate", "--config", cfg, "--out", str(out),
                 "--replications", "2"]) == 0
    rows = read_csv(out / "validate.csv")
    assert all(r[4] == "inf" for r in rows[1:])


def test_validate_needs_replications(tmp_path):
    assert main(["validate", "--config", write_config(tmp_path),
                 "--out", str(tmp_path / "o")]) == 2


def test_order_check_exact_model(tmp_path):
    text = ('[model]\nkind = "ar1_drift"\nmu0 = 0.2\nphi = 0.7\nq = 0.3\nr = 0.5\n'
            '[bias]\nepsilon = [0.1]\n[run]\nT = 100\nseed = 3\n'
            'scales = [0.1, 0.05, 0.025]\n')
    out = tmp_path / "out"
    assert main(["order-check", "--config", write_config(tmp_path, text=text),
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["summary"]["status"] == "exact to machine precision"
    assert read_csv(out / "order_check.csv")[0] == ["scale", "residual"]


def test_order_check_threshold_decides_exit(tmp_path):
    scales = "scales = [0.1, 0.05, 0.025, 0.0125]\n"
    low = write_config(tmp_path, extra=scales + "slope_threshold = 0.9", name="lo.toml")
    assert main(["order-check", "--config", low, "--out", str(tmp_path / "a")]) == 0
    high = write_config(tmp_path, extra=scales + "slope_threshold = 3.0", name="hi.toml")
    assert main(["order-check", "--config", high, "--out", str(tmp_path / "b")]) == 1


def test_order_check_single_scale(tmp_path):
    cfg = write_config(tmp_path, extra="scales = [0.1]")
    assert main(["order-check", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_config_error_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, extra="bogus = 1")
    assert main(["propagate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "run.bogus" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["propagate", "--config", str(tmp_path / "nope.toml")]) == 2


def test_numeric_error_exit_code(tmp_path):
    text = AR1.format(bias="epsilon = [0.1]", T=10, extra="").replace("phi0 = 0.7",
                                                                       "phi0 = 1.0")
    assert main(["propagate", "--config", write_config(tmp_path, text=text),
                 "--out", str(tmp_path / "o")]) == 3


def test_default_output_dir_from_config(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = write_config(tmp_path, extra='output_dir = "results"')
    assert main(["propagate", "--config", cfg]) == 0
    assert (tmp_path / "results" / "propagate.csv").exists()


def test_run_returns_report(tmp_path):
    cfg = parse_config(AR1.format(bias="theta = [0.85]", T=20, extra=""))
    report = run("propagate", cfg, tmp_path)
    assert report.files == ["propagate.csv", "report.json"]
    assert report.wall_clock_seconds >= 0


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path, T=10)
    proc = subprocess.run([sys.executable, "-m", "kfbias.cli", "ar1-demo", "--config", cfg,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "max_gap" in json.loads(proc.stdout)
