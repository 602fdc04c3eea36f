"""Command-line front end.

Usage::

    kfbias {ar1-demo,propagate,validate,order-check} --config FILE
           [--out DIR] [--seed N] [--replications N]

Each run writes its CSV file(s) and a ``report.json`` into the output
directory.  Exit codes: 0 success, 1 validation failure, 2 configuration
error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import ScenarioConfig, load_config
from .errors import ConfigError, DomainError, NumericError
from .kalman import default_init, path_array, run_filter
from .oracle import (DEFAULT_TIMES, monte_carlo_moments, order_of_accuracy, simulate,
                     two_filter_exact_error)
from .propagation import ar1_expected_error_path, propagate

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
Z_LIMIT = 4.0
SLOPE_THRESHOLD = {"linear": 1.8, "ekf": 1.5}


@dataclass
class RunReport:
    command: str
    config: dict
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    exit_code: int = EXIT_OK

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "report.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _matrix_columns(name, arr):
    """Row-major flattened columns for a (T, ...) array; bare name when scalar."""
    T = arr.shape[0]
    flat = arr.reshape(T, -1)
    if flat.shape[1] == 1:
        return [name], flat
    idx = np.ndindex(*arr.shape[1:])
    return [f"{name}_" + "_".join(map(str, i)) for i in idx], flat


def _simulate_data(config: ScenarioConfig, model):
    return simulate(model, config.theta0, config.T, seed=config.seed)


def cmd_ar1_demo(config: ScenarioConfig, out_dir: Path) -> RunReport:
    """Exact versus closed-form AR(1) error path on one simulated trajectory."""
    if config.model_kind != "ar1":
        raise ConfigError("ar1-demo requires model kind 'ar1'", field="model.kind")
    model = config.build_model()
    theta0, theta = config.theta0, config.theta_filter
    eps = float(config.bias.epsilon[0])
    data = _simulate_data(config, model)
    init = default_init(model, theta0)
    exact = two_filter_exact_error(data.observations, model, theta0, theta, init)[:, 0]
    states = run_filter(model, theta, data.observations, init)
    gains = path_array(states, "gain").reshape(-1)
    xhat = path_array(states, "xhat").reshape(-1)
    xprev = np.concatenate([init.x0, xhat[:-1]])
    approx = ar1_expected_error_path(float(theta.values[0]), eps, gains, xprev)
    scale = 100.0 if config.emit_scaled_by_100 else 1.0
    gap = np.abs(exact - approx)
    path = out_dir / "ar1_demo.csv"
    _write_csv(path, ["t", "exact_error", "approx_error", "abs_gap"],
               ((t, scale * a, scale * b, scale * g)
                for t, a, b, g in zip(range(1, config.T + 1), exact, approx, gap)))
    return RunReport("ar1-demo", config.to_dict(), files=[path.name],
                     summary={"max_gap": float(gap.max()),
                              "max_gap_emitted": float(scale * gap.max()),
                              "scaled_by_100": config.emit_scaled_by_100,
                              "epsilon": eps})


def cmd_propagate(config: ScenarioConfig, out_dir: Path) -> RunReport:
    """Per-time conditional error mean and stacked covariance blocks."""
    model = config.build_model()
    data = _simulate_data(config, model)
    init = default_init(model, config.theta0)
    res = propagate(model, config.theta0, config.theta_filter, data.observations, init=init)
    header, cols = ["t"], [res.t[:, None]]
    for name, arr in (("m", res.m), ("residual", res.residual), ("V", res.V), ("S", res.S),
                      ("P", res.P), ("Vy", res.Vy), ("Sy", res.Sy), ("Py", res.Py),
                      ("gain", res.gains), ("filter_P", res.filter_P)):
        h, c = _matrix_columns(name, arr)
        header += h
        cols.append(c)
    table = np.hstack(cols)
    path = out_dir / "propagate.csv"
    _write_csv(path, header, ([int(r[0])] + list(r[1:]) for r in table))
    return RunReport("propagate", config.to_dict(), files=[path.name],
                     summary={"T": config.T, "final_P": res.P[-1].tolist(),
                              "final_V": res.V[-1].tolist(),
                              "max_abs_m": float(np.abs(res.m).max())})


VALIDATED_BLOCKS = ("V", "S", "P", "Vy", "Sy", "Py")
_SYMMETRIC = {"V", "P", "Vy", "Py"}


def cmd_validate(config: ScenarioConfig, out_dir: Path,
                 corrupt: Optional[Callable[[dict], dict]] = None) -> RunReport:
    """Monte Carlo check of the covariance recursion.

    ``corrupt`` receives the theory dictionary (block name -> array over
    checked times) and may return a modified copy; it exists to exercise the
    failure path.
    """
    if config.replications is None:
        raise ConfigError("validate needs run.replications", field="run.replications")
    model = config.build_model()
    if not model.is_linear_in_x:
        raise ConfigError("validate requires a model affine in the state", field="model.kind")
    times = tuple(sorted(set(config.times or DEFAULT_TIMES)))
    T = max(times)
    if T > config.T:
        raise ConfigError(f"checked times exceed T={config.T}", field="run.times")
    theta0, theta = config.theta0, config.theta_filter
    init = default_init(model, theta0)
    mc = monte_carlo_moments(model, theta0, theta, T, config.replications, config.seed,
                             times=times, init=init)
    # covariance paths of affine models do not depend on the data
    res = propagate(model, theta0, theta, np.zeros((T, model.n_y)), init=init)
    idx = [t - 1 for t in times]
    theory = {k: getattr(res, k)[idx] for k in VALIDATED_BLOCKS}
    if corrupt is not None:
        theory = corrupt({k: v.copy() for k, v in theory.items()})
    rows, failures, worst = [], [], 0.0
    for k in VALIDATED_BLOCKS:
        for ti, t in enumerate(times):
            th, emp, se = theory[k][ti], mc.moments[k][ti], mc.standard_errors[k][ti]
            for i, j in np.ndindex(*th.shape):
                if k in _SYMMETRIC and j < i:
                    continue
                diff = emp[i, j] - th[i, j]
                if np.isinf(se[i, j]) or diff == 0:
                    z = 0.0
                elif se[i, j] == 0:
                    z = float("inf")
                else:
                    z = diff / se[i, j]
                ok = abs(z) <= Z_LIMIT
                entry = f"{k}[{i},{j}]"
                rows.append((t, entry, th[i, j], emp[i, j], se[i, j], z, ok))
                worst = max(worst, abs(z))
                if not ok:
                    failures.append(f"t={t} {entry}")
    path = out_dir / "validate.csv"
    _write_csv(path, ["t", "entry", "theory", "empirical", "se", "z", "pass"], rows)
    summary = {"replications": config.replications, "times": list(times),
               "comparisons": len(rows), "failures": failures, "max_abs_z": worst,
               "z_limit": Z_LIMIT}
    return RunReport("validate", config.to_dict(), files=[path.name], summary=summary,
                     exit_code=EXIT_FAILED if failures else EXIT_OK)


def cmd_order_check(config: ScenarioConfig, out_dir: Path) -> RunReport:
    """Residual scaling of the first-order error mean against the two-filter oracle."""
    if config.scales is None or len(config.scales) < 3:
        raise ConfigError("order-check needs at least 3 scales", field="run.scales")
    model = config.build_model()
    threshold = config.slope_threshold
    if threshold is None:
        threshold = SLOPE_THRESHOLD["linear" if model.is_linear_in_x else "ekf"]
    try:
        result = order_of_accuracy(model, config.theta0, config.order_direction(),
                                   config.scales, config.T, config.seed)
    except DomainError as exc:
        raise ConfigError(str(exc), field="run.scales") from exc
    path = out_dir / "order_check.csv"
    _write_csv(path, ["scale", "residual"], zip(result.scales, result.residuals))
    passed = result.exact or result.slope >= threshold
    summary = {"slope": None if result.exact else result.slope, "threshold": threshold,
               "status": result.status, "exact": result.exact,
               "ekf_reference": not model.is_linear_in_x}
    return RunReport("order-check", config.to_dict(), files=[path.name], summary=summary,
                     exit_code=EXIT_OK if passed else EXIT_FAILED)


COMMANDS = {
    "ar1-demo": cmd_ar1_demo,
    "propagate": cmd_propagate,
    "validate": cmd_validate,
    "order-check": cmd_order_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kfbias",
        description="Propagate a parameter bias through the (extended) Kalman filter.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="scenario TOML file")
    parser.add_argument("--out", default=None, help="output directory (default ./out)")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    parser.add_argument("--replications", type=int, default=None,
                        help="override run.replications")
    return parser


def run(command: str, config: ScenarioConfig, out_dir=None) -> RunReport:
    """Run one command and write its artifacts; returns the report."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    report = COMMANDS[command](config, out)
    report.wall_clock_seconds = time.perf_counter() - start
    report.files.append("report.json")
    report.write(out)
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            config = load_config(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", field="--config") from exc
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("seed must be in [0, 2**64)", field="--seed")
            config = config.replace(seed=args.seed)
        if args.replications is not None:
            if args.replications < 2:
                raise ConfigError("replications must be >= 2", field="--replications")
            config = config.replace(replications=args.replications)
        report = run(args.command, config, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DomainError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(report.summary, sort_keys=True))
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
