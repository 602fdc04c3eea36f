"""Scenario configuration files (TOML).

Schema::

    [model]
    kind = "ar1"          # ar1 | ar1_drift | ar1_scaled_obs | tanh
    phi0 = 0.7            # kind-specific parameters, see MODEL_KINDS
    q = 0.3
    r = 0.5

    [bias]
    theta = [0.85]        # exactly one of theta / epsilon
    # epsilon = [0.15]

    [run]
    T = 100
    seed = 42
    replications = 200000           # optional, needed by `validate`
    scales = [0.1, 0.05, 0.025]     # optional, needed by `order-check`
    direction = [1.0]               # optional, defaults to epsilon / |epsilon|
    times = [1, 5, 20, 50]          # optional
    slope_threshold = 1.8           # optional
    emit_scaled_by_100 = false
    output_dir = "out"

Unknown sections or keys are rejected.
"""
from __future__ import annotations

import re
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .model import (BiasSpec, ParameterVector, StateSpaceModel, make_ar1, make_ar1_drift,
                    make_ar1_scaled_obs, make_tanh_model)

__all__ = ["ScenarioConfig", "MODEL_KINDS", "parse_config", "load_config", "dump_config"]

# kind -> (factory, parameter names in factory order, names forming theta0)
MODEL_KINDS = {
    "ar1": (make_ar1, ("phi0", "q", "r"), ("phi0",)),
    "ar1_drift": (make_ar1_drift, ("mu0", "phi", "q", "r"), ("mu0",)),
    "ar1_scaled_obs": (make_ar1_scaled_obs, ("phi0", "c0", "q", "r"), ("phi0", "c0")),
    "tanh": (make_tanh_model, ("theta0", "q", "r"), ("theta0",)),
}

RUN_KEYS = {"T", "seed", "replications", "scales", "direction", "times",
            "slope_threshold", "emit_scaled_by_100", "output_dir"}


@dataclass(frozen=True)
class ScenarioConfig:
    model_kind: str
    model_params: dict
    T: int
    seed: int
    theta: Optional[tuple] = None
    epsilon: Optional[tuple] = None
    replications: Optional[int] = None
    scales: Optional[tuple] = None
    direction: Optional[tuple] = None
    times: Optional[tuple] = None
    slope_threshold: Optional[float] = None
    emit_scaled_by_100: bool = False
    output_dir: str = "out"

    def build_model(self) -> StateSpaceModel:
        factory, names, _ = MODEL_KINDS[self.model_kind]
        return factory(*(self.model_params[n] for n in names))

    @property
    def theta0(self) -> ParameterVector:
        _, _, theta_names = MODEL_KINDS[self.model_kind]
        return ParameterVector([self.model_params[n] for n in theta_names])

    @property
    def bias(self) -> BiasSpec:
        if self.epsilon is not None:
            return BiasSpec(self.epsilon)
        return BiasSpec.between(self.theta0, ParameterVector(self.theta))

    @property
    def theta_filter(self) -> ParameterVector:
        return self.theta0.shifted(self.bias)

    def order_direction(self) -> np.ndarray:
        if self.direction is not None:
            return np.asarray(self.direction, dtype=float)
        eps = self.bias.epsilon
        norm = np.linalg.norm(eps)
        if norm == 0:
            raise ConfigError("order check needs a non-zero bias or an explicit direction",
                              field="run.direction")
        return eps / norm

    def to_dict(self) -> dict:
        bias = {"epsilon": list(self.epsilon)} if self.epsilon is not None \
            else {"theta": list(self.theta)}
        run = {"T": self.T, "seed": self.seed,
               "emit_scaled_by_100": self.emit_scaled_by_100,
               "output_dir": self.output_dir}
        for name in ("replications", "slope_threshold"):
            if getattr(self, name) is not None:
                run[name] = getattr(self, name)
        for name in ("scales", "direction", "times"):
            if getattr(self, name) is not None:
                run[name] = list(getattr(self, name))
        return {"model": {"kind": self.model_kind, **self.model_params},
                "bias": bias, "run": run}

    def replace(self, **changes) -> "ScenarioConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ScenarioConfig(**values)


def _line_of(text: str, section: Optional[str], key: Optional[str]) -> Optional[int]:
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section and re.match(
                rf"^\"?{re.escape(key)}\"?\s*=", line):
            return lineno
    return None


def _number(value, field, text, section, key, integer=False):
    ok = isinstance(value, int) if integer else isinstance(value, (int, float))
    if isinstance(value, bool) or not ok:
        kind = "an integer" if integer else "a number"
        raise ConfigError(f"expected {kind}, got {value!r}", field=field,
                          line=_line_of(text, section, key))
    if not integer and not np.isfinite(value):
        raise ConfigError(f"expected a finite number, got {value!r}", field=field,
                          line=_line_of(text, section, key))
    return int(value) if integer else float(value)


def _vector(value, field, text, section, key, integer=False):
    if not isinstance(value, list):
        value = [value]
    if not value:
        raise ConfigError("expected a non-empty list", field=field,
                          line=_line_of(text, section, key))
    return tuple(_number(v, field, text, section, key, integer) for v in value)


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate a configuration document."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", line=getattr(exc, "lineno", None)) from exc

    for section in doc:
        if section not in ("model", "bias", "run"):
            raise ConfigError(f"unknown section '{section}'", field=section,
                              line=_line_of(text, section, None))
    for section in ("model", "bias", "run"):
        if not isinstance(doc.get(section), dict):
            raise ConfigError(f"missing section [{section}]", field=section)

    model = dict(doc["model"])
    kind = model.pop("kind", None)
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown or missing model kind {kind!r}; expected one of "
                          f"{sorted(MODEL_KINDS)}", field="model.kind",
                          line=_line_of(text, "model", "kind"))
    _, names, theta_names = MODEL_KINDS[kind]
    for key in model:
        if key not in names:
            raise ConfigError(f"unknown key for model kind '{kind}'", field=f"model.{key}",
                              line=_line_of(text, "model", key))
    params = {}
    for name in names:
        if name not in model:
            raise ConfigError(f"missing parameter for model kind '{kind}'",
                              field=f"model.{name}", line=_line_of(text, "model", None))
        params[name] = _number(model[name], f"model.{name}", text, "model", name)
    for name in ("q", "r"):
        if params[name] < 0:
            raise ConfigError("variance must be non-negative", field=f"model.{name}",
                              line=_line_of(text, "model", name))

    bias = doc["bias"]
    for key in bias:
        if key not in ("theta", "epsilon"):
            raise ConfigError("unknown key", field=f"bias.{key}",
                              line=_line_of(text, "bias", key))
    if ("theta" in bias) == ("epsilon" in bias):
        raise ConfigError("give exactly one of theta or epsilon", field="bias",
                          line=_line_of(text, "bias", None))
    bkey = "theta" if "theta" in bias else "epsilon"
    bvec = _vector(bias[bkey], f"bias.{bkey}", text, "bias", bkey)
    if len(bvec) != len(theta_names):
        raise ConfigError(f"expected {len(theta_names)} entries ({', '.join(theta_names)})",
                          field=f"bias.{bkey}", line=_line_of(text, "bias", bkey))

    run = doc["run"]
    for key in run:
        if key not in RUN_KEYS:
            raise ConfigError("unknown key", field=f"run.{key}",
                              line=_line_of(text, "run", key))
    for key in ("T", "seed"):
        if key not in run:
            raise ConfigError("missing required key", field=f"run.{key}",
                              line=_line_of(text, "run", None))
    T = _number(run["T"], "run.T", text, "run", "T", integer=True)
    if T < 1:
        raise ConfigError("T must be >= 1", field="run.T", line=_line_of(text, "run", "T"))
    seed = _number(run["seed"], "run.seed", text, "run", "seed", integer=True)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be in [0, 2**64)", field="run.seed",
                          line=_line_of(text, "run", "seed"))
    kw = {}
    if "replications" in run:
        kw["replications"] = _number(run["replications"], "run.replications", text,
                                     "run", "replications", integer=True)
        if kw["replications"] < 2:
            raise ConfigError("replications must be >= 2", field="run.replications",
                              line=_line_of(text, "run", "replications"))
    if "scales" in run:
        kw["scales"] = _vector(run["scales"], "run.scales", text, "run", "scales")
    if "direction" in run:
        kw["direction"] = _vector(run["direction"], "run.direction", text, "run", "direction")
        if len(kw["direction"]) != len(theta_names):
            raise ConfigError(f"expected {len(theta_names)} entries", field="run.direction",
                              line=_line_of(text, "run", "direction"))
    if "times" in run:
        kw["times"] = _vector(run["times"], "run.times", text, "run", "times", integer=True)
        if min(kw["times"]) < 1 or max(kw["times"]) > T:
            raise ConfigError(f"times must lie in [1, {T}]", field="run.times",
                              line=_line_of(text, "run", "times"))
    if "slope_threshold" in run:
        kw["slope_threshold"] = _number(run["slope_threshold"], "run.slope_threshold",
                                        text, "run", "slope_threshold")
    if "emit_scaled_by_100" in run:
        if not isinstance(run["emit_scaled_by_100"], bool):
            raise ConfigError("expected true or false", field="run.emit_scaled_by_100",
                              line=_line_of(text, "run", "emit_scaled_by_100"))
        kw["emit_scaled_by_100"] = run["emit_scaled_by_100"]
    if "output_dir" in run:
        if not isinstance(run["output_dir"], str):
            raise ConfigError("expected a string", field="run.output_dir",
                              line=_line_of(text, "run", "output_dir"))
        kw["output_dir"] = run["output_dir"]

    return ScenarioConfig(model_kind=kind, model_params=params, T=T, seed=seed,
                          **{bkey: bvec}, **kw)


def load_config(path) -> ScenarioConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(config: ScenarioConfig) -> str:
    return tomli_w.dumps(config.to_dict())
