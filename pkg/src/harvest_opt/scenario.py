"""Scenario files: a strict JSON schema mirroring ``MissionConfig``, plus the
three bundled benchmark scenarios.

Lengths are in mission units, rates in data per time unit.  Scalar ranges
and rates broadcast over agents (and targets, for the delivery cap); unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .model import (
    BaseSpec,
    ConfigError,
    ConstantArrival,
    MissionConfig,
    PiecewiseLinearArrival,
    TargetSpec,
)

__all__ = ["load_scenario", "config_from_dict", "config_to_dict",
           "save_scenario", "scenario_hash", "case1", "case2", "case3",
           "builtin_cases"]

SCHEMA_VERSION = 1

_TOP_KEYS = {"schema_version", "size", "horizon", "tradeoff", "n_agents",
             "base", "targets", "arrivals", "penalty_scale", "grid", "steps",
             "event_tol"}
_BASE_KEYS = {"position", "range", "deliver_cap"}
_TARGET_KEYS = {"position", "range", "collect_cap", "weight"}
_ARRIVAL_KEYS = {"constant": {"kind", "rate"},
                 "piecewise_linear": {"kind", "mean", "amplitude", "delta"}}


def _check_keys(doc: dict, allowed: set, where: str):
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _arrival_from_dict(doc: dict):
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError("arrival spec must be an object with a 'kind'")
    kind = doc["kind"]
    if kind not in _ARRIVAL_KEYS:
        raise ConfigError(f"unknown arrival kind '{kind}'")
    _check_keys(doc, _ARRIVAL_KEYS[kind], f"arrivals ({kind})")
    if kind == "constant":
        return ConstantArrival(rate=float(doc["rate"]))
    return PiecewiseLinearArrival(
        mean=float(doc["mean"]),
        amplitude=float(doc.get("amplitude", 1.0)),
        delta=None if doc.get("delta") is None else float(doc["delta"]))


def _arrival_to_dict(spec) -> dict:
    if isinstance(spec, ConstantArrival):
        return {"kind": "constant", "rate": spec.rate}
    out = {"kind": "piecewise_linear", "mean": spec.mean,
           "amplitude": spec.amplitude}
    if spec.delta is not None:
        out["delta"] = spec.delta
    return out


def config_from_dict(doc: dict) -> MissionConfig:
    if not isinstance(doc, dict):
        raise ConfigError("scenario document must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "scenario")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} "
                          f"(expected {SCHEMA_VERSION})")
    for key in ("size", "horizon", "n_agents", "base", "targets", "arrivals"):
        if key not in doc:
            raise ConfigError(f"scenario is missing required key '{key}'")

    n_agents = int(doc["n_agents"])
    targets_doc = doc["targets"]
    if not isinstance(targets_doc, list) or not targets_doc:
        raise ConfigError("'targets' must be a non-empty list")
    targets = []
    for k, td in enumerate(targets_doc):
        _check_keys(td, _TARGET_KEYS, f"targets[{k}]")
        targets.append(TargetSpec.make(
            position=td["position"], range_=td["range"],
            collect_cap=td["collect_cap"], weight=td.get("weight", 1.0),
            n_agents=n_agents))

    bd = doc["base"]
    _check_keys(bd, _BASE_KEYS, "base")
    base = BaseSpec.make(position=bd["position"], range_=bd["range"],
                         deliver_cap=bd["deliver_cap"],
                         n_targets=len(targets), n_agents=n_agents)

    arr_doc = doc["arrivals"]
    if isinstance(arr_doc, list):
        if len(arr_doc) != len(targets):
            raise ConfigError("per-target arrivals list has the wrong length")
        arrivals = tuple(_arrival_from_dict(a) for a in arr_doc)
    else:
        arrivals = tuple(_arrival_from_dict(arr_doc) for _ in targets)

    grid = doc.get("grid", [50, 50])
    return MissionConfig(
        size=(float(doc["size"][0]), float(doc["size"][1])),
        targets=tuple(targets),
        base=base,
        n_agents=n_agents,
        horizon=float(doc["horizon"]),
        tradeoff=float(doc.get("tradeoff", 0.5)),
        arrivals=arrivals,
        penalty_scale=float(doc.get("penalty_scale", 1e4)),
        grid_shape=(int(grid[0]), int(grid[1])),
        steps=int(doc.get("steps", 20000)),
        event_tol=float(doc.get("event_tol", 1e-10)),
    )


def config_to_dict(config: MissionConfig) -> dict:
    per_agent_r = [list(t.ranges) for t in config.targets]

    def squeeze(vals):
        arr = np.asarray(vals)
        flat = arr.ravel()
        return float(flat[0]) if np.all(flat == flat[0]) else arr.tolist()

    return {
        "schema_version": SCHEMA_VERSION,
        "size": [config.size[0], config.size[1]],
        "horizon": config.horizon,
        "tradeoff": config.tradeoff,
        "n_agents": config.n_agents,
        "base": {
            "position": list(map(float, config.base.position)),
            "range": squeeze(config.base.ranges),
            "deliver_cap": squeeze(config.base.deliver_caps),
        },
        "targets": [
            {
                "position": list(map(float, t.position)),
                "range": squeeze(t.ranges),
                "collect_cap": squeeze(t.collect_caps),
                "weight": t.weight,
            }
            for t in config.targets
        ],
        "arrivals": [_arrival_to_dict(a) for a in config.arrivals],
        "penalty_scale": config.penalty_scale,
        "grid": [config.grid_shape[0], config.grid_shape[1]],
        "steps": config.steps,
        "event_tol": config.event_tol,
    }


def load_scenario(path) -> MissionConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario {path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def save_scenario(config: MissionConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def scenario_hash(config: MissionConfig) -> str:
    """Stable digest of the scenario content (for run metadata)."""
    canon = json.dumps(config_to_dict(config), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# bundled scenarios
# ---------------------------------------------------------------------------

def _build(doc: dict, **overrides) -> MissionConfig:
    cfg = config_from_dict(doc)
    return cfg.replace(**overrides) if overrides else cfg


def case1(**overrides) -> MissionConfig:
    """Two targets, two agents, deterministic arrivals, short horizon."""
    return _build({
        "schema_version": 1,
        "size": [10.0, 10.0],
        "horizon": 20.0,
        "tradeoff": 0.5,
        "n_agents": 2,
        "base": {"position": [5.0, 2.0], "range": 0.5, "deliver_cap": 500.0},
        "targets": [
            {"position": [3.0, 7.0], "range": 0.5, "collect_cap": 100.0},
            {"position": [7.0, 7.0], "range": 0.5, "collect_cap": 100.0},
        ],
        "arrivals": {"kind": "constant", "rate": 0.5},
    }, **overrides)


def case2(**overrides) -> MissionConfig:
    """Nine targets on a grid ring around a central base, two agents."""
    xs = [2.0, 5.0, 8.0]
    positions = [[x, y] for x in xs for y in xs]
    positions[4] = [5.0, 6.5]   # keep the inner target clear of the base zone
    return _build({
        "schema_version": 1,
        "size": [10.0, 10.0],
        "horizon": 50.0,
        "tradeoff": 0.5,
        "n_agents": 2,
        "base": {"position": [5.0, 5.0], "range": 0.65, "deliver_cap": 500.0},
        "targets": [
            {"position": p, "range": 0.55, "collect_cap": 50.0}
            for p in positions
        ],
        "arrivals": {"kind": "constant", "rate": 0.5},
    }, **overrides)


def case3(stochastic: bool = False, **overrides) -> MissionConfig:
    """Twelve spread-out targets, two agents; optional random arrivals."""
    positions = [
        [7.19, 4.51], [7.87, 6.58], [1.75, 8.80], [2.02, 4.60],
        [3.97, 8.41], [6.15, 7.58], [4.55, 2.82], [5.44, 1.51],
        [8.77, 8.14], [7.23, 2.56], [2.23, 6.46], [6.96, 8.74],
    ]
    arrivals = ({"kind": "piecewise_linear", "mean": 0.5, "amplitude": 1.0}
                if stochastic else {"kind": "constant", "rate": 0.5})
    return _build({
        "schema_version": 1,
        "size": [10.0, 10.0],
        "horizon": 50.0,
        "tradeoff": 0.5,
        "n_agents": 2,
        "base": {"position": [5.0, 5.0], "range": 0.65, "deliver_cap": 500.0},
        "targets": [
            {"position": p, "range": 0.55, "collect_cap": 50.0}
            for p in positions
        ],
        "arrivals": arrivals,
    }, **overrides)


def builtin_cases() -> dict:
    return {"case1": case1(), "case2": case2(), "case3": case3()}
