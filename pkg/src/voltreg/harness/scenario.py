"""Scenario configuration and its JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from ..controllers import DEFAULT_VOLT_VAR, AvrOltcSettings, VoltVarCurve
from ..netmodel import FeederModel, TimeSeriesProfile, load_feeder, load_profiles

METHODS = ("avr", "ovr")


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    """A simulation run.

    ``feeder`` and ``profiles`` are paths (resolved against ``base_dir``) or
    already-loaded objects. ``start_step``/``n_steps`` select a window of the
    profiles; ``n_steps=None`` runs to the end.
    """

    feeder: str | FeederModel
    profiles: str | Mapping[str, TimeSeriesProfile]
    method: str = "ovr"
    dt: float = 30.0
    horizon_steps: int = 10
    replan_steps: int = 10
    weights: tuple[float, float] = (1.0, 0.15)
    forecast_alpha: float = 0.0
    rng_seed: int = 7
    volt_var: VoltVarCurve = field(default_factory=VoltVarCurve)
    avr: AvrOltcSettings = field(default_factory=AvrOltcSettings)
    start_step: int = 0
    n_steps: int | None = None
    time_budget: float = 60.0
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ScenarioError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.dt <= 0:
            raise ScenarioError("dt must be positive")
        if self.forecast_alpha < 0:
            raise ScenarioError("forecast_alpha must be non-negative")
        if self.horizon_steps < 1 or not 1 <= self.replan_steps <= self.horizon_steps:
            raise ScenarioError("need 1 <= replan_steps <= horizon_steps")
        if len(self.weights) != 2 or min(self.weights) < 0:
            raise ScenarioError("weights must be two non-negative numbers")
        self.weights = (float(self.weights[0]), float(self.weights[1]))
        self.base_dir = Path(self.base_dir)

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)

    def load_model(self) -> FeederModel:
        if isinstance(self.feeder, FeederModel):
            return self.feeder
        return load_feeder(self.base_dir / self.feeder)

    def load_profiles(self, model: FeederModel) -> dict[str, TimeSeriesProfile]:
        ids = sorted({ld.profile_id for ld in model.loads} | {pv.profile_id for pv in model.pv_units})
        if isinstance(self.profiles, Mapping):
            missing = [i for i in ids if i not in self.profiles]
            if missing:
                raise ScenarioError(f"profiles missing: {missing}")
            return {i: self.profiles[i] for i in ids}
        return load_profiles(self.base_dir / self.profiles, ids)


def scenario_from_dict(doc: Mapping[str, Any], base_dir: str | Path = ".") -> Scenario:
    try:
        avr = doc.get("avr", {})
        return Scenario(
            feeder=doc["feeder"],
            profiles=doc["profiles"],
            method=doc.get("method", "ovr"),
            dt=float(doc.get("dt", 30.0)),
            horizon_steps=int(doc.get("horizon_steps", 10)),
            replan_steps=int(doc.get("replan_steps", doc.get("horizon_steps", 10))),
            weights=tuple(doc.get("weights", (1.0, 0.15))),
            forecast_alpha=float(doc.get("forecast_alpha", 0.0)),
            rng_seed=int(doc.get("rng_seed", 7)),
            volt_var=VoltVarCurve(tuple(tuple(b) for b in doc.get("volt_var", DEFAULT_VOLT_VAR))),
            avr=AvrOltcSettings(
                v_ref=float(avr.get("v_ref", 1.03)),
                bandwidth=float(avr.get("bandwidth", 0.0167)),
                time_delay=float(avr.get("time_delay", 0.0)),
                monitored_nodes=avr.get("monitored_nodes"),
            ),
            start_step=int(doc.get("start_step", 0)),
            n_steps=doc.get("n_steps"),
            time_budget=float(doc.get("time_budget", 60.0)),
            base_dir=Path(base_dir),
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing required key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid scenario: {exc}") from exc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return scenario_from_dict(doc, path.parent)
