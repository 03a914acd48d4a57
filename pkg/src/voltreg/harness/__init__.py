"""Scenario runs, forecasts, metrics and the command line."""

from .scenario import Scenario, ScenarioError, load_scenario, scenario_from_dict
from .simulate import (
    SimulationResult,
    count_tap_operations,
    load_result,
    make_forecast,
    metrics,
    run_scenario,
    save_result,
    sweep_alpha,
    unbalance,
)
