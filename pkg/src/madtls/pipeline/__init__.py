"""Adversarial pipeline simulator: scenarios, transports, attacks and reports."""

from .runner import (ACCEPT, DROPPED, LOST, REJECT_AT_RECEIVER, HopTrace, MessageResult, RunReport, SimSession,
                     blinded_stats, collude, reject_at, run_scenario)
from .scenario import AttackDirective, Scenario, TrafficItem, bundled_path, load_scenarios, parse_scenario

__all__ = [
    "ACCEPT", "DROPPED", "LOST", "REJECT_AT_RECEIVER", "HopTrace", "MessageResult", "RunReport", "SimSession",
    "blinded_stats", "collude", "reject_at", "run_scenario", "AttackDirective", "Scenario", "TrafficItem",
    "bundled_path", "load_scenarios", "parse_scenario",
]
