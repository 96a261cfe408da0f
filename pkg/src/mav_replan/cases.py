"""Reference fault scenarios spanning the four recovery outcomes.

Loaded from package data so the command line, the tests, and the
notebooks all agree on the numbers.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .env import FaultScenario, State

CASE_IDS = (1, 2, 3, 4)


def load_case(case_id: int) -> FaultScenario:
    if case_id not in CASE_IDS:
        raise KeyError(f"unknown case {case_id}, expected one of {CASE_IDS}")
    text = resources.files("mav_replan").joinpath("configs/cases.json").read_text()
    raw = json.loads(text)[str(case_id)]
    state = State(r=np.asarray(raw["r_km"]) * 1000.0,
                  v=np.asarray(raw["v_ms"], dtype=float),
                  m=float(raw["m_kg"]))
    return FaultScenario(t_fail=float(raw["t_fail_s"]), eta=float(raw["eta"]),
                         state_at_fail=state)


def load_all_cases() -> dict[int, FaultScenario]:
    return {i: load_case(i) for i in CASE_IDS}
