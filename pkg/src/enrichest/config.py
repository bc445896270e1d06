"""Strict JSON configuration and trial-data loading.

Unknown keys are rejected by name rather than ignored, so a typo in a config
fails loudly instead of silently running a different study.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import ConfigError, EnrichestError
from .estimators import CellSummary, TrialData
from .population import DesignSpec, IndexSet, PopulationSpec
from .rules import RuleConfig
from .simulation import Scenario


@dataclass(frozen=True)
class LoadedConfig:
    population: PopulationSpec
    design: DesignSpec
    scenarios: tuple[Scenario, ...]
    output: dict


def _check_keys(obj: dict, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")
    for key in required:
        if key not in obj:
            raise ConfigError(f"missing required key {key!r} in {where}")


def _number(obj: dict, key: str, where: str) -> float:
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {val!r}")
    return float(val)


def _integer(obj: dict, key: str, where: str) -> int:
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{where}.{key} must be an integer, got {val!r}")
    return val


def _number_list(obj: dict, key: str, where: str) -> tuple[float, ...]:
    val = obj[key]
    if not isinstance(val, list) or not val:
        raise ConfigError(f"{where}.{key} must be a non-empty list of numbers")
    out = []
    for item in val:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigError(f"{where}.{key} must contain numbers, got {item!r}")
        out.append(float(item))
    return tuple(out)


def parse_config(obj: dict) -> LoadedConfig:
    _check_keys(
        obj,
        {"population", "design", "scenarios", "output"},
        {"population", "design"},
        "config",
    )

    pop = obj["population"]
    _check_keys(pop, {"k", "prevalences", "effects"}, {"k", "prevalences"}, "population")
    effects = _number_list(pop, "effects", "population") if "effects" in pop else None
    try:
        population = PopulationSpec(
            k=_integer(pop, "k", "population"),
            prevalences=_number_list(pop, "prevalences", "population"),
            effects=effects,
        )
    except EnrichestError as exc:
        raise ConfigError(f"population: {exc}") from exc

    des = obj["design"]
    _check_keys(
        des,
        {"n1", "n2", "sigma2", "delta_star", "rule"},
        {"n1", "n2", "rule"},
        "design",
    )
    rule_obj = des["rule"]
    _check_keys(rule_obj, {"kind", "monotone_effects_assumed"}, {"kind"}, "design.rule")
    if not isinstance(rule_obj["kind"], str):
        raise ConfigError("design.rule.kind must be a string")
    monotone = rule_obj.get("monotone_effects_assumed", False)
    if not isinstance(monotone, bool):
        raise ConfigError("design.rule.monotone_effects_assumed must be a boolean")
    delta_star = _number(des, "delta_star", "design") if "delta_star" in des else None
    try:
        rule = RuleConfig(
            kind=rule_obj["kind"],
            delta_star=delta_star,
            monotone_effects_assumed=monotone,
        )
        design = DesignSpec(
            n1=_integer(des, "n1", "design"),
            n2=_integer(des, "n2", "design"),
            sigma2=_number(des, "sigma2", "design") if "sigma2" in des else None,
            rule=rule,
        )
    except EnrichestError as exc:
        raise ConfigError(f"design: {exc}") from exc

    scenarios: list[Scenario] = []
    for i, sc in enumerate(obj.get("scenarios", [])):
        where = f"scenarios[{i}]"
        _check_keys(
            sc,
            {"name", "effects", "control_means", "sigma2"},
            {"name", "effects", "sigma2"},
            where,
        )
        if not isinstance(sc["name"], str):
            raise ConfigError(f"{where}.name must be a string")
        control = (
            _number_list(sc, "control_means", where) if "control_means" in sc else None
        )
        try:
            scenarios.append(
                Scenario(
                    name=sc["name"],
                    effects=_number_list(sc, "effects", where),
                    sigma2=_number(sc, "sigma2", where),
                    control_means=control,
                )
            )
        except EnrichestError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        if len(scenarios[-1].effects) != population.k:
            raise ConfigError(f"{where}.effects must have length k={population.k}")

    output = obj.get("output", {})
    _check_keys(output, {"csv", "markdown"}, set(), "output")
    for key, val in output.items():
        if not isinstance(val, str):
            raise ConfigError(f"output.{key} must be a path string")

    return LoadedConfig(population, design, tuple(scenarios), dict(output))


def load_config(path: str | Path) -> LoadedConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(obj)


def parse_trial_data(obj: dict, k: int) -> TrialData:
    _check_keys(obj, {"patients", "cells"}, set(), "data")
    has_patients = "patients" in obj
    has_cells = "cells" in obj
    if has_patients == has_cells:
        raise ConfigError("data must contain exactly one of 'patients' or 'cells'")
    try:
        if has_patients:
            patients = obj["patients"]
            if not isinstance(patients, list):
                raise ConfigError("data.patients must be a list of [m, stage, arm, y]")
            return TrialData.from_patients(patients, k)
        cells = []
        for i, cell in enumerate(obj["cells"]):
            where = f"data.cells[{i}]"
            _check_keys(
                cell,
                {"subpopulation", "stage", "arm", "count", "mean", "ssd"},
                {"subpopulation", "stage", "arm", "count", "mean"},
                where,
            )
            cells.append(
                CellSummary(
                    subpopulation=_integer(cell, "subpopulation", where),
                    stage=_integer(cell, "stage", where),
                    arm=_integer(cell, "arm", where),
                    count=_integer(cell, "count", where),
                    mean=_number(cell, "mean", where),
                    ssd=_number(cell, "ssd", where) if "ssd" in cell else None,
                )
            )
        return TrialData.from_summaries(cells, k)
    except ConfigError:
        raise
    except EnrichestError as exc:
        raise ConfigError(f"data: {exc}") from exc


def load_trial_data(path: str | Path, k: int) -> TrialData:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read data {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"data {path} is not valid JSON: {exc}") from exc
    return parse_trial_data(obj, k)


def parse_targets(text: str, k: int) -> list[IndexSet]:
    """Parse a target list like ``F,1,2`` or ``1+2,3``.

    ``F`` (or ``all``) is the full population; ``i+j`` is a combined
    subpopulation.
    """
    targets = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if token.lower() in ("f", "all"):
            targets.append(IndexSet.full(k))
            continue
        try:
            members = tuple(sorted(int(part) for part in token.split("+")))
        except ValueError:
            raise ConfigError(f"cannot parse target {token!r}") from None
        try:
            target = IndexSet(members)
            target.validate_range(k)
        except EnrichestError as exc:
            raise ConfigError(f"target {token!r}: {exc}") from exc
        targets.append(target)
    if not targets:
        raise ConfigError("no targets given")
    return targets
