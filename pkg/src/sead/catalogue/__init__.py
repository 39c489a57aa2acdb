"""Shipped manoeuvre definitions, scenarios and deliberately broken variants.

The ``*.mdl.json`` files next to this module are the canonical serialisation
of each definition; ``mutants/`` holds variants that the validator or the
verifier must reject, and ``scenarios/`` holds simulation set-ups with their
expected endings in ``golden/``.
"""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

from ..mdl import MdlDocument, Registry, parse

SUB_MANOEUVRES = ("NEGOTIATE", "MOVETOPOS", "ATTACH", "LC_BPF", "GAPCLOSE", "GAPOPEN", "SPLIT_AT", "LEAVE_PREP")
MANOEUVRES = ("JOIN_TAIL", "JOIN_MIDDLE", "LEAVE", "SPLIT", "OPEN_TWO_GAPS")


def root() -> Path:
    return Path(str(resources.files(__name__)))


def definition_paths() -> list[Path]:
    return sorted(root().glob("*.mdl.json"))


def mutant_paths() -> list[Path]:
    return sorted((root() / "mutants").glob("*.mdl.json"))


def scenario_paths() -> list[Path]:
    return sorted((root() / "scenarios").glob("*.json"))


def scenario_path(name: str) -> Path:
    return root() / "scenarios" / f"{name}.json"


def load_scenario(name: str) -> dict[str, Any]:
    return json.loads(scenario_path(name).read_text())


def golden(name: str) -> dict[str, Any]:
    return json.loads((root() / "golden" / f"{name}.json").read_text())


def mutant_expectations() -> dict[str, str]:
    """Mutant id -> the one rule id that must reject it."""
    return json.loads((root() / "mutants" / "expected_rules.json").read_text())


@lru_cache(maxsize=None)
def _documents() -> tuple[MdlDocument, ...]:
    return tuple(parse(p.read_bytes()) for p in definition_paths())


def builtin_registry() -> Registry:
    return Registry(_documents())


def load_mutant(mutant_id: str) -> MdlDocument:
    return parse((root() / "mutants" / f"{mutant_id.lower()}.mdl.json").read_bytes())


__all__ = [
    "MANOEUVRES",
    "SUB_MANOEUVRES",
    "builtin_registry",
    "definition_paths",
    "golden",
    "load_mutant",
    "load_scenario",
    "mutant_expectations",
    "mutant_paths",
    "scenario_path",
    "scenario_paths",
]
