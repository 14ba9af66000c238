"""Pass pipeline: dependence elimination, parallelization, memory schedules.

Passes always run in the fixed order analysis -> transformation -> schedules,
whatever order they are requested in, so that pointer plans and hints are
computed against final loop schedules.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from silo.dependence import DependenceRecord, eliminate_dependencies, records_for
from silo.ir import Program
from silo.memsched import plan_pointers, plan_prefetch
from silo.parallelize import parallelize

__all__ = ["PASS_ORDER", "PRESETS", "PipelineResult", "optimize", "passes_for", "run_passes"]

PASS_ORDER = ("privatize", "resolve-war", "doall", "doacross", "prefetch", "ptrinc")

_ELIM = ("privatize", "resolve-war")
PRESETS: dict[str, tuple[str, ...]] = {
    "off": (),
    "config1": _ELIM + ("doall",),
    "config2": _ELIM + ("doall", "doacross"),
    "prefetch": ("prefetch",),
    "ptrinc": ("ptrinc",),
    "all": _ELIM + ("doall", "doacross", "prefetch", "ptrinc"),
}


@dataclass
class PipelineResult:
    program: Program
    passes: tuple[str, ...]
    log: list[str] = field(default_factory=list)
    decisions: list[dict] = field(default_factory=list)
    records_before: list[DependenceRecord] = field(default_factory=list)
    records_after: list[DependenceRecord] = field(default_factory=list)

    def eliminated(self) -> list[DependenceRecord]:
        """Records present before the pipeline ran that no longer exist."""
        after = {(r.kind, r.container, r.loop) for r in self.records_after}
        return [r for r in self.records_before if (r.kind, r.container, r.loop) not in after]


def passes_for(parallelize_mode: str = "off", memsched: str = "off", config: str | int | None = None) -> tuple[str, ...]:
    """Translate command-line style switches into a pass list."""
    chosen: list[str] = []
    if config is not None:
        key = {"1": "config1", "2": "config2"}.get(str(config), str(config))
        if key not in PRESETS:
            raise ValueError(f"unknown configuration {config!r}")
        chosen.extend(PRESETS[key])
    if parallelize_mode not in ("off", "doall", "doacross"):
        raise ValueError(f"unknown parallelization mode {parallelize_mode!r}")
    if parallelize_mode != "off":
        chosen.extend(_ELIM + ("doall",))
        if parallelize_mode == "doacross":
            chosen.append("doacross")
    if memsched not in ("off", "prefetch", "ptrinc", "all"):
        raise ValueError(f"unknown memory schedule mode {memsched!r}")
    if memsched in ("prefetch", "all"):
        chosen.append("prefetch")
    if memsched in ("ptrinc", "all"):
        chosen.append("ptrinc")
    return tuple(p for p in PASS_ORDER if p in chosen)


def run_passes(program: Program, passes: Iterable[str], collect_records: bool = False) -> PipelineResult:
    wanted = set(passes)
    unknown = wanted - set(PASS_ORDER)
    if unknown:
        raise ValueError(f"unknown passes {sorted(unknown)}")
    ordered = tuple(p for p in PASS_ORDER if p in wanted)
    result = PipelineResult(program, ordered)
    if collect_records:
        result.records_before = records_for(program)
    if "privatize" in wanted or "resolve-war" in wanted:
        program, log = eliminate_dependencies(
            program, privatize="privatize" in wanted, resolve_war="resolve-war" in wanted
        )
        result.log.extend(log)
    if "doacross" in wanted:
        program, result.decisions = parallelize(program, "doacross")
    elif "doall" in wanted:
        program, result.decisions = parallelize(program, "doall")
    if "prefetch" in wanted:
        program = plan_prefetch(program)
    if "ptrinc" in wanted:
        program = plan_pointers(program)
    result.program = program
    if collect_records:
        result.records_after = records_for(program)
    return result


def optimize(program: Program, preset: str = "off") -> Program:
    return run_passes(program, PRESETS[preset]).program
