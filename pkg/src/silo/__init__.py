"""Symbolic inductive loop optimizer.

Typical use::

    from silo import parse, run_passes, PRESETS, lower
    prog = parse(open("kernel.silo").read())
    result = run_passes(prog, PRESETS["config2"])
    c_source = lower(result.program)
"""

from silo.dependence import classify, eliminate_dependencies, privatize_dead_writes, resolve_input_deps
from silo.dsl import parse, print_program
from silo.errors import *  # noqa: F401,F403
from silo.interp import address_trace, pipelined_run, random_inputs, random_params, run
from silo.ir import Program
from silo.lower import emit_report, lower, run_compiled
from silo.memsched import merge_constant_offsets, plan_pointers, plan_prefetch
from silo.parallelize import parallelize, plan_sync, sync_points
from silo.pipeline import PRESETS, run_passes
from silo.symexpr import Facts, SymExpr, func, parse_expr, simplify, solve_delta, sym

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "Facts",
    "Program",
    "SymExpr",
    "address_trace",
    "classify",
    "eliminate_dependencies",
    "emit_report",
    "func",
    "lower",
    "merge_constant_offsets",
    "parallelize",
    "parse",
    "parse_expr",
    "pipelined_run",
    "plan_pointers",
    "plan_prefetch",
    "plan_sync",
    "print_program",
    "privatize_dead_writes",
    "random_inputs",
    "random_params",
    "resolve_input_deps",
    "run",
    "run_compiled",
    "run_passes",
    "simplify",
    "solve_delta",
    "sym",
    "sync_points",
]
