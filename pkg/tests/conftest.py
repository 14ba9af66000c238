from __future__ import annotations

import random
import shutil
from pathlib import Path

import numpy as np
import pytest

from silo.dsl import parse
from silo.interp import random_params

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "corpus"
CORPUS_FILES = sorted(p.name for p in CORPUS.glob("*.silo"))

HAVE_CC = shutil.which("gcc") is not None


def load(name: str):
    return parse((CORPUS / name).read_text())


def same_outputs(expect, got, names, rtol=1e-12) -> list[str]:
    """Names whose arrays differ: floats by relative tolerance, integers bitwise."""
    bad = []
    for n in names:
        a, b = np.asarray(expect[n]), np.asarray(got[n])
        if a.dtype.kind == "f":
            ok = a.shape == b.shape and bool(np.all(np.isclose(a, b, rtol=rtol, atol=0.0, equal_nan=True)))
        else:
            ok = np.array_equal(a, b)
        if not ok:
            bad.append(n)
    return bad


def sample_params(program, seed: int, spread: int = 5):
    return random_params(program, random.Random(seed), spread=spread)


@pytest.fixture(params=CORPUS_FILES)
def corpus_program(request):
    return request.param, load(request.param)


# acceptance lines are collected here and echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
