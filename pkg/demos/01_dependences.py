# %% [markdown]
# # Finding and removing loop-carried dependences
#
# A small two-deep nest that carries three kinds of dependence across its
# outer `k` loop. We classify them, then let the optimizer privatize the
# dead write and copy the read-before-write container so that only the true
# flow dependence is left.

# %%
from pathlib import Path

from silo import classify, eliminate_dependencies, parse, print_program

CORPUS = Path(__file__).resolve().parent.parent / "corpus"
prog = parse((CORPUS / "mixed_deps.silo").read_text())
print(print_program(prog))

# %% [markdown]
# Each record names the kind, the container, and the shift in outer
# iterations between the two accesses. A shift marked invariant means the
# address does not move with `k` at all.

# %%
for rec in classify(prog.loop("L0"), prog):
    print(f"{rec.kind:3s} on {rec.container}: distance {rec.delta}")

# %%
clean, notes = eliminate_dependencies(prog)
for note in notes:
    print("-", note)
print()
print(print_program(clean))

# %% [markdown]
# What remains on the outer loop:

# %%
for rec in classify(clean.loop("L0"), clean):
    print(f"{rec.kind:3s} on {rec.container}: distance {rec.delta}")
