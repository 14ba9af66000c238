# %% [markdown]
# # Replacing address arithmetic with pointer increments
#
# Strided accesses recompute a full linear offset on every iteration. If the
# offset changes by the same symbolic amount each step, a pointer can be
# bumped instead, and rewound when an inner loop finishes.

# %%
from pathlib import Path

from silo import PRESETS, lower, parse, run_passes
from silo.memsched import schedule_report

CORPUS = Path(__file__).resolve().parent.parent / "corpus"
prog = parse((CORPUS / "padded_scale.silo").read_text())
ptr = run_passes(prog, PRESETS["ptrinc"]).program


def show(program):
    for p in schedule_report(program)["pointers"]:
        steps = ", ".join(f"{s['loop']}: +{s['delta_i']}" + (f" / -({s['delta_r']})" if s["delta_r"] else "") for s in p["per_loop"])
        uses = sorted({a["access_offset"] for a in p["accesses"]})
        print(f"{p['pointer']:5s} -> {p['container']}[{p['init_offset']}]  steps {steps}  offsets {uses}")


show(ptr)

# %% [markdown]
# The lowered kernel declares each pointer once, adds the per-iteration
# step at the end of each loop body, and subtracts the accumulated distance
# after the inner loop.

# %%
body = lower(ptr).split("silo_kernel(")[1]
print("\n".join(line for line in body.splitlines() if "silo_ptr" in line))

# %% [markdown]
# For a five-point stencil the reads of `inp` at horizontal offsets -1, 0
# and +1 share one pointer and use constant offsets from it.

# %%
show(run_passes(parse((CORPUS / "laplace.silo").read_text()), PRESETS["ptrinc"]).program)
