# %% [markdown]
# # Prefetching the next tile
#
# For each access the optimizer finds the innermost enclosing loop, above the
# innermost one, that the address depends on. At the top of that loop's body
# it requests the address the access will touch first in the next iteration.

# %%
from pathlib import Path

from silo import lower, parse, plan_prefetch

CORPUS = Path(__file__).resolve().parent.parent / "corpus"
for name in ("tiled_matmul.silo", "triangle.silo", "matmul.silo"):
    prog = plan_prefetch(parse((CORPUS / name).read_text()))
    hints = [(lp.id, h.container, str(h.offset)) for lp in prog.loops() for h in lp.prefetch]
    print(f"{name}:")
    for loop_id, container, offset in hints or [("-", "-", "no hints")]:
        print(f"  {loop_id:4s} {container:2s} {offset}")

# %%
tiled = plan_prefetch(parse((CORPUS / "tiled_matmul.silo").read_text()))
print("\n".join(line.strip() for line in lower(tiled).splitlines() if "__builtin_prefetch" in line))
