# %% [markdown]
# # Memory versus recomputation across storage policies
#
# Two ODE blocks of five Euler steps each, under each policy:
#
# * `store_all` keeps every state.
# * `anode_block` keeps block inputs and rebuilds one block at a time.
# * `uniform` and `binomial` place `m` checkpoints inside each block.

# %%
from anode.checkpoint import bench, dp_optimal_cost, plan

print(f"{'policy':<12}{'m':>3}{'peak':>6}{'recompute':>11}")
for policy, m in [("store_all", None), ("anode_block", None), ("uniform", 2), ("binomial", 2), ("binomial", 3)]:
    st = bench(policy, 2, 5, m)
    print(f"{policy:<12}{m or '-':>3}{st['peak_states']:>6}{st['recomputed_steps']:>11}")

# %% [markdown]
# Optimal recomputation for a longer block as the slot budget grows; one
# slot means replaying from the start for every step, `Nt (Nt - 1) / 2`.

# %%
for m in range(1, 9):
    print(f"Nt=64 m={m}: {dp_optimal_cost(64, m)} recomputed steps")

# %%
print(plan("binomial", 1, 10, 3).actions)
