# %% [markdown]
# # Training the same network with each gradient pipeline
#
# Two spirals, two ODE blocks of four Euler steps, plain SGD. Only the way the
# gradient is computed changes between runs.

# %%
from anode.train import TrainConfig, build_for, load_dataset, train

base = dict(dataset={"synthetic": "spirals", "n": 400, "noise": 0.0, "seed": 2}, seed=2, epochs=100)
data = load_dataset(base["dataset"])
for pipeline in ("dto", "otd_stored", "otd_reverse"):
    cfg = TrainConfig(pipeline=pipeline, **base)
    res = train(build_for(cfg, data), cfg, data)
    print(f"{pipeline:<12} loss {res.final_train_loss:.4f}  train acc {res.final_train_acc:.3f}"
          f"  diverged={res.diverged}")
