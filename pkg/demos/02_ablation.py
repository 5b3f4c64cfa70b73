# %% [markdown]
# # Which view carries the signal?
#
# `mode="sc"` trains only the schema view (typed first-order neighbours),
# `mode="pg"` only the positive-graph view (means over selected positives),
# `mode="full"` both with the contrastive coupling. The homophily knob
# controls how informative shared authors and fields are.

# %%
from rhco.pipeline import TrainingConfig, evaluate, feature_baseline, train
from rhco.positive import build_positive_graphs
from rhco.pretrain import pretrain_attention
from rhco.synthetic import generate_synthetic

for homophily in (0.6, 0.9):
    ds = generate_synthetic(500, 100, 3, homophily=homophily, feature_dim=16, rng_seed=3)
    pos = build_positive_graphs(ds.graph, pretrain_attention(ds, 60, 3), 5, "paper")
    row = {"features": feature_baseline(ds)["accuracy"]}
    for mode in ("full", "sc", "pg"):
        cfg = TrainingConfig(d=32, heads=4, batch_size=128, epochs=15, lr=0.005, seed=0, mode=mode)
        ckpt, _ = train(ds, pos, cfg)
        row[mode] = evaluate(ckpt, ds, pos)["accuracy"]
    print(f"homophily {homophily}: " + "  ".join(f"{k} {v:.3f}" for k, v in row.items()))

# %% [markdown]
# A typical run prints
#
#     homophily 0.6: features 0.730  full 0.850  sc 0.840  pg 0.720
#     homophily 0.9: features 0.720  full 0.990  sc 0.980  pg 0.960
#
# The schema view gains even at 0.6, because attention can down-weight
# off-class neighbours. The positive-graph view averages a handful of
# positives with fixed weights, so it only pays off once those positives are
# mostly same-class. The full model stays at or slightly above the schema
# view alone. The supervised loss is summed over seeds and outweighs the
# contrastive term, which keeps the two close.
