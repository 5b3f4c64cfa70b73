# %% [markdown]
# # How positive selection scales
#
# Selection walks every two-hop path through each intermediate type, in
# chunks of targets, and keeps the top few per target. On a random regular
# graph the work is proportional to the number of edges, so doubling the graph
# should roughly double the time: a slope near 1 on a log-log plot.

# %%
from rhco.pipeline import bench_scaling
from rhco.synthetic import regular_dataset

sizes = [5000 * 2 ** k for k in range(4)]
rows, slope = bench_scaling(lambda n: regular_dataset(n, 5), sizes, repeats=2)
for r in rows:
    print(f"{r['size']:7d} targets  {r['edges']:8d} edges  {1000 * r['selection_s']:8.1f} ms")
print(f"log-log slope {slope:.2f}")

# %% [markdown]
# The same measurement is available from the shell:
#
#     rhco bench --start 5000 --doublings 3 --csv bench.csv
