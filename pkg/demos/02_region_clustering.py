"""
Grouping regions by demand shape
================================

Regions whose daily curves look alike are merged with average linkage on a
DTW distance matrix, then cluster sizes are capped so no cluster swallows
the city.
"""
import numpy as np

from stdemand.clustering import agglomerate, balance, build_hierarchy, default_threshold, dtw_distance, \
    similarity_matrix
from stdemand.synthetic import make_synthetic_demand

# DTW tolerates shifts: a delayed copy is still at distance zero
print("dtw([0,3],[0,0,3]) =", dtw_distance([0, 3], [0, 0, 3]))
print("dtw([1,2],[2,3])   =", dtw_distance([1, 2], [2, 3]))

# twelve regions drawn from three planted demand profiles
tensor, groups = make_synthetic_demand()
train = tensor.slice(0, 7 * 48)
sim = similarity_matrix(train)
print("planted groups:", groups.tolist())

for m in (3, 6):
    raw = agglomerate(sim, m)
    capped = balance(raw, sim, default_threshold(12, m))
    print(f"M={m}: linkage sizes {raw.sizes().tolist()} -> balanced {capped.sizes().tolist()}")
    print("       assignment", capped.assignment.tolist())

# a hierarchy bundles several levels and remembers which data produced it
h = build_hierarchy(sim, [6, 3], fingerprint=train.fingerprint())
print("levels:", h.level_counts, "fingerprint:", h.fingerprint[:16])
print("cluster map of the coarse level:\n", h.cluster_maps[1].astype(int))
