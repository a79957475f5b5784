"""Comparing architectures with OTMANN.

Run: python3 demos/distances.py
"""

import numpy as np

from nasbot import archgraph as ag
from nasbot import otmann as ot
from nasbot.pools import initial_pool

# Two small CNNs that differ in depth and filter size.
shallow = ag.chain("cnn", [("ip",), ("conv3", 32), ("max-pool",), ("fc", 64),
                           ("softmax",), ("op",)], input_channels=3)
deeper = ag.chain("cnn", [("ip",), ("conv3", 32), ("conv5", 32), ("max-pool",),
                          ("fc", 64), ("softmax",), ("op",)], input_channels=3)

params = ot.DistanceParams("cnn")
prof = ot.distance_profile(shallow, deeper, params)
print("nu grid      ", params.nu_grid)
print("d            ", np.round(prof.d, 2))
print("d normalised ", np.round(prof.d_bar, 4))

# Structure matters more as nu grows, so the profile is non-decreasing.
assert np.all(np.diff(prof.d) >= -1e-9)

# Splitting a 32-unit layer into two parallel 16-unit halves changes nothing:
# mass and path lengths are the same, and the distance is exactly zero.
wide = ag.chain("cnn", [("ip",), ("conv3", 16), ("conv3", 32), ("softmax",), ("op",)])
split = ag.build("cnn", [("ip",), ("conv3", 16), ("conv3", 16), ("conv3", 16),
                         ("softmax",), ("op",)],
                 [(0, 1), (1, 2), (1, 3), (2, 4), (3, 4), (4, 5)])
print("split pair d ", ot.distance_profile(wide, split, params).d)

# The GP kernel works on the full matrix of pairwise profiles.
pool = initial_pool("cnn")
d, d_bar = ot.pairwise_matrix(pool, params)
print("initial CNN pool, mean over nu of normalised distances:")
print(np.array2string(d_bar.mean(axis=0), precision=2, suppress_small=True))
