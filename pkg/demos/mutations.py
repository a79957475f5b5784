"""The mutation operator the acquisition optimiser uses.

Run: python3 demos/mutations.py
"""

from collections import Counter

import numpy as np

from nasbot import archgraph as ag
from nasbot import evo
from nasbot.pools import initial_pool

rng = np.random.default_rng(0)
parent = initial_pool("mlp")[0]
print("parent:", [l.label + (f"({l.units})" if l.units else "") for l in parent.layers])

# Each modifier on its own.
for kind in evo.ModifierKind:
    try:
        child = evo.apply_modifier(parent, kind, rng)
    except evo.MutationRejected as why:
        print(f"{kind.value:>18}: rejected ({why})")
        continue
    print(f"{kind.value:>18}: {len(parent.layers)} -> {len(child.layers)} layers, "
          f"{len(parent.edges)} -> {len(child.edges)} edges")

# Compound mutations chain a random number of steps; every output validates.
sizes = Counter()
for _ in range(500):
    child = evo.mutate(parent, rng=rng)
    assert ag.validate(child).ok
    sizes[len(child.layers)] += 1
print("layer counts after one compound mutation:", dict(sorted(sizes.items())))
