"""A short NASBOT run against random search on a synthetic MLP objective.

Run: python3 demos/search.py [budget]
The full comparison (budget 150, ten seeds) lives in the acceptance tests.
"""

import sys
import time

from nasbot import search

budget = int(sys.argv[1]) if len(sys.argv) > 1 else 40
for method in ("nasbot", "random", "ea"):
    cfg = search.SearchConfig(method=method, net_class="mlp", objective="f2",
                              budget=budget, workers=2, seed=0)
    start = time.perf_counter()
    result = search.run(cfg)
    trace = [round(r["best"], 3) for r in result.history[::10]]
    print(f"{method:>7}: best {result.best:.3f} in {time.perf_counter() - start:.1f} s, "
          f"best-so-far every 10 evaluations {trace}")
