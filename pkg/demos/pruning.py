"""
Forgetting old censored observations
====================================

Every censored reading adds a row to the history the filter conditions
on, so without forgetting the cost grows with the run. The pruning
policy drops entries whose influence on the state has become negligible,
or that are older than ``max_age`` steps. A dropped entry is first folded
into the belief, so its information is summarised rather than lost.

Run with ``python demos/pruning.py`` (about 40 s).
"""

import time

import numpy as np

from censored_ekf.cli import resolve_config_path
from censored_ekf.scenario import build_scenario, filter_dataset, load_config, simulate

path = resolve_config_path("oscillator-stationary")
long_run = "observations.channels.x1.stop=100.0"
variants = {
    "no pruning": ["filter.prune=null"],
    "prune and absorb": [],
    "prune and delete": ["filter.prune.absorb=false"],
}

sc = build_scenario(load_config(path, [long_run]))
ds, _, sigmas = simulate(sc)
print(f"{len(ds)} steps, {ds.censored_fraction:.0%} censored\n")

results = {}
for label, extra in variants.items():
    start = time.perf_counter()
    res = filter_dataset(build_scenario(load_config(path, [long_run, *extra])), ds, sigmas)
    results[label] = res
    largest = max(r.history_size for r in res.records)
    print(f"{label:>17}: largest history {largest:4d}, {time.perf_counter() - start:5.1f}s, "
          f"final alpha {res.final.mean[2]:.5f}")

ref = results["no pruning"].final.mean
for label in ("prune and absorb", "prune and delete"):
    diff = np.sqrt(np.mean((results[label].final.mean - ref) ** 2))
    print(f"{label:>17}: final-state RMS difference from the unpruned run {diff:.1e}")
