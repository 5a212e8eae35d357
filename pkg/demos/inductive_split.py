# Four inductive benchmarks cut from one synthetic event graph.
import datetime as dt
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from tempkg.kg_store import Point, Quadruple, Tkg, day_labels
from tempkg.splitter import PRESETS, sample_split, write_split

rng = np.random.default_rng(7)
n_ent, n_rel, days = 4000, 20, 365
edges = set()
while len(edges) < 6000:
    s, o = rng.choice(n_ent, 2, replace=False)
    edges.add(Quadruple(int(s), int(rng.integers(n_rel)), int(o), Point(int(rng.integers(days)))))
g = Tkg([f"actor{i}" for i in range(n_ent)], [f"event{j}" for j in range(n_rel)],
        day_labels(dt.date(2014, 1, 1), days), sorted(edges))
print(g)

out = Path(tempfile.mkdtemp())
for name, params in PRESETS.items():
    pair = sample_split(g, replace(params, rng_seed=7))
    r = pair.report
    print(f"{name}: walk length {params.walk_length}  "
          f"train {r.train_entities:5d} ent {r.train_links:5d} links | "
          f"test {r.test_entities:5d} ent {r.test_links:5d} links | "
          f"overlap {r.entity_overlap} contained {r.relation_containment}")
    write_split(pair, out / name)

print("written to", out)
print((out / "v1" / "split-report.json").read_text())
