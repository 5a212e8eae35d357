"""Synthetic temporal graphs with a planted rule, for end-to-end learning checks.

The rule is ``r1(x, y, t) and r2(y, z, t)  =>  r3(x, z, t + 1)``, fired with
probability ``rule_prob``.  A fraction of all edges are uniform distractors.
"""
from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass

import numpy as np

from .kg_store import Point, Quadruple, Tkg, day_labels


@dataclass
class PlantedRule:
    context: Tkg                 # graph available for training and sentence building
    queries: list[Quadruple]     # held-out rule conclusions (tail prediction targets)
    rule_edges: int
    distractors: int


def planted_rule_tkg(seed: int, num_entities: int = 60, timeline: int = 50,
                     chains_per_step: int = 2, rule_prob: float = 0.9,
                     distractor_frac: float = 0.3, test_window: int = 10,
                     start: _dt.date = _dt.date(2014, 1, 1)) -> PlantedRule:
    """Rule conclusions dated in the last ``test_window`` steps are held out as queries."""
    rng = np.random.default_rng([seed, 0x51])
    edges: list[Quadruple] = []
    seen = set()

    def add(s, r, o, t):
        q = Quadruple(int(s), r, int(o), Point(int(t)))
        if q not in seen:
            seen.add(q)
            edges.append(q)
            return True
        return False

    conclusions = []
    for t in range(timeline - 1):
        for _ in range(chains_per_step):
            x, y, z = rng.choice(num_entities, size=3, replace=False)
            add(x, 0, y, t)
            add(y, 1, z, t)
            if rng.random() < rule_prob:
                q = Quadruple(int(x), 2, int(z), Point(t + 1))
                if add(*q[:3], t + 1):
                    conclusions.append(q)
    rule_edges = len(edges)
    n_noise = int(round(distractor_frac / (1.0 - distractor_frac) * rule_edges))
    added = 0
    while added < n_noise:
        s, o = rng.choice(num_entities, size=2, replace=False)
        added += add(s, int(rng.integers(3)), o, int(rng.integers(timeline)))

    first_test = timeline - test_window
    held = {q for q in conclusions if q.time.t >= first_test}
    context = [q for q in edges if q not in held]
    queries = [q for q in conclusions if q in held]
    tkg = Tkg([f"e{i:02d}" for i in range(num_entities)], ["r1", "r2", "r3"],
              day_labels(start, timeline), context, kind="point", granularity="day")
    return PlantedRule(tkg, queries, rule_edges, n_noise)
