import datetime as dt

import numpy as np
import pytest
from hypothesis import strategies as st

from tempkg.kg_store import Point, Quadruple, Tkg, day_labels


def random_tkg(seed: int, num_entities: int = 12, num_relations: int = 3, num_edges: int = 40,
               span: int = 15) -> Tkg:
    rng = np.random.default_rng(seed)
    seen, edges = set(), []
    for _ in range(num_edges):
        s, o = rng.choice(num_entities, size=2, replace=False)
        q = Quadruple(int(s), int(rng.integers(num_relations)), int(o),
                      Point(int(rng.integers(span))))
        if q not in seen:
            seen.add(q)
            edges.append(q)
    return Tkg([f"n{i}" for i in range(num_entities)], [f"rel{i}" for i in range(num_relations)],
               day_labels(dt.date(2020, 1, 1), span), edges)


@st.composite
def small_graphs(draw, max_entities=10, max_edges=30, span=8):
    n = draw(st.integers(2, max_entities))
    k = draw(st.integers(0, max_edges))
    raw = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, 2),
                                  st.integers(0, n - 1), st.integers(0, span - 1)),
                        min_size=k, max_size=k))
    edges = list(dict.fromkeys(Quadruple(s, r, o, Point(t)) for s, r, o, t in raw if s != o))
    return Tkg([f"n{i}" for i in range(n)], ["r0", "r1", "r2"],
               day_labels(dt.date(2020, 1, 1), span), edges)


@pytest.fixture
def chain():
    """A-B-C-D chain, one edge per day."""
    text = "A\tr1\tB\t2014-01-01\nB\tr2\tC\t2014-01-02\nC\tr1\tD\t2014-01-03\n"
    from tempkg.kg_store import load_tkg
    return load_tkg(text)


# -- acceptance report ---------------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool | None, detail: str) -> None:
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"[{status}] criterion {criterion:>2}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
