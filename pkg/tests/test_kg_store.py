import datetime as dt

import pytest
from hypothesis import given, settings

from tempkg.kg_store import (Interval, Point, Quadruple, TkgParseError, TkgValidationError,
                             bfs_distances, contains_edge, dump_tkg, k_hop_neighbors, load_tkg,
                             load_tkg_with_queries, subgraph)

from conftest import random_tkg, small_graphs

THREE_LINES = ("A\tr1\tB\t2014-01-01\n"
               "B\tr2\tC\t2014-01-03\n"
               "A\tr2\tC\t2014-01-03\n")


def test_three_line_point_file():
    g = load_tkg(THREE_LINES)
    assert (g.num_entities, g.num_relations, g.num_edges, g.time_span) == (3, 2, 3, 3)
    assert list(g.time_labels) == ["2014-01-01", "2014-01-02", "2014-01-03"]
    assert g.edges[1] == Quadruple(1, 1, 2, Point(2))


def test_empty_input():
    g = load_tkg("")
    assert (g.num_entities, g.num_relations, g.num_edges) == (0, 0, 0)


def test_year_level_points():
    g = load_tkg("a\tr\tb\t1990\nb\tr\tc\t1993\n")
    assert g.granularity == "year"
    assert g.time_span == 4
    assert g.edges[1].time == Point(3)


def test_interval_wildcards_clamp_and_flag():
    text = ("a\tr\tb\t2000-##-##\t2003-##-##\n"
            "b\tr\tc\t####-##-##\t2001-##-##\n"
            "c\ts\ta\t2002-##-##\t####-##-##\n")
    g = load_tkg(text, "interval")
    assert list(g.time_labels) == ["2000", "2001", "2002", "2003"]
    assert g.edges[0].time == Interval(0, 3)
    assert g.edges[1].time == Interval(0, 1)
    assert g.edges[2].time == Interval(2, 3)
    assert sorted(g.flagged) == [1, 2]


@pytest.mark.parametrize("text, lineno", [
    ("a\tr\tb\t2014-01-01\na\tr\tb\n", 2),
    ("a\tr\tb\tyesterday\n", 1),
    ("\n\na\tr\tb\t2014-02-30\n", 3),
])
def test_parse_errors_name_the_line(text, lineno):
    with pytest.raises(TkgParseError, match=f"line {lineno}"):
        load_tkg(text)


def test_interval_end_before_begin():
    with pytest.raises(TkgValidationError):
        load_tkg("a\tr\tb\t2005-##-##\t2001-##-##\n", "interval")
    with pytest.raises(ValueError):
        Interval(3, 2)


def test_duplicates_dropped_with_warning(caplog):
    g = load_tkg(THREE_LINES + "A\tr1\tB\t2014-01-01\n")
    assert g.num_edges == 3
    assert "duplicate" in caplog.text.lower()


def test_labels_may_contain_spaces():
    g = load_tkg("South Korea\tMake statement\tNorth Korea\t2014-05-01\n")
    assert list(g.entities) == ["South Korea", "North Korea"]


def test_k_hop_chain_and_triangle(chain):
    a = chain.entity_index["A"]
    names = lambda ids: {chain.entities[i] for i in ids}
    assert names(k_hop_neighbors(chain, a, 3)) == {"B", "C", "D"}
    assert names(k_hop_neighbors(chain, a, 1)) == {"B"}
    tri = load_tkg("A\tr\tB\t2014-01-01\nB\tr\tC\t2014-01-01\nC\tr\tA\t2014-01-01\n")
    assert k_hop_neighbors(tri, tri.entity_index["A"], 1) == {1, 2}


def test_k_hop_isolated_and_errors():
    g, _ = load_tkg_with_queries("A\tr\tB\t2014-01-01\n", "Z\tr\tA\t2014-01-01\n")
    z = g.entity_index["Z"]
    assert k_hop_neighbors(g, z, 5) == set()
    with pytest.raises(KeyError):
        k_hop_neighbors(g, 99, 1)
    with pytest.raises(ValueError):
        k_hop_neighbors(g, 0, 0)


def test_contains_edge():
    g = load_tkg(THREE_LINES)
    q = g.edges[0]
    assert contains_edge(g, q)
    assert not contains_edge(g, q._replace(time=Point(1)))
    assert not contains_edge(g, q._replace(object=0))


@settings(max_examples=60, deadline=None)
@given(small_graphs())
def test_adjacency_index_is_complete(g):
    for e in range(g.num_entities):
        for eid in g.adjacency(e):
            q = g.edges[eid]
            assert e in (q.subject, q.object)
    for eid, q in enumerate(g.edges):
        assert eid in g.adjacency(q.subject) and eid in g.adjacency(q.object)


@settings(max_examples=60, deadline=None)
@given(small_graphs())
def test_k_hop_matches_bfs(g):
    for e in range(g.num_entities):
        dist = bfs_distances(g, e)
        for k in (1, 2, 3):
            assert k_hop_neighbors(g, e, k) == {x for x, d in dist.items() if 0 < d <= k}


@settings(max_examples=40, deadline=None)
@given(small_graphs())
def test_dump_load_round_trip(g):
    text = dump_tkg(g)
    again = load_tkg(text)
    assert dump_tkg(again) == text
    assert again.num_edges == g.num_edges


def test_loading_is_deterministic():
    g = random_tkg(3)
    text = dump_tkg(g)
    a, b = load_tkg(text), load_tkg(text)
    assert a.entities == b.entities and a.relations == b.relations and a.edges == b.edges


def test_stats_keys():
    s = load_tkg(THREE_LINES).stats()
    assert s["entities"] == 3 and s["links"] == 3 and s["time_tokens"] == 3


def test_queries_share_vocabularies():
    g, qs = load_tkg_with_queries(THREE_LINES, "C\tr3\tD\t2014-01-05\n")
    assert g.num_edges == 3
    assert g.relations[qs[0].relation] == "r3"
    assert g.entities[qs[0].object] == "D"
    assert g.time_labels[qs[0].time.t] == "2014-01-05"


def test_subgraph_reindexes_and_keeps_time_vocabulary():
    g = load_tkg(THREE_LINES)
    sub = subgraph(g, [1])
    assert list(sub.entities) == ["B", "C"]
    assert list(sub.relations) == ["r2"]
    assert sub.time_labels == g.time_labels
    assert sub.edges[0] == Quadruple(0, 0, 1, Point(2))


def test_time_origin_is_absolute():
    a = load_tkg("x\tr\ty\t2014-01-01\n")
    b = load_tkg("x\tr\ty\t2014-01-11\n")
    assert b.time_origin - a.time_origin == 10
    assert a.time_origin == dt.date(2014, 1, 1).toordinal()
