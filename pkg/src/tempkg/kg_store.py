"""Temporal knowledge graph storage: parsing, indexing and neighbourhood queries.

Two on-disk layouts are supported, both tab separated, one fact per line::

    point     subject  relation  object  date
    interval  subject  relation  object  begin  end

Point dates are ``YYYY-MM-DD`` (day granularity) or ``YYYY`` (year
granularity).  Interval fields are always reduced to years and may use ``#``
wildcards (``2000-##-##``); a field that is entirely wildcards is clamped to
the observed minimum (begin) or maximum (end) year and the edge is flagged.
"""
from __future__ import annotations

import datetime as _dt
import logging
import re
from collections import deque
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)


class TkgParseError(ValueError):
    """Malformed dataset line."""


class TkgValidationError(ValueError):
    """Structurally valid line with inconsistent content (e.g. end < begin)."""


@dataclass(frozen=True)
class Point:
    t: int

    @property
    def begin(self) -> int:
        return self.t

    @property
    def end(self) -> int:
        return self.t


@dataclass(frozen=True)
class Interval:
    begin: int
    end: int

    def __post_init__(self):
        if self.end < self.begin:
            raise TkgValidationError(f"interval end {self.end} < begin {self.begin}")


TimeScope = Point | Interval


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    time: TimeScope


class Tkg:
    """Immutable, fully indexed temporal knowledge graph.

    ``kind`` is ``"point"`` or ``"interval"``; ``granularity`` is ``"day"`` or
    ``"year"``.  ``time_labels[i]`` is the calendar label of time index ``i``;
    indices are dense offsets from the earliest label.
    """

    def __init__(
        self,
        entities: Sequence[str],
        relations: Sequence[str],
        time_labels: Sequence[str],
        edges: Iterable[Quadruple],
        kind: str = "point",
        granularity: str = "day",
        flagged: Iterable[int] = (),
    ):
        if kind not in ("point", "interval"):
            raise ValueError(f"unknown kind {kind!r}")
        if granularity not in ("day", "year"):
            raise ValueError(f"unknown granularity {granularity!r}")
        self.kind = kind
        self.granularity = granularity
        self.entities = tuple(entities)
        self.relations = tuple(relations)
        self.time_labels = tuple(time_labels)
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}
        self.time_index = {t: i for i, t in enumerate(self.time_labels)}
        if len(self.entity_index) != len(self.entities):
            raise TkgValidationError("duplicate entity labels")
        if len(self.relation_index) != len(self.relations):
            raise TkgValidationError("duplicate relation labels")

        flagged = set(flagged)
        kept: list[Quadruple] = []
        kept_flags: set[int] = set()
        self._edge_ids: dict[Quadruple, int] = {}
        n_ent, n_rel, span = len(self.entities), len(self.relations), len(self.time_labels)
        for i, q in enumerate(edges):
            q = Quadruple(*q)
            if not (0 <= q.subject < n_ent and 0 <= q.object < n_ent):
                raise TkgValidationError(f"entity id out of range in {q}")
            if not 0 <= q.relation < n_rel:
                raise TkgValidationError(f"relation id out of range in {q}")
            expected = Point if kind == "point" else Interval
            if not isinstance(q.time, expected):
                raise TkgValidationError(f"{kind} graph given {type(q.time).__name__} time")
            if not (0 <= q.time.begin <= q.time.end < span):
                raise TkgValidationError(f"time index out of range in {q}")
            if q in self._edge_ids:
                log.warning("dropping duplicate edge %s", q)
                continue
            if i in flagged:
                kept_flags.add(len(kept))
            self._edge_ids[q] = len(kept)
            kept.append(q)
        self.edges: tuple[Quadruple, ...] = tuple(kept)
        self.flagged = frozenset(kept_flags)

        m = len(kept)
        self.subj = np.fromiter((q.subject for q in kept), dtype=np.int64, count=m)
        self.rel = np.fromiter((q.relation for q in kept), dtype=np.int64, count=m)
        self.obj = np.fromiter((q.object for q in kept), dtype=np.int64, count=m)
        self.begin = np.fromiter((q.time.begin for q in kept), dtype=np.int64, count=m)
        self.end = np.fromiter((q.time.end for q in kept), dtype=np.int64, count=m)
        for arr in (self.subj, self.rel, self.obj, self.begin, self.end):
            arr.flags.writeable = False

        adj: list[list[int]] = [[] for _ in range(n_ent)]
        nbrs: list[set[int]] = [set() for _ in range(n_ent)]
        for eid, q in enumerate(kept):
            adj[q.subject].append(eid)
            nbrs[q.subject].add(q.object)
            if q.object != q.subject:
                adj[q.object].append(eid)
                nbrs[q.object].add(q.subject)
        self._adjacency = tuple(tuple(a) for a in adj)
        self._neighbors = tuple(frozenset(n) for n in nbrs)

    # -- basic properties -------------------------------------------------
    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def time_span(self) -> int:
        return len(self.time_labels)

    @property
    def time_origin(self) -> int:
        """Absolute ordinal (proleptic day number or year) of time index 0."""
        if not self.time_labels:
            return 0
        return label_ordinal(self.time_labels[0], self.granularity)

    def adjacency(self, e: int) -> tuple[int, ...]:
        """Ids of edges incident to ``e`` (as subject or object)."""
        return self._adjacency[e]

    def neighbors(self, e: int) -> frozenset[int]:
        return self._neighbors[e]

    def edge_id(self, q: Quadruple) -> int | None:
        return self._edge_ids.get(Quadruple(*q))

    def make_time(self, begin: int, end: int | None = None) -> TimeScope:
        if self.kind == "point":
            return Point(begin)
        return Interval(begin, begin if end is None else end)

    def stats(self) -> dict:
        return {
            "entities": self.num_entities,
            "relations": self.num_relations,
            "links": self.num_edges,
            "time_tokens": self.time_span,
            "kind": self.kind,
            "granularity": self.granularity,
            "flagged": len(self.flagged),
        }

    def __repr__(self) -> str:
        return (f"Tkg({self.num_entities} entities, {self.num_relations} relations, "
                f"{self.num_edges} edges, {self.time_span} time indices, {self.kind})")


def k_hop_neighbors(tkg: Tkg, e: int, k: int) -> set[int]:
    """Entities reachable from ``e`` within ``k`` undirected hops, ``e`` excluded."""
    if not 0 <= e < tkg.num_entities:
        raise KeyError(f"unknown entity id {e}")
    if k < 1:
        raise ValueError("k must be >= 1")
    seen = {e}
    frontier = [e]
    for _ in range(k):
        nxt = []
        for u in frontier:
            for v in tkg.neighbors(u):
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        if not nxt:
            break
        frontier = nxt
    seen.discard(e)
    return seen


def contains_edge(tkg: Tkg, q: Quadruple) -> bool:
    return tkg.edge_id(q) is not None


def bfs_distances(tkg: Tkg, e: int) -> dict[int, int]:
    dist = {e: 0}
    queue = deque([e])
    while queue:
        u = queue.popleft()
        for v in tkg.neighbors(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


# -- time labels ----------------------------------------------------------------

_DAY_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})$")
_YEAR_RE = re.compile(r"^(\d{4})$")
_WILD_YEAR_RE = re.compile(r"^([0-9#]{4})(?:-[0-9#]{2}-[0-9#]{2})?$")


def label_ordinal(label: str, granularity: str) -> int:
    if granularity == "day":
        return _dt.date.fromisoformat(label).toordinal()
    return int(label)


def day_labels(first: _dt.date, count: int) -> list[str]:
    return [(first + _dt.timedelta(days=i)).isoformat() for i in range(count)]


def year_labels(first: int, count: int) -> list[str]:
    return [f"{first + i:04d}" for i in range(count)]


def _parse_point_date(field: str, lineno: int) -> tuple[str, int]:
    m = _DAY_RE.match(field)
    if m:
        try:
            return "day", _dt.date(int(m[1]), int(m[2]), int(m[3])).toordinal()
        except ValueError as exc:
            raise TkgParseError(f"line {lineno}: bad date {field!r}: {exc}") from None
    m = _YEAR_RE.match(field)
    if m:
        return "year", int(m[1])
    raise TkgParseError(f"line {lineno}: unparseable date {field!r}")


def _parse_year(field: str, lineno: int) -> int | None:
    m = _WILD_YEAR_RE.match(field)
    if not m:
        raise TkgParseError(f"line {lineno}: unparseable date {field!r}")
    year = m[1]
    if year == "####":
        return None
    if "#" in year:
        raise TkgParseError(f"line {lineno}: partially wildcarded year {field!r}")
    return int(year)


# -- loading ----------------------------------------------------------------------

def _parse_lines(text: str, fmt: str, first_lineno: int = 1):
    """Yield (lineno, s, r, o, raw time) for every non-empty line."""
    if fmt not in ("point", "interval"):
        raise ValueError(f"unknown format {fmt!r}")
    n_fields = 4 if fmt == "point" else 5
    for lineno, line in enumerate(text.split("\n"), start=first_lineno):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != n_fields:
            raise TkgParseError(
                f"line {lineno}: expected {n_fields} tab-separated fields, got {len(parts)}")
        s, r, o = parts[0].strip(), parts[1].strip(), parts[2].strip()
        if fmt == "point":
            yield lineno, s, r, o, _parse_point_date(parts[3].strip(), lineno)
        else:
            b = _parse_year(parts[3].strip(), lineno)
            e = _parse_year(parts[4].strip(), lineno)
            if b is not None and e is not None and e < b:
                raise TkgValidationError(f"line {lineno}: end year {e} < begin year {b}")
            yield lineno, s, r, o, (b, e)


def _build(records: list, fmt: str, extra_records: list = ()) -> tuple[Tkg, list[Quadruple]]:
    """Shared indexing for ``load_tkg`` and ``load_tkg_with_queries``."""
    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    everything = list(records) + list(extra_records)
    for _, s, r, o, _t in everything:
        entities.setdefault(s, len(entities))
        relations.setdefault(r, len(relations))
        entities.setdefault(o, len(entities))

    if fmt == "point":
        grans = {t[0] for *_, t in everything}
        if len(grans) > 1:
            raise TkgParseError("point file mixes day-level and year-level dates")
        granularity = grans.pop() if grans else "day"
        ords = [t[1] for *_, t in everything]
        lo, hi = (min(ords), max(ords)) if ords else (0, -1)
        if granularity == "day":
            labels = day_labels(_dt.date.fromordinal(lo), hi - lo + 1) if ords else []
        else:
            labels = year_labels(lo, hi - lo + 1) if ords else []

        def to_time(t):
            return Point(t[1] - lo), False
    else:
        granularity = "year"
        years = [y for *_, t in everything for y in t if y is not None]
        if not years and everything:
            raise TkgParseError("interval file has no concrete year")
        lo, hi = (min(years), max(years)) if years else (0, -1)
        labels = year_labels(lo, hi - lo + 1) if years else []

        def to_time(t):
            b, e = t
            flag = b is None or e is None
            b = lo if b is None else b
            e = hi if e is None else e
            return Interval(b - lo, e - lo), flag

    def convert(recs):
        out, flags = [], []
        for i, (_, s, r, o, t) in enumerate(recs):
            time, flag = to_time(t)
            out.append(Quadruple(entities[s], relations[r], entities[o], time))
            if flag:
                flags.append(i)
        return out, flags

    edges, flags = convert(records)
    extra, _ = convert(extra_records)
    tkg = Tkg(list(entities), list(relations), labels, edges, kind=fmt,
              granularity=granularity, flagged=flags)
    return tkg, extra


def load_tkg(text: str, format: str = "point") -> Tkg:
    """Parse a dataset TSV into an indexed :class:`Tkg`."""
    return _build(list(_parse_lines(text, format)), format)[0]


def load_tkg_with_queries(context_text: str, query_text: str,
                          format: str = "point") -> tuple[Tkg, list[Quadruple]]:
    """Load a context graph plus held-out query facts under shared vocabularies.

    Entities and time indices mentioned only by the queries still receive ids
    (they are simply isolated in the context graph).
    """
    ctx = list(_parse_lines(context_text, format))
    qs = list(_parse_lines(query_text, format))
    return _build(ctx, format, qs)


def read_tkg(path, format: str = "point") -> Tkg:
    with open(path, encoding="utf-8") as fh:
        return load_tkg(fh.read(), format)


def _time_field(tkg: Tkg, idx: int) -> str:
    label = tkg.time_labels[idx]
    if tkg.kind == "interval":
        return f"{label}-##-##"
    return label


def dump_tkg(tkg: Tkg, quads: Iterable[Quadruple] | None = None) -> str:
    """Serialize edges (or ``quads``) back to the TSV layout ``load_tkg`` reads."""
    lines = []
    for q in tkg.edges if quads is None else quads:
        fields = [tkg.entities[q.subject], tkg.relations[q.relation], tkg.entities[q.object]]
        if tkg.kind == "point":
            fields.append(_time_field(tkg, q.time.t))
        else:
            fields += [_time_field(tkg, q.time.begin), _time_field(tkg, q.time.end)]
        lines.append("\t".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def subgraph(tkg: Tkg, edge_ids: Sequence[int], entity_order: Sequence[int] | None = None) -> Tkg:
    """Standalone graph over the given edges, re-indexed, sharing ``tkg``'s time vocabulary."""
    ents: dict[int, int] = {}
    rels: dict[int, int] = {}
    if entity_order is not None:
        for e in entity_order:
            ents.setdefault(e, len(ents))
    new_edges = []
    flags = []
    for i, eid in enumerate(edge_ids):
        q = tkg.edges[eid]
        s = ents.setdefault(q.subject, len(ents))
        r = rels.setdefault(q.relation, len(rels))
        o = ents.setdefault(q.object, len(ents))
        new_edges.append(Quadruple(s, r, o, q.time))
        if eid in tkg.flagged:
            flags.append(i)
    return Tkg([tkg.entities[e] for e in ents], [tkg.relations[r] for r in rels],
               tkg.time_labels, new_edges, kind=tkg.kind, granularity=tkg.granularity,
               flagged=flags)
