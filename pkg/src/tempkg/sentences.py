"""Structured sentences: relation paths plus historical descriptions, verbalized.

Every timestamp that enters a sentence satisfies ``begin <= cutoff`` where the
cutoff is the target's begin time, and the target edge itself never appears.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .kg_store import Point, Quadruple, Tkg

INVERSE = "inverse-of"
PLACEHOLDERS = frozenset({"s", "o", "t", "t_begin", "t_end"})
_PLACEHOLDER_RE = re.compile(r"\{([^{}]*)\}")


class TemplateError(ValueError):
    pass


class OracleOverflow(RuntimeError):
    pass


class DirectedEdge(NamedTuple):
    """Edge id plus traversal direction (``reversed``: walked object -> subject)."""
    edge: int
    reversed: bool = False


RelationPath = tuple  # tuple[DirectedEdge, ...], ordered from subject to object


@dataclass
class SentenceConfig:
    max_hops: int = 3
    walks: int = 128
    reuse_paths: bool = True
    no_paths: bool = False
    no_history: bool = False


@dataclass
class StructuredSentence:
    target: Quadruple
    path: RelationPath | None
    desc_s: DirectedEdge | None
    desc_o: DirectedEdge | None
    earliest_time: int
    segments: tuple[list[str], list[str], list[str]]  # P_relation, description_s, description_o
    target_len: int = 0  # leading tokens of segments[0] that verbalize the target


@dataclass
class SentenceBundle:
    target: Quadruple
    sentences: list[StructuredSentence] = field(default_factory=list)


def time_token(label: str) -> str:
    return f"[T:{label}]"


# -- templates ----------------------------------------------------------------

class TemplateTable:
    """Per-relation prompt templates keyed by relation label, with a generic fallback."""

    POINT_FALLBACK = "On {t} , {s} {relation} {o} ."
    INTERVAL_FALLBACK = "From {t_begin} to {t_end} , {s} {relation} {o} ."

    def __init__(self, templates: dict[str, str] | None = None):
        self.templates = dict(templates or {})
        for rel, tpl in self.templates.items():
            check_template(tpl)

    @classmethod
    def from_tsv(cls, text: str) -> "TemplateTable":
        out = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TemplateError(f"template line {lineno}: expected relation<TAB>template")
            out[parts[0].strip()] = parts[1].strip()
        return cls(out)

    def to_tsv(self) -> str:
        return "".join(f"{k}\t{v}\n" for k, v in sorted(self.templates.items()))

    def words(self) -> set[str]:
        """Literal (non-placeholder) words of all explicit templates and both fallbacks."""
        out = set()
        for tpl in [*self.templates.values(), self.POINT_FALLBACK, self.INTERVAL_FALLBACK]:
            for tok in tpl.split():
                if not _PLACEHOLDER_RE.fullmatch(tok):
                    out.add(tok)
        return out


def check_template(tpl: str) -> None:
    for name in _PLACEHOLDER_RE.findall(tpl):
        if name not in PLACEHOLDERS:
            raise TemplateError(f"unknown placeholder {{{name}}} in template {tpl!r}")
    for tok in tpl.split():
        if "{" in tok and not _PLACEHOLDER_RE.fullmatch(tok):
            raise TemplateError(f"placeholder must be a standalone token in {tpl!r}")


def verbalize(tkg: Tkg, item: DirectedEdge | Quadruple, templates: TemplateTable) -> list[str]:
    """Token list for an edge (by id, with direction) or a free-standing quadruple."""
    if isinstance(item, DirectedEdge):
        q = tkg.edges[item.edge]
        reversed_ = item.reversed
    else:
        q = Quadruple(*item)
        reversed_ = False
    rel_label = tkg.relations[q.relation]
    tpl = templates.templates.get(rel_label)
    if tpl is None:
        fallback = (templates.POINT_FALLBACK if isinstance(q.time, Point)
                    else templates.INTERVAL_FALLBACK)
        tpl = fallback.replace("{relation}", rel_label)
    check_template(tpl)
    labels = tkg.time_labels
    values = {
        "s": tkg.entities[q.subject].split(),
        "o": tkg.entities[q.object].split(),
        "t": [time_token(labels[q.time.begin])],
        "t_begin": [time_token(labels[q.time.begin])],
        "t_end": [time_token(labels[q.time.end])],
    }
    tokens = [INVERSE] if reversed_ else []
    for tok in tpl.split():
        m = _PLACEHOLDER_RE.fullmatch(tok)
        tokens.extend(values[m[1]] if m else [tok])
    return tokens


# -- paths ----------------------------------------------------------------------

class _Frontier:
    """Valid incident edges per node under a time cutoff, minus excluded edges."""

    def __init__(self, tkg: Tkg, cutoff: int, exclude: frozenset[int]):
        self.tkg = tkg
        self.cutoff = cutoff
        self.exclude = exclude
        self._cache: dict[int, list[tuple[int, int, bool]]] = {}

    def __call__(self, node: int) -> list[tuple[int, int, bool]]:
        got = self._cache.get(node)
        if got is None:
            tkg = self.tkg
            got = []
            for eid in tkg.adjacency(node):
                if eid in self.exclude or tkg.begin[eid] > self.cutoff:
                    continue
                s, o = int(tkg.subj[eid]), int(tkg.obj[eid])
                if s == node:
                    got.append((eid, o, False))
                if o == node and s != o:
                    got.append((eid, s, True))
            self._cache[node] = got
        return got


def _target_exclusion(tkg: Tkg, target: Quadruple | None) -> frozenset[int]:
    if target is None:
        return frozenset()
    eid = tkg.edge_id(target)
    return frozenset() if eid is None else frozenset({eid})


def _flip(path: Sequence[DirectedEdge]) -> tuple[DirectedEdge, ...]:
    return tuple(DirectedEdge(d.edge, not d.reversed) for d in reversed(path))


def enumerate_paths_oracle(tkg: Tkg, s: int, o: int, cutoff: int, max_hops: int = 3,
                           target: Quadruple | None = None,
                           budget: int = 100_000) -> list[RelationPath]:
    """Every valid path from ``s`` to ``o`` by exhaustive depth-first search.

    A valid path uses at most ``max_hops`` distinct edges with ``begin <= cutoff``,
    never the target edge, and never revisits an entity (the endpoints may
    coincide when ``s == o``).
    """
    frontier = _Frontier(tkg, cutoff, _target_exclusion(tkg, target))
    found: list[RelationPath] = []
    prefixes = 0

    def dfs(node, nodes, edges, path):
        nonlocal prefixes
        if len(path) == max_hops:
            return
        for eid, nxt, rev in frontier(node):
            if eid in edges:
                continue
            prefixes += 1
            if prefixes > budget:
                raise OracleOverflow(f"more than {budget} path prefixes")
            step = path + (DirectedEdge(eid, rev),)
            if nxt == o:
                found.append(step)
                continue
            if nxt in nodes:
                continue
            dfs(nxt, nodes | {nxt}, edges | {eid}, step)

    dfs(s, frozenset({s}), frozenset(), ())
    return sorted(set(found))


def extract_paths(tkg: Tkg, s: int, o: int, cutoff: int, rng: np.random.Generator,
                  max_hops: int = 3, walks: int = 128,
                  target: Quadruple | None = None) -> list[RelationPath]:
    """Paths between ``s`` and ``o`` found by bidirectional random walks.

    Walks alternate between the two endpoints.  Each walk is a rotor-router
    walk: every (node, depth) keeps a randomly permuted list of its incident
    edges and hands them out in turn, reshuffling after each full turn, so
    repeated visits sweep the neighbourhood instead of resampling it with
    replacement.  Prefixes from
    ``s`` and from ``o`` that end at a common entity are joined into paths;
    walks that reach the opposite endpoint yield complete paths directly.
    """
    frontier = _Frontier(tkg, cutoff, _target_exclusion(tkg, target))
    complete: set[RelationPath] = set()
    # prefixes[side][node] -> set of (edges tuple) ending at node, excluding the start
    prefixes: tuple[dict, dict] = ({}, {})
    rotors: tuple[dict, dict] = ({}, {})
    ends = (s, o)

    for w in range(walks):
        side = w % 2
        start, goal = ends[side], ends[1 - side]
        rotor = rotors[side]
        node = start
        nodes = {start}
        used: set[int] = set()
        path: tuple[DirectedEdge, ...] = ()
        for depth in range(max_hops):
            options = frontier(node)
            if not options:
                break
            key = (node, depth)
            state = rotor.get(key)
            if state is None:
                state = [rng.permutation(len(options)), 0]
                rotor[key] = state
            perm, ptr = state
            choice = None
            step = 1
            for k in range(len(perm)):
                eid, nxt, rev = options[perm[(ptr + k) % len(perm)]]
                if eid in used or (nxt in nodes and nxt != goal):
                    continue
                choice = (eid, nxt, rev)
                step = k + 1
                break
            # a fresh order after every full turn keeps neighbouring rotors from phase-locking
            if ptr + step >= len(perm):
                state[0] = rng.permutation(len(options))
            state[1] = (ptr + step) % len(perm)
            if choice is None:
                break
            eid, nxt, rev = choice
            path = path + (DirectedEdge(eid, rev),)
            if nxt == goal:
                complete.add(path if side == 0 else _flip(path))
                break
            used.add(eid)
            nodes.add(nxt)
            prefixes[side].setdefault(nxt, set()).add(path)
            node = nxt

    # meet in the middle
    from_s, from_o = prefixes
    for meet, left in from_s.items():
        right = from_o.get(meet)
        if not right:
            continue
        for a in left:
            for b in right:
                if len(a) + len(b) > max_hops:
                    continue
                joined = a + _flip(b)
                if _is_simple(tkg, joined, s):
                    complete.add(joined)
    return sorted(complete)


def path_nodes(tkg: Tkg, path: Sequence[DirectedEdge], start: int) -> list[int]:
    nodes = [start]
    for d in path:
        nodes.append(int(tkg.subj[d.edge] if d.reversed else tkg.obj[d.edge]))
    return nodes


def _is_simple(tkg: Tkg, path: Sequence[DirectedEdge], start: int) -> bool:
    edges = [d.edge for d in path]
    if len(set(edges)) != len(edges):
        return False
    nodes = path_nodes(tkg, path, start)
    inner = nodes[1:-1]
    return len(set(inner)) == len(inner) and nodes[0] not in inner and nodes[-1] not in inner


# -- descriptions and bundles --------------------------------------------------------

def sample_description(tkg: Tkg, e: int, cutoff: int, exclude: set[int] | frozenset[int],
                       rng: np.random.Generator) -> DirectedEdge | None:
    """A uniformly drawn earlier fact incident to ``e``, or None."""
    pool = [eid for eid in tkg.adjacency(e)
            if eid not in exclude and tkg.begin[eid] <= cutoff]
    if not pool:
        return None
    return DirectedEdge(pool[int(rng.integers(len(pool)))], False)


def _earliest(tkg: Tkg, edges: Sequence[int], default: int) -> int:
    if not edges:
        return default
    return int(min(tkg.begin[e] for e in edges))


def make_sentence(tkg: Tkg, target: Quadruple, path: RelationPath | None,
                  desc_s: DirectedEdge | None, desc_o: DirectedEdge | None,
                  templates: TemplateTable) -> StructuredSentence:
    p_rel = verbalize(tkg, target, templates)
    target_len = len(p_rel)
    used = []
    for d in path or ():
        p_rel += verbalize(tkg, d, templates)
        used.append(d.edge)
    seg_s = verbalize(tkg, desc_s, templates) if desc_s is not None else []
    seg_o = verbalize(tkg, desc_o, templates) if desc_o is not None else []
    used += [d.edge for d in (desc_s, desc_o) if d is not None]
    return StructuredSentence(
        target=target, path=path, desc_s=desc_s, desc_o=desc_o,
        earliest_time=_earliest(tkg, used, target.time.begin),
        segments=(p_rel, seg_s, seg_o),
        target_len=target_len,
    )


def select_paths(tkg: Tkg, paths: list[RelationPath], n: int,
                 rng: np.random.Generator) -> list[RelationPath]:
    """Up to ``n`` paths: most recent first (by a path's earliest edge), then shortest.

    Remaining ties are broken at random.
    """
    keys = rng.random(len(paths))
    newest = [min(int(tkg.begin[d.edge]) for d in p) for p in paths]
    order = sorted(range(len(paths)), key=lambda i: (-newest[i], len(paths[i]), keys[i]))
    return [paths[i] for i in order[:n]]


def build_bundle(tkg: Tkg, target: Quadruple, N: int, templates: TemplateTable,
                 cfg: SentenceConfig, rng: np.random.Generator) -> SentenceBundle:
    """At most ``N`` leakage-free structured sentences for ``target``."""
    target = Quadruple(*target)
    s, o = target.subject, target.object
    cutoff = target.time.begin
    tid = tkg.edge_id(target)
    base_exclude = set() if tid is None else {tid}

    paths: list[RelationPath] = []
    if not cfg.no_paths:
        found = extract_paths(tkg, s, o, cutoff, rng, max_hops=cfg.max_hops,
                              walks=cfg.walks, target=target)
        paths = select_paths(tkg, found, N, rng)
    if paths and cfg.reuse_paths:
        paths = [paths[i % len(paths)] for i in range(N)]
    chosen: list[RelationPath | None] = list(paths) or [None]

    bundle = SentenceBundle(target)
    for path in chosen:
        exclude = base_exclude | {d.edge for d in path or ()}
        desc_s = desc_o = None
        if not cfg.no_history:
            desc_s = sample_description(tkg, s, cutoff, exclude, rng)
            desc_o = sample_description(tkg, o, cutoff, exclude, rng)
        bundle.sentences.append(make_sentence(tkg, target, path, desc_s, desc_o, templates))
    return bundle


def sentence_timestamps(tkg: Tkg, sentence: StructuredSentence) -> list[int]:
    """Begin times of every context edge (path and descriptions) in a sentence."""
    ids = [d.edge for d in sentence.path or ()]
    ids += [d.edge for d in (sentence.desc_s, sentence.desc_o) if d is not None]
    return [int(tkg.begin[e]) for e in ids]


def bundle_record(tkg: Tkg, bundle: SentenceBundle) -> dict:
    """JSON-ready line record for a bundle."""
    from .corpus import time_positions  # local: corpus imports this module

    t = bundle.target
    return {
        "target": [tkg.entities[t.subject], tkg.relations[t.relation], tkg.entities[t.object],
                   tkg.time_labels[t.time.begin], tkg.time_labels[t.time.end]],
        "sentences": [
            {"segments": [list(seg) for seg in s.segments],
             "time_positions": [time_positions(seg) for seg in s.segments],
             "t_rho": s.earliest_time}
            for s in bundle.sentences
        ],
    }
