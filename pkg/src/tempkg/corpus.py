"""Vocabulary, tokenization and the time-masking sampler for MLM pretraining."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import IO, Iterable, Sequence

import numpy as np

from .kg_store import Tkg
from .sentences import (
    INVERSE, SentenceConfig, StructuredSentence, TemplateTable, build_bundle, time_token,
)

PAD, CLS, SEP, MASK = "[PAD]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, CLS, SEP, MASK, INVERSE)
MAX_SEQUENCE_LENGTH = 128

KIND_MASK, KIND_RANDOM, KIND_KEEP = "mask", "random", "keep"


class TokenizeError(ValueError):
    pass


def is_time_token(tok: str) -> bool:
    return tok.startswith("[T:") and tok.endswith("]")


def time_positions(tokens: Sequence[str]) -> list[int]:
    return [i for i, t in enumerate(tokens) if is_time_token(t)]


class Vocab:
    """Token <-> id map.  Specials first, then one contiguous block of time tokens, then words."""

    def __init__(self, tokens: Sequence[str], time_start: int, time_stop: int):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if list(self.tokens[:len(SPECIALS)]) != list(SPECIALS):
            raise ValueError("vocabulary must start with the special tokens")
        self.time_start, self.time_stop = time_start, time_stop
        for tok in self.tokens[time_start:time_stop]:
            if not is_time_token(tok):
                raise ValueError(f"non-time token {tok!r} inside the time range")
        self.pad, self.cls, self.sep, self.mask, self.inverse = range(len(SPECIALS))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_time_tokens(self) -> int:
        return self.time_stop - self.time_start

    @property
    def num_words(self) -> int:
        return len(self.tokens) - self.time_stop

    def is_time(self, idx) -> bool | np.ndarray:
        return (idx >= self.time_start) & (idx < self.time_stop)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        out = []
        for t in tokens:
            try:
                out.append(self.index[t])
            except KeyError:
                raise TokenizeError(f"out-of-vocabulary token {t!r}") from None
        return out

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "time_start": self.time_start, "time_stop": self.time_stop}

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(d["tokens"], d["time_start"], d["time_stop"])


def build_vocab(tkgs: Tkg | Sequence[Tkg], templates: TemplateTable) -> Vocab:
    """Vocabulary covering everything ``verbalize`` can emit for the given graphs."""
    if isinstance(tkgs, Tkg):
        tkgs = [tkgs]
    times: dict[str, None] = {}
    for g in tkgs:
        for label in g.time_labels:
            times.setdefault(time_token(label), None)
    words: set[str] = set(templates.words())
    for g in tkgs:
        for label in g.entities:
            words.update(label.split())
        for label in g.relations:
            words.update(label.split())
    words -= set(SPECIALS)
    words = {w for w in words if not is_time_token(w)}
    tokens = list(SPECIALS) + list(times) + sorted(words)
    return Vocab(tokens, len(SPECIALS), len(SPECIALS) + len(times))


@dataclass
class TokenizedSentence:
    ids: np.ndarray                       # (q,) int64
    time_positions: np.ndarray            # positions of time tokens
    segments: tuple[tuple[int, int], ...]  # [start, end) spans incl. [CLS]/[SEP]
    t_rho: int = 0

    @property
    def q(self) -> int:
        return len(self.ids)

    def segment_ids(self, k: int) -> np.ndarray:
        a, b = self.segments[k]
        return self.ids[a:b]


def _frame(content: list[str]) -> list[str]:
    return [CLS, *content, SEP]


def _truncate(p_rel: list[str], target_len: int, desc_s: list[str], desc_o: list[str],
              max_len: int) -> tuple[list[str], list[str], list[str]]:
    excess = len(p_rel) + len(desc_s) + len(desc_o) + 6 - max_len
    if excess <= 0:
        return p_rel, desc_s, desc_o
    cut = min(excess, len(p_rel) - target_len)
    p_rel = p_rel[:len(p_rel) - cut]
    excess -= cut
    cut = min(excess, len(desc_o))
    desc_o = desc_o[:len(desc_o) - cut]
    excess -= cut
    cut = min(excess, len(desc_s))
    desc_s = desc_s[:len(desc_s) - cut]
    excess -= cut
    if excess > 0:
        raise TokenizeError(f"target text alone exceeds max_sequence_length={max_len}")
    return p_rel, desc_s, desc_o


def tokenize(sentence: StructuredSentence, vocab: Vocab,
             max_len: int = MAX_SEQUENCE_LENGTH) -> TokenizedSentence:
    """Frame the three segments as ``[CLS] ... [SEP]`` each and map to ids.

    Over-long sentences lose tokens from the end of the path text first, then
    from the descriptions; the target text is never cut.
    """
    p_rel, d_s, d_o = (list(seg) for seg in sentence.segments)
    p_rel, d_s, d_o = _truncate(p_rel, sentence.target_len, d_s, d_o, max_len)
    return tokenize_segments([p_rel, d_s, d_o], vocab, t_rho=sentence.earliest_time)


def tokenize_segments(segments: Sequence[Sequence[str]], vocab: Vocab,
                      t_rho: int = 0) -> TokenizedSentence:
    tokens: list[str] = []
    spans = []
    for seg in segments:
        start = len(tokens)
        tokens += _frame(list(seg))
        spans.append((start, len(tokens)))
    ids = np.asarray(vocab.encode(tokens), dtype=np.int64)
    tpos = np.flatnonzero(vocab.is_time(ids))
    return TokenizedSentence(ids, tpos, tuple(spans), t_rho)


# -- masking ---------------------------------------------------------------------

@dataclass
class MaskedSample:
    input_ids: np.ndarray     # ids after replacement
    positions: np.ndarray     # sampled positions, sorted
    labels: np.ndarray        # original ids at ``positions``
    kinds: list[str] = field(default_factory=list)

    def restore(self) -> np.ndarray:
        out = self.input_ids.copy()
        out[self.positions] = self.labels
        return out


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def time_quota(m: int, p_time: float = 0.25) -> int:
    if m == 0:
        return 0
    return max(1, math.ceil(Fraction(str(p_time)) * m))


def total_budget(q: int, p_total: float = 0.15) -> int:
    return _round_half_up(Fraction(str(p_total)) * q)


def _sampleable(ts: TokenizedSentence, vocab: Vocab) -> np.ndarray:
    ids = ts.ids
    ok = (ids != vocab.cls) & (ids != vocab.sep) & (ids != vocab.pad)
    return np.flatnonzero(ok)


def _replace(ids: np.ndarray, positions: np.ndarray, vocab: Vocab,
             rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """BERT's 80/10/10 rule over ``positions``; returns new ids and per-position kinds."""
    out = ids.copy()
    kinds = []
    u = rng.random(len(positions))
    n_random = int(np.sum((u >= 0.8) & (u < 0.9)))
    # random replacements come from the non-special range
    randoms = iter(rng.integers(len(SPECIALS), len(vocab), size=n_random))
    for pos, x in zip(positions, u):
        if x < 0.8:
            out[pos] = vocab.mask
            kinds.append(KIND_MASK)
        elif x < 0.9:
            out[pos] = next(randoms)
            kinds.append(KIND_RANDOM)
        else:
            kinds.append(KIND_KEEP)
    return out, kinds


def time_mask(ts: TokenizedSentence, vocab: Vocab, rng: np.random.Generator,
              p_time: float = 0.25, p_total: float = 0.15) -> MaskedSample:
    """Time masking: a quota of time tokens is always masked, then ordinary tokens fill the budget."""
    if ts.q < 1:
        raise ValueError("empty sentence")
    tpos = np.asarray(ts.time_positions, dtype=np.int64)
    k_time = time_quota(len(tpos), p_time)
    chosen_t = np.sort(rng.choice(tpos, size=k_time, replace=False)) if k_time else tpos[:0]
    others = np.setdiff1d(_sampleable(ts, vocab), tpos)
    k_other = max(k_time, total_budget(ts.q, p_total)) - k_time
    k_other = min(k_other, len(others))
    chosen_o = np.sort(rng.choice(others, size=k_other, replace=False)) if k_other else others[:0]

    ids = ts.ids.copy()
    ids[chosen_t] = vocab.mask
    ids, kinds_o = _replace(ids, chosen_o, vocab, rng)
    positions = np.concatenate([chosen_t, chosen_o])
    kind_of = {int(p): KIND_MASK for p in chosen_t}
    kind_of.update({int(p): k for p, k in zip(chosen_o, kinds_o)})
    order = np.argsort(positions, kind="stable")
    positions = positions[order]
    return MaskedSample(ids, positions, ts.ids[positions].copy(),
                        [kind_of[int(p)] for p in positions])


def random_mask(ts: TokenizedSentence, vocab: Vocab, rng: np.random.Generator,
                p_total: float = 0.15) -> MaskedSample:
    """Ordinary BERT masking: sample ``round(p_total * q)`` positions, 80/10/10 for all."""
    cand = _sampleable(ts, vocab)
    k = min(max(1, total_budget(ts.q, p_total)), len(cand))
    chosen = np.sort(rng.choice(cand, size=k, replace=False)) if k else cand[:0]
    ids, kinds = _replace(ts.ids, chosen, vocab, rng)
    return MaskedSample(ids, chosen, ts.ids[chosen].copy(), kinds)


def mask_sentence(ts: TokenizedSentence, vocab: Vocab, rng: np.random.Generator,
                  mode: str = "time") -> MaskedSample:
    if mode == "time":
        return time_mask(ts, vocab, rng)
    if mode == "random":
        return random_mask(ts, vocab, rng)
    raise ValueError(f"unknown masking mode {mode!r}")


# -- corpus files ------------------------------------------------------------------

CORPUS_STREAM = 0xC0


def corpus_record(ts: TokenizedSentence, vocab: Vocab) -> dict:
    return {
        "tokens": [vocab.tokens[i] for i in ts.ids],
        "time_positions": [int(p) for p in ts.time_positions],
        "segments": [list(s) for s in ts.segments],
    }


def emit_pretraining_corpus(tkg: Tkg, N: int, templates: TemplateTable, cfg: SentenceConfig,
                            seed: int, sink: IO[str], vocab: Vocab | None = None,
                            max_len: int = MAX_SEQUENCE_LENGTH, inverse_targets: bool = False) -> int:
    """Write one JSON line per structured sentence built for every edge of ``tkg``.

    Each edge gets its own RNG stream derived from ``(seed, edge index)`` so the
    output does not depend on processing order.
    """
    vocab = vocab or build_vocab(tkg, templates)
    count = 0
    for eid, q in enumerate(tkg.edges):
        targets = [q]
        if inverse_targets:
            targets.append(q._replace(subject=q.object, object=q.subject))
        for j, target in enumerate(targets):
            rng = np.random.default_rng([seed, CORPUS_STREAM, eid, j])
            bundle = build_bundle(tkg, target, N, templates, cfg, rng)
            for sent in bundle.sentences:
                ts = tokenize(sent, vocab, max_len)
                sink.write(json.dumps(corpus_record(ts, vocab), ensure_ascii=False) + "\n")
                count += 1
    return count


def read_corpus(lines: Iterable[str], vocab: Vocab) -> list[TokenizedSentence]:
    out = []
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        ids = np.asarray(vocab.encode(rec["tokens"]), dtype=np.int64)
        out.append(TokenizedSentence(ids, np.asarray(rec["time_positions"], dtype=np.int64),
                                     tuple(tuple(s) for s in rec["segments"])))
    return out
