"""Sentence scoring, time-weighted aggregation, negative sampling and training.

A sentence's probability is::

    p = sigmoid(w_theta . (h_s * h_t + h_r - h_o * h_t) + b_theta)

with ``h_x = W_x u_x + b_x`` over the encoder's [CLS] vectors of the three
segments and ``h_t = t2v(time)``.  A quadruple's score ``f`` is the recency
weighted mean of its sentences' probabilities.
"""
from __future__ import annotations

import logging
import weakref
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .corpus import MAX_SEQUENCE_LENGTH, Vocab, tokenize
from .encoder import (
    EncoderConfig, EncoderParams, TrainingDiverged, backward, finite_difference_check, forward,
    pad_batch,
)
from .kg_store import Point, Quadruple, TimeScope, Tkg, k_hop_neighbors
from .optim import Adam
from .sentences import SentenceBundle, SentenceConfig, TemplateTable, build_bundle

log = logging.getLogger(__name__)

SCORING_NAMES = ("w_s", "b_s", "w_r", "b_r", "w_o", "b_o", "w_theta", "b_theta", "omega", "phi")
BUNDLE_STREAM = 0xB0
NEGATIVE_STREAM = 0xA7


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


# -- parameters ------------------------------------------------------------------------

def scoring_shapes(d: int) -> dict[str, tuple[int, ...]]:
    return {"w_s": (d, d), "b_s": (d,), "w_r": (d, d), "b_r": (d,), "w_o": (d, d), "b_o": (d,),
            "w_theta": (d,), "b_theta": (), "omega": (d,), "phi": (d,)}


def init_scoring(d: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p = {}
    for name in ("w_s", "w_r", "w_o"):
        p[name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
    for name in ("b_s", "b_r", "b_o"):
        p[name] = np.zeros(d)
    p["w_theta"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
    p["b_theta"] = np.zeros(())
    p["omega"] = rng.normal(0.0, 1.0, size=d)
    p["phi"] = rng.uniform(-np.pi, np.pi, size=d)
    return p


def zero_scoring(d: int) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in scoring_shapes(d).items()}


# -- formulas ------------------------------------------------------------------------------

def t2v(t, omega: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Time2Vec: one linear component followed by d-1 sinusoids.  ``t`` may be an array."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    z = omega * t + phi
    out = np.sin(z)
    out[..., 0] = z[..., 0]
    return out


def _t2v_backward(t: np.ndarray, omega, phi, dh: np.ndarray):
    """Gradients of sum(dh * t2v(t)) w.r.t. omega and phi, summed over leading axes."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    z = omega * t + phi
    dz = dh * np.cos(z)
    dz[..., 0] = dh[..., 0]
    dz = dz.reshape(-1, dz.shape[-1])
    t = np.broadcast_to(t, dh.shape).reshape(-1, dh.shape[-1])
    return (dz * t).sum(axis=0), dz.sum(axis=0)


def probability_from_h(h_s, h_r, h_o, h_t, w_theta, b_theta):
    return sigmoid(np.sum(w_theta * (h_s * h_t + h_r - h_o * h_t), axis=-1) + b_theta)


def time_encoding(time: TimeScope, params: dict, time_scale: float = 1.0,
                  no_t2v: bool = False) -> np.ndarray:
    d = params["w_theta"].shape[0]
    if no_t2v:
        return np.ones(d)
    if isinstance(time, Point):
        return t2v(time.t * time_scale, params["omega"], params["phi"])
    a = t2v(time.begin * time_scale, params["omega"], params["phi"])
    b = t2v(time.end * time_scale, params["omega"], params["phi"])
    return 0.5 * (a + b)


def sentence_probability(u_s, u_r, u_o, time: TimeScope, params: dict,
                         time_scale: float = 1.0, no_t2v: bool = False) -> float:
    """p for one sentence from its three [CLS] vectors and the target's time."""
    h_s = params["w_s"] @ u_s + params["b_s"]
    h_r = params["w_r"] @ u_r + params["b_r"]
    h_o = params["w_o"] @ u_o + params["b_o"]
    h_t = time_encoding(time, params, time_scale, no_t2v)
    return float(probability_from_h(h_s, h_r, h_o, h_t, params["w_theta"], params["b_theta"]))


def _softmax_shift(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def aggregation_weights(t_rho: Sequence[int], target_time: TimeScope) -> np.ndarray:
    t_rho = np.asarray(t_rho, dtype=np.float64)
    if t_rho.size == 0:
        raise ValueError("cannot aggregate an empty sentence set")
    if isinstance(target_time, Point):
        return _softmax_shift(t_rho - target_time.t)
    return (0.5 * _softmax_shift(t_rho - target_time.begin)
            + 0.5 * _softmax_shift(t_rho - target_time.end))


@dataclass
class SentenceScore:
    p: float
    t_rho: int
    weight: float = 0.0


def aggregate(scores: Sequence[tuple[float, int]] | Sequence[SentenceScore],
              target_time: TimeScope) -> tuple[float, list[SentenceScore]]:
    """f = sum of recency weights times sentence probabilities; weights are returned too."""
    items = [s if isinstance(s, SentenceScore) else SentenceScore(float(s[0]), int(s[1]))
             for s in scores]
    if not items:
        raise ValueError("cannot aggregate an empty sentence set")
    w = aggregation_weights([s.t_rho for s in items], target_time)
    for s, wi in zip(items, w):
        s.weight = float(wi)
    f = float(np.dot(w, [s.p for s in items]))
    return f, items


# -- loss --------------------------------------------------------------------------------------

def negative_weights(f_negs: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 0:
        return np.full(len(f_negs), 1.0 / len(f_negs))
    return _softmax_shift(temperature * np.asarray(f_negs))


def training_loss(f_pos: float, f_negs: Sequence[float], margin: float = 0.5,
                  convention: str = "plausibility", temperature: float = 0.0,
                  with_grad: bool = False):
    """Margin loss over one positive and its negatives.

    ``plausibility`` pushes positives above and negatives below the margin;
    ``paper-literal`` uses the opposite signs.  Self-adversarial weights (when
    ``temperature`` > 0) are treated as constants for differentiation.
    """
    f_negs = np.asarray(f_negs, dtype=np.float64)
    if f_negs.size == 0:
        raise ValueError("at least one negative is required")
    w = negative_weights(f_negs, temperature)
    if convention == "plausibility":
        a, sign = f_pos - margin, 1.0
        b = margin - f_negs
    elif convention == "paper-literal":
        a, sign = margin - f_pos, -1.0
        b = f_negs - margin
    else:
        raise ValueError(f"unknown loss convention {convention!r}")
    loss = float(-log_sigmoid(a) - np.sum(w * log_sigmoid(b)))
    if not with_grad:
        return loss
    d_pos = -sign * (1.0 - sigmoid(a))
    d_neg = sign * w * (1.0 - sigmoid(b))
    return loss, float(d_pos), d_neg


# -- negatives ---------------------------------------------------------------------------------

_KHOP: "weakref.WeakKeyDictionary[Tkg, dict]" = weakref.WeakKeyDictionary()


def _three_hop(tkg: Tkg, e: int) -> set[int]:
    cache = _KHOP.setdefault(tkg, {})
    got = cache.get(e)
    if got is None:
        got = cache[e] = k_hop_neighbors(tkg, e, 3)
    return got


def negative_pools(tkg: Tkg, positive: Quadruple) -> list[set[int]]:
    """Candidate replacement pools, narrowest first: common 3-hop neighbours, union, everything."""
    s, o = positive.subject, positive.object
    ns, no = _three_hop(tkg, s), _three_hop(tkg, o)
    return [(ns & no) - {s, o}, (ns | no) - {s, o}, set(range(tkg.num_entities))]


def sample_negatives(tkg: Tkg, positive: Quadruple, n: int, rng: np.random.Generator,
                     known: Sequence[Tkg] = (), sides: str = "both") -> list[Quadruple]:
    """``n`` corrupted copies of ``positive`` that are not edges of ``tkg`` (or ``known``).

    Each negative replaces the head or the tail (fair coin unless ``sides`` is
    ``"tail"`` or ``"head"``).  Replacements come from the narrowest pool that
    still holds enough admissible entities; the global pool is sampled with
    replacement only if even it is too small.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    positive = Quadruple(*positive)
    graphs = [tkg, *known]

    def corrupt(side, e):
        return (positive._replace(subject=e) if side == "head"
                else positive._replace(object=e))

    def admissible(side, pool):
        current = positive.subject if side == "head" else positive.object
        return sorted(e for e in pool if e != current
                      and not any(g.edge_id(corrupt(side, e)) is not None for g in graphs))

    if sides == "both":
        coin = rng.random(n) < 0.5
        want = {"head": int(coin.sum()), "tail": int(n - coin.sum())}
    else:
        want = {sides: n, "tail" if sides == "head" else "head": 0}
    pools = negative_pools(tkg, positive)
    picked: dict[str, list[int]] = {"head": [], "tail": []}
    for side in ("head", "tail"):
        k = want[side]
        if k == 0:
            continue
        cand: list[int] = []
        for pool in pools:
            cand = admissible(side, pool)
            if len(cand) >= k:
                picked[side] = [cand[i] for i in rng.choice(len(cand), size=k, replace=False)]
                break
        else:
            if cand:
                picked[side] = [cand[i] for i in rng.integers(len(cand), size=k)]
            else:
                other = "tail" if side == "head" else "head"
                alt = admissible(other, pools[-1])
                if not alt:
                    raise ValueError(f"no admissible negative exists for {positive}")
                picked[other] += [alt[i] for i in rng.integers(len(alt), size=k)]
    out = []
    heads, tails = iter(picked["head"]), iter(picked["tail"])
    order = (["head"] * len(picked["head"]) + ["tail"] * len(picked["tail"]))
    for side in order:
        out.append(corrupt(side, next(heads) if side == "head" else next(tails)))
    return out


# -- model ---------------------------------------------------------------------------------------

@dataclass
class ModelConfig:
    N: int = 4
    walks: int = 128
    max_hops: int = 3
    reuse_paths: bool = True
    no_paths: bool = False
    no_history: bool = False
    no_t2v: bool = False
    max_len: int = MAX_SEQUENCE_LENGTH
    seed: int = 0
    time_origin: int = 0
    time_span: int = 1

    def sentence_config(self) -> SentenceConfig:
        return SentenceConfig(max_hops=self.max_hops, walks=self.walks,
                              reuse_paths=self.reuse_paths, no_paths=self.no_paths,
                              no_history=self.no_history)


@dataclass
class Model:
    encoder: EncoderParams
    scoring: dict[str, np.ndarray]
    vocab: Vocab
    templates: TemplateTable
    config: ModelConfig = field(default_factory=ModelConfig)

    @property
    def d(self) -> int:
        return self.encoder.config.d_model

    def time_inputs(self, tkg: Tkg, idx) -> np.ndarray:
        """Absolute time of a graph's time index, rescaled by the training graph's span."""
        idx = np.asarray(idx, dtype=np.float64)
        return (tkg.time_origin + idx - self.config.time_origin) / max(1, self.config.time_span)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.tensors.items()}
        out.update({f"scoring.{k}": v for k, v in self.scoring.items()})
        return out

    def save(self, path, extra: dict | None = None) -> None:
        header = {
            "encoder": asdict(self.encoder.config),
            "model": asdict(self.config),
            "vocab": self.vocab.to_json(),
            "templates": self.templates.templates,
        }
        if extra:
            header["extra"] = extra
        checkpoint.save(path, header, self.tensors())

    @classmethod
    def load(cls, path) -> "Model":
        header, tensors = checkpoint.load(path)
        return cls.from_parts(header, tensors)

    @classmethod
    def from_parts(cls, header: dict, tensors: dict) -> "Model":
        enc_cfg = EncoderConfig(**header["encoder"])
        enc = EncoderParams(enc_cfg, {k[len("encoder."):]: v for k, v in tensors.items()
                                      if k.startswith("encoder.")})
        sc = {k[len("scoring."):]: v for k, v in tensors.items() if k.startswith("scoring.")}
        if not sc:
            sc = init_scoring(enc_cfg.d_model, np.random.default_rng(enc_cfg.rng_seed))
        known = {f.name for f in fields(ModelConfig)}
        cfg = ModelConfig(**{k: v for k, v in header.get("model", {}).items() if k in known})
        return cls(enc, sc, Vocab.from_json(header["vocab"]),
                   TemplateTable(header.get("templates", {})), cfg)


def new_model(vocab: Vocab, templates: TemplateTable, train_tkg: Tkg,
              encoder: EncoderParams | None = None, d_model: int = 64, n_layers: int = 1,
              init_scale: float = 0.02, seed: int = 0, **cfg) -> Model:
    if encoder is None:
        ecfg = EncoderConfig(vocab_size=len(vocab), d_model=d_model, n_layers=n_layers,
                             init_scale=init_scale, rng_seed=seed,
                             max_positions=cfg.get("max_len", MAX_SEQUENCE_LENGTH))
        from .encoder import init_encoder
        encoder = init_encoder(ecfg)
    elif encoder.config.vocab_size != len(vocab):
        raise ValueError("encoder vocabulary size does not match the vocabulary")
    scoring = init_scoring(encoder.config.d_model, np.random.default_rng([seed, 0x5C]))
    config = ModelConfig(seed=seed, time_origin=train_tkg.time_origin,
                         time_span=train_tkg.time_span, **cfg)
    return Model(encoder, scoring, vocab, templates, config)


# -- bundles -> token ids --------------------------------------------------------------------

@dataclass
class Prepared:
    quad: Quadruple
    segments: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # per sentence: P_rel, desc_s, desc_o
    t_rho: np.ndarray
    bundle: SentenceBundle


class BundleSource:
    """Memoized, seed-determined bundles for quadruples scored against one context graph."""

    def __init__(self, tkg: Tkg, model: Model):
        self.tkg = tkg
        self.model = model
        self.cfg = model.config.sentence_config()
        self._cache: dict[Quadruple, Prepared] = {}

    def rng_for(self, q: Quadruple) -> np.random.Generator:
        t = q.time
        return np.random.default_rng([self.model.config.seed, BUNDLE_STREAM, q.subject,
                                      q.relation, q.object, t.begin, t.end])

    def get(self, q: Quadruple) -> Prepared:
        q = Quadruple(*q)
        got = self._cache.get(q)
        if got is None:
            m = self.model
            bundle = build_bundle(self.tkg, q, m.config.N, m.templates, self.cfg, self.rng_for(q))
            segs, t_rho = [], []
            for sent in bundle.sentences:
                ts = tokenize(sent, m.vocab, m.config.max_len)
                segs.append(tuple(ts.segment_ids(k) for k in range(3)))
                t_rho.append(sent.earliest_time)
            got = Prepared(q, segs, np.asarray(t_rho, dtype=np.float64), bundle)
            self._cache[q] = got
        return got

    def __len__(self) -> int:
        return len(self._cache)


# -- batched scoring -----------------------------------------------------------------------------

def _encode_segments(enc: EncoderParams, seqs: list[np.ndarray]):
    ids, lengths = pad_batch(seqs)
    H, cache = forward(enc, ids, lengths)
    return H[:, 0].copy(), (cache, H.shape)


def score_forward(model: Model, tkg: Tkg, preps: Sequence[Prepared]):
    """Scores ``f`` (one per prepared quadruple) plus everything the backward pass needs."""
    sc = model.scoring
    owner, seg_r, seg_s, seg_o, t_rho = [], [], [], [], []
    for j, prep in enumerate(preps):
        for a, b, c in prep.segments:
            owner.append(j)
            seg_r.append(a)
            seg_s.append(b)
            seg_o.append(c)
        t_rho.append(prep.t_rho)
    owner = np.asarray(owner)
    S = len(owner)
    u, enc_cache = _encode_segments(model.encoder, seg_r + seg_s + seg_o)
    u_r, u_s, u_o = u[:S], u[S:2 * S], u[2 * S:]
    h_s = u_s @ sc["w_s"].T + sc["b_s"]
    h_r = u_r @ sc["w_r"].T + sc["b_r"]
    h_o = u_o @ sc["w_o"].T + sc["b_o"]

    begins = np.array([p.quad.time.begin for p in preps], dtype=np.float64)
    ends = np.array([p.quad.time.end for p in preps], dtype=np.float64)
    tau_b = model.time_inputs(tkg, begins)
    tau_e = model.time_inputs(tkg, ends)
    if model.config.no_t2v:
        h_t_quad = np.ones((len(preps), model.d))
    else:
        h_t_quad = 0.5 * (t2v(tau_b, sc["omega"], sc["phi"]) + t2v(tau_e, sc["omega"], sc["phi"]))
    h_t = h_t_quad[owner]

    g = h_s * h_t + h_r - h_o * h_t
    p = sigmoid(g @ sc["w_theta"] + sc["b_theta"])
    weights = np.concatenate([aggregation_weights(prep.t_rho, prep.quad.time) for prep in preps])
    f = np.bincount(owner, weights=weights * p, minlength=len(preps))
    cache = dict(owner=owner, u=(u_r, u_s, u_o), h=(h_s, h_r, h_o), h_t=h_t, g=g, p=p,
                 weights=weights, tau=(tau_b, tau_e), enc=enc_cache)
    return f, cache


def score_backward(model: Model, cache: dict, df: np.ndarray, freeze_encoder: bool = False):
    """Gradients of ``sum(df * f)`` w.r.t. scoring (``scoring.*``) and encoder (``encoder.*``) tensors."""
    sc = model.scoring
    owner, p, w, g, h_t = cache["owner"], cache["p"], cache["weights"], cache["g"], cache["h_t"]
    u_r, u_s, u_o = cache["u"]
    h_s, h_r, h_o = cache["h"]
    dz = df[owner] * w * p * (1.0 - p)
    grads = {"w_theta": dz @ g, "b_theta": np.asarray(dz.sum())}
    dg = dz[:, None] * sc["w_theta"][None, :]
    dh_s = dg * h_t
    dh_o = -dg * h_t
    dh_r = dg
    grads["w_s"], grads["b_s"] = dh_s.T @ u_s, dh_s.sum(axis=0)
    grads["w_r"], grads["b_r"] = dh_r.T @ u_r, dh_r.sum(axis=0)
    grads["w_o"], grads["b_o"] = dh_o.T @ u_o, dh_o.sum(axis=0)
    if model.config.no_t2v:
        grads["omega"] = np.zeros_like(sc["omega"])
        grads["phi"] = np.zeros_like(sc["phi"])
    else:
        dh_t = dg * (h_s - h_o)
        n_q = len(df)
        dh_tq = np.zeros((n_q, dh_t.shape[1]))
        np.add.at(dh_tq, owner, dh_t)
        tau_b, tau_e = cache["tau"]
        om1, ph1 = _t2v_backward(tau_b, sc["omega"], sc["phi"], 0.5 * dh_tq)
        om2, ph2 = _t2v_backward(tau_e, sc["omega"], sc["phi"], 0.5 * dh_tq)
        grads["omega"], grads["phi"] = om1 + om2, ph1 + ph2
    out = {f"scoring.{k}": v for k, v in grads.items()}
    if not freeze_encoder:
        du = np.concatenate([dh_r @ sc["w_r"], dh_s @ sc["w_s"], dh_o @ sc["w_o"]])
        enc_cache, shape = cache["enc"]
        dH = np.zeros(shape)
        dH[:, 0] = du
        for k, v in backward(model.encoder, enc_cache, dH).items():
            out[f"encoder.{k}"] = v
    return out


def score_quads(model: Model, tkg: Tkg, quads: Sequence[Quadruple],
                source: BundleSource | None = None, chunk: int = 64) -> np.ndarray:
    source = source or BundleSource(tkg, model)
    out = []
    for a in range(0, len(quads), chunk):
        preps = [source.get(q) for q in quads[a:a + chunk]]
        f, _ = score_forward(model, tkg, preps)
        out.append(f)
    return np.concatenate(out) if out else np.zeros(0)


def sentence_scores(model: Model, tkg: Tkg, prep: Prepared) -> list[SentenceScore]:
    _, cache = score_forward(model, tkg, [prep])
    return [SentenceScore(float(p), int(t), float(w))
            for p, t, w in zip(cache["p"], prep.t_rho, cache["weights"])]


# -- training -------------------------------------------------------------------------------------

@dataclass
class TrainHyper:
    margin: float = 0.5
    n: int = 4
    N: int = 4
    lr: float = 1e-3
    epochs: int = 5
    batch: int = 8
    loss_convention: str = "plausibility"
    adversarial_temperature: float = 0.0
    seed: int = 0
    freeze_encoder: bool = False
    relations: tuple[int, ...] | None = None  # restrict positives to these relation ids
    lr_decay: bool = False  # linear decay to zero over all epochs

    def __post_init__(self):
        if self.n < 1 or self.N < 1:
            raise ValueError("n and N must be >= 1")


def batch_loss(model: Model, tkg: Tkg, source: BundleSource,
               examples: Sequence[tuple[Quadruple, list[Quadruple]]], hyper: TrainHyper,
               need_grad: bool = True):
    """Mean training loss over (positive, negatives) examples and, optionally, its gradients."""
    preps, spans = [], []
    for pos, negs in examples:
        a = len(preps)
        preps.append(source.get(pos))
        preps += [source.get(q) for q in negs]
        spans.append((a, len(preps)))
    f, cache = score_forward(model, tkg, preps)
    df = np.zeros_like(f)
    total = 0.0
    for a, b in spans:
        loss, d_pos, d_neg = training_loss(f[a], f[a + 1:b], hyper.margin, hyper.loss_convention,
                                           hyper.adversarial_temperature, with_grad=True)
        total += loss
        df[a] = d_pos
        df[a + 1:b] = d_neg
    k = len(examples)
    if not need_grad:
        return total / k, None
    grads = score_backward(model, cache, df / k, freeze_encoder=hyper.freeze_encoder)
    return total / k, grads


def scoring_grad_check(model: Model, tkg: Tkg, examples, hyper: TrainHyper,
                       eps: float = 1e-4) -> float:
    """Worst relative error of the end-to-end loss gradients against central differences."""
    source = BundleSource(tkg, model)
    _, grads = batch_loss(model, tkg, source, examples, hyper)
    return finite_difference_check(
        lambda: batch_loss(model, tkg, source, examples, hyper, need_grad=False)[0],
        model.tensors(), grads, eps)


def train(tkg: Tkg, model: Model, hyper: TrainHyper,
          callback: Callable[[int, Model], None] | None = None,
          source: BundleSource | None = None) -> list[float]:
    """Fit scoring (and, unless frozen, encoder) parameters on the edges of ``tkg``.

    Negatives for positive ``i`` in epoch ``e`` come from the RNG stream
    ``(seed, e, i)``, so runs are reproducible.  Returns per-epoch mean loss.
    """
    if tkg.num_edges == 0:
        raise ValueError("training graph has no edges")
    model.config.N = hyper.N
    source = source or BundleSource(tkg, model)
    tensors = model.tensors()
    names = [k for k in tensors if not (hyper.freeze_encoder and k.startswith("encoder."))]
    opt = Adam(tensors, lr=hyper.lr, names=names)
    positives = [i for i, q in enumerate(tkg.edges)
                 if hyper.relations is None or q.relation in hyper.relations]
    history: list[float] = []
    for epoch in range(hyper.epochs):
        if hyper.lr_decay:
            opt.lr = hyper.lr * (1.0 - epoch / hyper.epochs)
        order = np.random.default_rng([hyper.seed, 0x7E, epoch]).permutation(len(positives))
        losses = []
        for step, a in enumerate(range(0, len(order), hyper.batch)):
            examples = []
            for i in order[a:a + hyper.batch]:
                eid = positives[i]
                pos = tkg.edges[eid]
                rng = np.random.default_rng([hyper.seed, NEGATIVE_STREAM, epoch, eid])
                examples.append((pos, sample_negatives(tkg, pos, hyper.n, rng)))
            loss, grads = batch_loss(model, tkg, source, examples, hyper)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            opt.step(grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("train epoch %d loss %.4f (%d cached bundles)", epoch, history[-1], len(source))
        if callback is not None:
            callback(epoch, model)
    return history
