"""Compact single-head transformer encoder with an MLM head and exact analytic gradients.

Per layer, with ``H`` the running hidden states::

    A = softmax(H Wq (H Wk)^T / sqrt(d))      (padded keys excluded)
    H = H + A (H Wv)
    H = H + relu(H W1 + b1) W2 + b2

There is no layer normalization.  MLM logits are ``H E^T + mlm_bias`` with the
output projection tied to the token embedding ``E`` (the same array).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import MaskedSample, TokenizedSentence, Vocab, mask_sentence
from .optim import Adam

log = logging.getLogger(__name__)

NEG_INF = -1e30


class SequenceTooLong(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 1
    max_positions: int = 128
    init_scale: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        if self.d_model % 2:
            raise ValueError("d_model must be even")
        for name in ("vocab_size", "d_model", "n_layers", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")


def layer_names(i: int) -> list[str]:
    return [f"l{i}.{n}" for n in ("wq", "wk", "wv", "w1", "b1", "w2", "b2")]


def tensor_names(cfg: EncoderConfig) -> list[str]:
    names = ["embed", "mlm_bias"]
    for i in range(cfg.n_layers):
        names += layer_names(i)
    return names


def tensor_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes = {"embed": (v, d), "mlm_bias": (v,)}
    for i in range(cfg.n_layers):
        shapes.update({
            f"l{i}.wq": (d, d), f"l{i}.wk": (d, d), f"l{i}.wv": (d, d),
            f"l{i}.w1": (d, 2 * d), f"l{i}.b1": (2 * d,),
            f"l{i}.w2": (2 * d, d), f"l{i}.b2": (d,),
        })
    return shapes


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator | None = None) -> EncoderParams:
    """Weights ~ N(0, init_scale^2), biases zero."""
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    tensors = {}
    for name, shape in tensor_shapes(cfg).items():
        if name == "mlm_bias" or name.endswith((".b1", ".b2")):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, 1.0, size=shape) * cfg.init_scale
    return EncoderParams(cfg, tensors)


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(length: int, d: int) -> np.ndarray:
    key = (length, d)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(length)[:, None]
        freq = np.power(10000.0, -np.arange(0, d, 2) / d)[None, :]
        pe = np.zeros((length, d))
        pe[:, 0::2] = np.sin(pos * freq)
        pe[:, 1::2] = np.cos(pos * freq)
        pe.flags.writeable = False
        _PE_CACHE[key] = pe
    return pe


def pad_batch(seqs: Sequence[np.ndarray], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max(initial=1))), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def forward(params: EncoderParams, ids: np.ndarray, lengths: np.ndarray | None = None):
    """Batched forward pass.  ``ids`` is (B, L); returns hidden states (B, L, d) and a cache."""
    cfg = params.config
    B, L = ids.shape
    if L > cfg.max_positions:
        raise SequenceTooLong(f"sequence length {L} > max_positions {cfg.max_positions}")
    if lengths is None:
        lengths = np.full(B, L)
    d = cfg.d_model
    scale = 1.0 / np.sqrt(d)
    key_ok = np.arange(L)[None, :] < lengths[:, None]          # (B, L)
    H = params["embed"][ids] + positional_encoding(L, d)[None]
    layers = []
    for i in range(cfg.n_layers):
        t = params.tensors
        wq, wk, wv = t[f"l{i}.wq"], t[f"l{i}.wk"], t[f"l{i}.wv"]
        w1, b1, w2, b2 = t[f"l{i}.w1"], t[f"l{i}.b1"], t[f"l{i}.w2"], t[f"l{i}.b2"]
        Q, K, V = H @ wq, H @ wk, H @ wv
        S = np.matmul(Q, K.transpose(0, 2, 1)) * scale
        S = np.where(key_ok[:, None, :], S, NEG_INF)
        S -= S.max(axis=-1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=-1, keepdims=True)
        H1 = H + np.matmul(A, V)
        Z = H1 @ w1 + b1
        R = np.maximum(Z, 0.0)
        H2 = H1 + R @ w2 + b2
        layers.append((H, Q, K, V, A, H1, Z, R))
        H = H2
    return H, {"ids": ids, "layers": layers}


def backward(params: EncoderParams, cache: dict, dH: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every encoder tensor, given dLoss/dH (B, L, d)."""
    cfg = params.config
    scale = 1.0 / np.sqrt(cfg.d_model)
    t = params.tensors
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(cfg.n_layers)):
        H, Q, K, V, A, H1, Z, R = cache["layers"][i]
        wq, wk, wv = t[f"l{i}.wq"], t[f"l{i}.wk"], t[f"l{i}.wv"]
        w1, w2 = t[f"l{i}.w1"], t[f"l{i}.w2"]
        flat = lambda x: x.reshape(-1, x.shape[-1])  # noqa: E731
        grads[f"l{i}.b2"] = dH.sum(axis=(0, 1))
        grads[f"l{i}.w2"] = flat(R).T @ flat(dH)
        dZ = (dH @ w2.T) * (Z > 0)
        grads[f"l{i}.b1"] = dZ.sum(axis=(0, 1))
        grads[f"l{i}.w1"] = flat(H1).T @ flat(dZ)
        dH1 = dH + dZ @ w1.T
        dA = np.matmul(dH1, V.transpose(0, 2, 1))
        dV = np.matmul(A.transpose(0, 2, 1), dH1)
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
        dQ = np.matmul(dS, K)
        dK = np.matmul(dS.transpose(0, 2, 1), Q)
        Hf = flat(H)
        grads[f"l{i}.wq"] = Hf.T @ flat(dQ)
        grads[f"l{i}.wk"] = Hf.T @ flat(dK)
        grads[f"l{i}.wv"] = Hf.T @ flat(dV)
        dH = dH1 + dQ @ wq.T + dK @ wk.T + dV @ wv.T
    dE = np.zeros_like(t["embed"])
    np.add.at(dE, cache["ids"].ravel(), dH.reshape(-1, dH.shape[-1]))
    grads["embed"] = dE
    grads.setdefault("mlm_bias", np.zeros_like(t["mlm_bias"]))
    return grads


@dataclass
class HiddenStates:
    H: np.ndarray            # (q, d)
    attention: list          # per layer (q, q)

    @property
    def cls(self) -> np.ndarray:
        return self.H[0]


def encode(params: EncoderParams, tokens: Sequence[int]) -> HiddenStates:
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    H, cache = forward(params, ids)
    return HiddenStates(H[0], [layer[4][0] for layer in cache["layers"]])


def encode_cls(params: EncoderParams, seqs: Sequence[np.ndarray], chunk: int = 512):
    """[CLS] vectors (row 0) of many variable-length sequences."""
    out = np.empty((len(seqs), params.config.d_model))
    for a in range(0, len(seqs), chunk):
        ids, lengths = pad_batch(seqs[a:a + chunk])
        H, _ = forward(params, ids, lengths)
        out[a:a + chunk] = H[:, 0]
    return out


# -- MLM objective -----------------------------------------------------------------

def add_grads(acc: dict[str, np.ndarray], new: dict[str, np.ndarray], scale: float = 1.0):
    for k, v in new.items():
        if k in acc:
            acc[k] += scale * v
        else:
            acc[k] = scale * v
    return acc


def mlm_batch(params: EncoderParams, samples: Sequence[MaskedSample]):
    """Mean cross-entropy over all sampled positions of a batch, plus exact gradients."""
    if not samples or any(len(s.positions) == 0 for s in samples):
        raise ValueError("every MLM sample needs at least one sampled position")
    ids, lengths = pad_batch([s.input_ids for s in samples])
    H, cache = forward(params, ids, lengths)
    rows = np.concatenate([np.full(len(s.positions), b) for b, s in enumerate(samples)])
    cols = np.concatenate([s.positions for s in samples])
    labels = np.concatenate([s.labels for s in samples])
    E, bias = params["embed"], params["mlm_bias"]
    Hs = H[rows, cols]                                   # (P, d)
    logits = Hs @ E.T + bias
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    P = len(labels)
    loss = -logp[np.arange(P), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(P), labels] -= 1.0
    dlogits /= P
    dH = np.zeros_like(H)
    np.add.at(dH, (rows, cols), dlogits @ E)
    grads = backward(params, cache, dH)
    grads["embed"] += dlogits.T @ Hs
    grads["mlm_bias"] = dlogits.sum(axis=0)
    return float(loss), grads


def mlm_forward_backward(params: EncoderParams, sample: MaskedSample):
    return mlm_batch(params, [sample])


def mlm_loss(params: EncoderParams, sample: MaskedSample) -> float:
    return mlm_batch(params, [sample])[0]


# -- gradient checking ------------------------------------------------------------

def finite_difference_check(loss_fn: Callable[[], float], tensors: dict[str, np.ndarray],
                            analytic: dict[str, np.ndarray], eps: float = 1e-4,
                            names: Iterable[str] | None = None) -> float:
    """Max over entries of |analytic - central difference| / max(1, |analytic|).

    ``loss_fn`` must read the arrays in ``tensors`` in place; they are perturbed
    and restored entry by entry.
    """
    worst = 0.0
    for name in names or tensors:
        arr = tensors[name]
        g = analytic.get(name)
        if g is None:
            g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = loss_fn()
            flat[j] = old - eps
            down = loss_fn()
            flat[j] = old
            num = (up - down) / (2 * eps)
            err = abs(gflat[j] - num) / max(1.0, abs(gflat[j]))
            worst = max(worst, err)
    return worst


def grad_check(params: EncoderParams, sample: MaskedSample, eps: float = 1e-4,
               grads: dict[str, np.ndarray] | None = None) -> float:
    """Relative error of the MLM gradients (or of ``grads`` if given) against finite differences."""
    if grads is None:
        _, grads = mlm_forward_backward(params, sample)
    return finite_difference_check(lambda: mlm_loss(params, sample), params.tensors, grads, eps)


# -- pretraining ----------------------------------------------------------------------

@dataclass
class PretrainHyper:
    lr: float = 1e-3
    epochs: int = 10
    batch: int = 16
    accumulation: int = 1
    seed: int = 0
    mask_mode: str = "time"
    weight_decay: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# desk-scale recipe actually used vs the published full-scale recipe (recorded only)
PAPER_PRETRAIN = PretrainHyper(lr=5e-4, epochs=10, batch=8, accumulation=32, mask_mode="time",
                               weight_decay=0.01)


def pretrain(corpus: Sequence[TokenizedSentence], params: EncoderParams, vocab: Vocab,
             hyper: PretrainHyper, callback: Callable[[int, EncoderParams], None] | None = None):
    """Adam training of the MLM objective over freshly masked samples each epoch.

    Returns the per-epoch mean loss history; ``params`` is updated in place.
    """
    if not corpus:
        raise ValueError("empty pretraining corpus")
    history: list[float] = []
    if hyper.epochs <= 0:
        return history
    opt = Adam(params.tensors, lr=hyper.lr, weight_decay=hyper.weight_decay)
    step = 0
    for epoch in range(hyper.epochs):
        rng = np.random.default_rng([hyper.seed, 0x9E, epoch])
        order = rng.permutation(len(corpus))
        losses = []
        acc: dict[str, np.ndarray] = {}
        n_acc = 0
        for a in range(0, len(order), hyper.batch):
            samples = [mask_sentence(corpus[i], vocab, rng, hyper.mask_mode)
                       for i in order[a:a + hyper.batch]]
            samples = [s for s in samples if len(s.positions)]
            if not samples:
                continue
            loss, grads = mlm_batch(params, samples)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite MLM loss at epoch {epoch}, step {step}")
            losses.append(loss)
            add_grads(acc, grads, 1.0 / hyper.accumulation)
            n_acc += 1
            if n_acc == hyper.accumulation:
                opt.step(acc)
                acc, n_acc = {}, 0
                step += 1
        if n_acc:
            opt.step({k: v * hyper.accumulation / n_acc for k, v in acc.items()})
            step += 1
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
        if callback is not None:
            callback(epoch, params)
    return history
