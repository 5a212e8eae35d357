"""Desk-scale experiments on the planted-rule graph: learning, ablations and masking curves."""
from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import build_vocab, emit_pretraining_corpus, read_corpus
from .encoder import PretrainHyper, pretrain
from .evaluation import Metrics, Question, evaluate, make_question
from .scoring import BundleSource, Model, TrainHyper, init_scoring, new_model, train
from .sentences import TemplateTable
from .synthetic import PlantedRule, planted_rule_tkg

log = logging.getLogger(__name__)

QUESTION_STREAM = 0xE5


@dataclass(frozen=True)
class Recipe:
    """Hyperparameters of one planted-rule run.  Defaults fit a single CPU core."""
    d_model: int = 32
    init_scale: float = 0.1
    N: int = 1
    walks: int = 64
    n: int = 4
    lr: float = 3e-3
    epochs: int = 12
    batch: int = 8
    margin: float = 0.5
    lr_decay: bool = True
    train_relations: tuple[str, ...] = ("r3",)
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 16
    mask_mode: str = "time"
    no_paths: bool = False
    no_history: bool = False
    no_t2v: bool = False
    test_window: int = 20
    num_candidates: int = 50


VARIANTS = {
    "full": {},
    "random_masking": {"mask_mode": "random"},
    "no_paths": {"no_paths": True},
    "no_history": {"no_history": True},
    "no_t2v": {"no_t2v": True},
}


@dataclass
class RunResult:
    seed: int
    recipe: Recipe
    metrics: Metrics
    model: Model
    rows: list[dict] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)


def planted_questions(data: PlantedRule, seed: int, num: int = 50) -> list[Question]:
    rng = np.random.default_rng([seed, QUESTION_STREAM])
    return [make_question(data.context, q, "random", rng, num=num) for q in data.queries]


def _fresh_model(data: PlantedRule, recipe: Recipe, seed: int) -> Model:
    templates = TemplateTable()
    vocab = build_vocab(data.context, templates)
    return new_model(vocab, templates, data.context, d_model=recipe.d_model,
                     init_scale=recipe.init_scale, seed=seed, N=recipe.N, walks=recipe.walks,
                     no_paths=recipe.no_paths, no_history=recipe.no_history,
                     no_t2v=recipe.no_t2v)


def _pretraining_corpus(model: Model, data: PlantedRule, seed: int):
    sink = io.StringIO()
    emit_pretraining_corpus(data.context, model.config.N, model.templates,
                            model.config.sentence_config(), seed, sink, vocab=model.vocab,
                            max_len=model.config.max_len)
    return read_corpus(sink.getvalue().splitlines(), model.vocab)


def _finetune(model: Model, data: PlantedRule, recipe: Recipe, seed: int,
              questions: Sequence[Question],
              callback: Callable[[int, Metrics], None] | None = None) -> RunResult:
    g = data.context
    rels = tuple(g.relation_index[r] for r in recipe.train_relations) or None
    hyper = TrainHyper(margin=recipe.margin, n=recipe.n, N=recipe.N, lr=recipe.lr,
                       epochs=recipe.epochs, batch=recipe.batch, seed=seed, relations=rels,
                       lr_decay=recipe.lr_decay)
    source = BundleSource(g, model)

    def on_epoch(epoch, m):
        if callback is not None:
            callback(epoch, evaluate(m, g, questions, source)[0])

    history = train(g, model, hyper, callback=on_epoch, source=source)
    metrics, rows = evaluate(model, g, questions, source)
    return RunResult(seed, recipe, metrics, model, rows, history)


def run_planted(seed: int, recipe: Recipe = Recipe(), data: PlantedRule | None = None,
                callback: Callable[[int, Metrics], None] | None = None) -> RunResult:
    """Optional MLM pretraining, then fine-tuning, then 50-candidate tail ranking."""
    data = data or planted_rule_tkg(seed, test_window=recipe.test_window)
    model = _fresh_model(data, recipe, seed)
    if recipe.pretrain_epochs > 0:
        corpus = _pretraining_corpus(model, data, seed)
        pretrain(corpus, model.encoder, model.vocab,
                 PretrainHyper(lr=recipe.pretrain_lr, epochs=recipe.pretrain_epochs,
                               batch=recipe.pretrain_batch, seed=seed,
                               mask_mode=recipe.mask_mode))
    questions = planted_questions(data, seed, recipe.num_candidates)
    return _finetune(model, data, recipe, seed, questions, callback)


CURVE_FIELDS = ("variant", "seed", "epoch", "mrr")


def emit_ablation_curve(configs: dict[str, Recipe], seeds: Iterable[int],
                        eval_epochs: Sequence[int] | None = None) -> list[dict]:
    """One row per (variant, seed, pretraining epoch) with the fine-tuned MRR.

    Pretraining runs once per (variant, seed) up to the variant's
    ``pretrain_epochs``; at every epoch in ``eval_epochs`` (default: all,
    including the untrained epoch 0) a copy of the encoder is fine-tuned with a
    fresh scoring head and evaluated.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    rows = []
    for name, recipe in configs.items():
        wanted = sorted(set(range(recipe.pretrain_epochs + 1) if eval_epochs is None
                            else eval_epochs))
        for seed in seeds:
            data = planted_rule_tkg(seed, test_window=recipe.test_window)
            questions = planted_questions(data, seed, recipe.num_candidates)
            base = _fresh_model(data, recipe, seed)
            snapshots = {}

            def keep(epoch, params):
                if epoch + 1 in wanted:
                    snapshots[epoch + 1] = copy.deepcopy(params)

            if 0 in wanted:
                snapshots[0] = copy.deepcopy(base.encoder)
            last = max(wanted)
            if last > 0:
                corpus = _pretraining_corpus(base, data, seed)
                pretrain(corpus, base.encoder, base.vocab,
                         PretrainHyper(lr=recipe.pretrain_lr, epochs=last,
                                       batch=recipe.pretrain_batch, seed=seed,
                                       mask_mode=recipe.mask_mode), callback=keep)
            for epoch in wanted:
                model = replace(base, encoder=snapshots[epoch],
                                scoring=init_scoring(recipe.d_model,
                                                     np.random.default_rng([seed, 0x5C])),
                                config=copy.deepcopy(base.config))
                res = _finetune(model, data, recipe, seed, questions)
                log.info("%s seed %d epoch %d mrr %.4f", name, seed, epoch, res.metrics.mrr)
                rows.append({"variant": name, "seed": seed, "epoch": epoch,
                             "mrr": res.metrics.mrr})
    return rows


def curve_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(CURVE_FIELDS), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "mrr": f"{r['mrr']:.6f}"})
    return buf.getvalue()


def mean_by_variant(rows: Sequence[dict], epoch: int | None = None) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        if epoch is None or r["epoch"] == epoch:
            out.setdefault(r["variant"], []).append(r["mrr"])
    return {k: float(np.mean(v)) for k, v in out.items()}


def recipe_dict(recipe: Recipe) -> dict:
    d = asdict(recipe)
    d["train_relations"] = list(recipe.train_relations)
    return d
