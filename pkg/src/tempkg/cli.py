"""Command-line pipeline: validate, split, corpus, pretrain, train, eval, explain, ablate.

Stages hand off through files under ``--out``.  Every run writes
``manifest.json`` with the resolved configuration, the seed and SHA-256 hashes
of its input files.  Exit codes: 0 success, 1 usage error, 2 data error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .corpus import TokenizeError, Vocab, build_vocab, emit_pretraining_corpus, read_corpus
from .encoder import EncoderConfig, PretrainHyper, TrainingDiverged, init_encoder, pretrain
from .evaluation import Question, evaluate, explain, filter_question, make_question, metrics_json, ranks_csv
from .experiments import VARIANTS, Recipe, curve_csv, emit_ablation_curve, mean_by_variant, recipe_dict
from .kg_store import TkgParseError, TkgValidationError, load_tkg, load_tkg_with_queries
from .scoring import BundleSource, Model, TrainHyper, new_model, train
from .sentences import SentenceConfig, TemplateError, TemplateTable
from .splitter import PRESETS, SplitError, SplitParams, sample_split, write_split

log = logging.getLogger("tempkg")

COMMANDS = ("validate", "split", "corpus", "pretrain", "train", "eval", "explain", "ablate")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # paths
    data: str = ""
    queries: str = ""
    format: str = "point"
    templates: str = ""
    corpus: str = ""
    checkpoint: str = ""
    out: str = "out"
    vocab_extra: str = ""          # comma-separated extra datasets whose words join the vocabulary
    seed: int = 0
    threads: int = 1
    # sentences and corpus
    N: int = 4
    walks: int = 128
    max_hops: int = 3
    reuse_paths: bool = True
    max_len: int = 128
    inverse_targets: bool = False
    # encoder and pretraining
    d_model: int = 64
    n_layers: int = 1
    init_scale: float = 0.02
    mask_mode: str = "time"
    pretrain_lr: float = 1e-3
    pretrain_epochs: int = 10
    pretrain_batch: int = 16
    accumulation: int = 1
    weight_decay: float = 0.0
    # scoring and training
    margin: float = 0.5
    n: int = 4
    lr: float = 1e-3
    epochs: int = 5
    batch: int = 8
    lr_decay: bool = False
    loss_convention: str = "plausibility"
    adversarial_temperature: float = 0.0
    freeze_encoder: bool = False
    train_relations: str = ""      # comma-separated relation labels; empty means all
    no_paths: bool = False
    no_history: bool = False
    no_t2v: bool = False
    # evaluation
    candidates: str = "validation50"
    num_candidates: int = 50
    filtered: bool = False
    query: str = ""                # explain: one TSV fact whose object is the answer to explain
    # splitting
    preset: str = ""
    num_roots: int = 40
    walks_per_root: int = 10
    walk_length: int = 3
    # ablation
    mode: str = "masking"
    seeds: str = "1,2,3,4,5"

    def validate(self) -> None:
        choices = {"format": ("point", "interval"), "mask_mode": ("time", "random"),
                   "loss_convention": ("plausibility", "paper-literal"),
                   "candidates": ("validation50", "all"), "mode": ("masking", "switches")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise UsageError(f"{key} must be one of {', '.join(allowed)}")
        for key in ("threads", "N", "walks", "max_hops", "max_len", "d_model", "n_layers",
                    "pretrain_batch", "accumulation", "n", "batch", "num_candidates",
                    "num_roots", "walks_per_root", "walk_length"):
            if getattr(self, key) < 1:
                raise UsageError(f"{key} must be positive")
        for key in ("pretrain_epochs", "epochs"):
            if getattr(self, key) < 0:
                raise UsageError(f"{key} must be non-negative")
        if self.preset and self.preset not in (*PRESETS, "all"):
            raise UsageError(f"unknown preset {self.preset!r}")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw):
    if key not in _FIELDS:
        raise UsageError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tempkg", description="Temporal relation prediction pipeline.")
    p.add_argument("command", choices=COMMANDS)
    s = argparse.SUPPRESS
    p.add_argument("--data", default=s)
    p.add_argument("--queries", default=s)
    p.add_argument("--format", default=s, choices=("point", "interval"))
    p.add_argument("--templates", default=s)
    p.add_argument("--corpus", default=s)
    p.add_argument("--checkpoint", default=s)
    p.add_argument("--seed", type=int, default=s)
    p.add_argument("--out", default=s)
    p.add_argument("--config", default=None)
    p.add_argument("--threads", type=int, default=s)
    p.add_argument("--freeze-encoder", dest="freeze_encoder", action="store_true", default=s)
    p.add_argument("--mask-mode", dest="mask_mode", choices=("time", "random"), default=s)
    p.add_argument("--no-paths", dest="no_paths", action="store_true", default=s)
    p.add_argument("--no-history", dest="no_history", action="store_true", default=s)
    p.add_argument("--no-t2v", dest="no_t2v", action="store_true", default=s)
    p.add_argument("--loss-convention", dest="loss_convention",
                   choices=("plausibility", "paper-literal"), default=s)
    p.add_argument("--candidates", choices=("validation50", "all"), default=s)
    p.add_argument("--filtered", action="store_true", default=s)
    p.add_argument("--preset", default=s)
    p.add_argument("--mode", choices=("masking", "switches"), default=s)
    p.add_argument("--epochs", type=int, default=s)
    p.add_argument("--seeds", default=s)
    p.add_argument("--query", default=s)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    return p


def resolve_config(argv, environ=None) -> tuple[str, RunConfig]:
    """Defaults, then ``TEMPKG_SEED``, then the config file, then flags."""
    environ = os.environ if environ is None else environ
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    config_path = ns.pop("config")
    overrides = ns.pop("overrides")
    if command == "ablate" and "epochs" in ns:  # the ablation curve is over pretraining epochs
        ns["pretrain_epochs"] = ns.pop("epochs")
    values: dict = {}
    if environ.get("TEMPKG_SEED"):
        values["seed"] = _coerce("seed", environ["TEMPKG_SEED"])
    if config_path:
        try:
            values.update(parse_config_text(Path(config_path).read_text(encoding="utf-8")))
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from None
    for key, value in ns.items():
        values[key] = _coerce(key, value)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value)
    cfg = RunConfig(**values)
    cfg.validate()
    return command, cfg


# -- helpers ----------------------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _read(path: str, what: str) -> str:
    if not path:
        raise UsageError(f"--{what} is required for this command")
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {what} file: {e}") from None


class DataError(Exception):
    pass


def _templates(cfg: RunConfig) -> TemplateTable:
    return TemplateTable.from_tsv(_read(cfg.templates, "templates")) if cfg.templates else TemplateTable()


def _inputs(cfg: RunConfig) -> list[str]:
    paths = [cfg.data, cfg.queries, cfg.templates, cfg.corpus, cfg.checkpoint]
    paths += [p for p in cfg.vocab_extra.split(",") if p.strip()]
    return [p.strip() for p in paths if p and Path(p.strip()).is_file()]


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "inputs": {p: _sha256(p) for p in _inputs(cfg)},
    }
    if extra:
        manifest.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _load_graph(cfg: RunConfig):
    text = _read(cfg.data, "data")
    if cfg.queries:
        return load_tkg_with_queries(text, _read(cfg.queries, "queries"), cfg.format)
    return load_tkg(text, cfg.format), None


def _sentence_config(cfg: RunConfig) -> SentenceConfig:
    return SentenceConfig(max_hops=cfg.max_hops, walks=cfg.walks, reuse_paths=cfg.reuse_paths,
                          no_paths=cfg.no_paths, no_history=cfg.no_history)


def _load_model(cfg: RunConfig) -> Model:
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required for this command")
    try:
        return Model.load(cfg.checkpoint)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load checkpoint: {e}") from None


def _apply_switches(model: Model, cfg: RunConfig) -> None:
    c = model.config
    c.no_paths, c.no_history, c.no_t2v = cfg.no_paths, cfg.no_history, cfg.no_t2v
    c.N, c.walks, c.max_hops, c.reuse_paths = cfg.N, cfg.walks, cfg.max_hops, cfg.reuse_paths
    c.seed = cfg.seed


# -- commands ----------------------------------------------------------------------------------

def cmd_validate(cfg: RunConfig, out: Path) -> dict:
    g, _ = _load_graph(cfg)
    stats = g.stats()
    print(json.dumps(stats, indent=2, sort_keys=True))
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    return {"stats": stats}


def cmd_split(cfg: RunConfig, out: Path) -> dict:
    g, _ = _load_graph(cfg)
    if cfg.preset == "all":
        plans = {name: replace(p, rng_seed=cfg.seed) for name, p in PRESETS.items()}
    elif cfg.preset:
        plans = {cfg.preset: replace(PRESETS[cfg.preset], rng_seed=cfg.seed)}
    else:
        plans = {"split": SplitParams(cfg.num_roots, cfg.walks_per_root, cfg.walk_length, cfg.seed)}
    reports = {}
    for name, params in plans.items():
        pair = sample_split(g, params)
        target = out / name if len(plans) > 1 or cfg.preset else out
        write_split(pair, target)
        reports[name] = dataclasses.asdict(pair.report)
        print(f"{name}: train {pair.report.train_entities} entities / {pair.report.train_links} "
              f"links, test {pair.report.test_entities} entities / {pair.report.test_links} links")
    return {"splits": reports}


def _vocab_graphs(cfg: RunConfig, g):
    graphs = [g]
    for p in cfg.vocab_extra.split(","):
        if p.strip():
            graphs.append(load_tkg(_read(p.strip(), "vocab_extra"), cfg.format))
    return graphs


def cmd_corpus(cfg: RunConfig, out: Path) -> dict:
    g, _ = _load_graph(cfg)
    templates = _templates(cfg)
    vocab = build_vocab(_vocab_graphs(cfg, g), templates)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as sink:
        count = emit_pretraining_corpus(g, cfg.N, templates, _sentence_config(cfg), cfg.seed, sink,
                                        vocab=vocab, max_len=cfg.max_len,
                                        inverse_targets=cfg.inverse_targets)
    (out / "vocab.json").write_text(json.dumps(vocab.to_json()) + "\n", encoding="utf-8")
    (out / "templates.tsv").write_text(templates.to_tsv(), encoding="utf-8")
    print(f"{count} sentences, vocabulary {len(vocab)}")
    return {"sentences": count, "vocab_size": len(vocab)}


def _corpus_dir(cfg: RunConfig) -> Path:
    if not cfg.corpus:
        raise UsageError("--corpus (a corpus directory or corpus.jsonl) is required")
    p = Path(cfg.corpus)
    return p if p.is_dir() else p.parent


def cmd_pretrain(cfg: RunConfig, out: Path) -> dict:
    cdir = _corpus_dir(cfg)
    vocab = Vocab.from_json(json.loads(_read(str(cdir / "vocab.json"), "corpus")))
    tpl_path = cdir / "templates.tsv"
    templates = TemplateTable.from_tsv(tpl_path.read_text(encoding="utf-8")) if tpl_path.exists() \
        else _templates(cfg)
    corpus = read_corpus(_read(str(cdir / "corpus.jsonl"), "corpus").splitlines(), vocab)
    ecfg = EncoderConfig(vocab_size=len(vocab), d_model=cfg.d_model, n_layers=cfg.n_layers,
                         max_positions=cfg.max_len, init_scale=cfg.init_scale, rng_seed=cfg.seed)
    params = init_encoder(ecfg)
    hyper = PretrainHyper(lr=cfg.pretrain_lr, epochs=cfg.pretrain_epochs, batch=cfg.pretrain_batch,
                          accumulation=cfg.accumulation, seed=cfg.seed, mask_mode=cfg.mask_mode,
                          weight_decay=cfg.weight_decay)
    history = pretrain(corpus, params, vocab, hyper)
    out.mkdir(parents=True, exist_ok=True)
    header = {"encoder": dataclasses.asdict(ecfg), "vocab": vocab.to_json(),
              "templates": templates.templates, "pretrain": hyper.to_dict(),
              "model": {"max_len": cfg.max_len}}
    checkpoint.save(out / "encoder.ckpt", header,
                    {f"encoder.{k}": v for k, v in params.tensors.items()})
    (out / "pretrain-loss.json").write_text(json.dumps(history) + "\n", encoding="utf-8")
    return {"loss_history": history}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    g, _ = _load_graph(cfg)
    if cfg.checkpoint:
        base = _load_model(cfg)
        model = new_model(base.vocab, base.templates, g, encoder=base.encoder, seed=cfg.seed,
                          N=cfg.N, walks=cfg.walks, max_hops=cfg.max_hops,
                          reuse_paths=cfg.reuse_paths, no_paths=cfg.no_paths,
                          no_history=cfg.no_history, no_t2v=cfg.no_t2v, max_len=cfg.max_len)
    else:
        templates = _templates(cfg)
        vocab = build_vocab(_vocab_graphs(cfg, g), templates)
        model = new_model(vocab, templates, g, d_model=cfg.d_model, n_layers=cfg.n_layers,
                          init_scale=cfg.init_scale, seed=cfg.seed, N=cfg.N, walks=cfg.walks,
                          max_hops=cfg.max_hops, reuse_paths=cfg.reuse_paths,
                          no_paths=cfg.no_paths, no_history=cfg.no_history, no_t2v=cfg.no_t2v,
                          max_len=cfg.max_len)
    rels = None
    if cfg.train_relations:
        try:
            rels = tuple(g.relation_index[r.strip()] for r in cfg.train_relations.split(","))
        except KeyError as e:
            raise DataError(f"unknown relation in train_relations: {e}") from None
    hyper = TrainHyper(margin=cfg.margin, n=cfg.n, N=cfg.N, lr=cfg.lr, epochs=cfg.epochs,
                       batch=cfg.batch, loss_convention=cfg.loss_convention,
                       adversarial_temperature=cfg.adversarial_temperature, seed=cfg.seed,
                       freeze_encoder=cfg.freeze_encoder, relations=rels, lr_decay=cfg.lr_decay)
    history = train(g, model, hyper)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.ckpt", extra={"train": dataclasses.asdict(hyper)})
    (out / "train-loss.json").write_text(json.dumps(history) + "\n", encoding="utf-8")
    return {"loss_history": history}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    model = _load_model(cfg)
    _apply_switches(model, cfg)
    g, queries = _load_graph(cfg)
    if queries is None:
        queries = list(g.edges)
    rng = np.random.default_rng([cfg.seed, 0xE5])
    mode = "all" if cfg.candidates == "all" else "validation50"
    questions = [make_question(g, q, mode, rng, num=cfg.num_candidates) for q in queries]
    label = "raw"
    if cfg.filtered:
        questions = [filter_question(q, [g]) for q in questions]
        label = "filtered"
    metrics, rows = evaluate(model, g, questions, BundleSource(g, model))
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(metrics_json(metrics, label), encoding="utf-8")
    (out / "ranks.csv").write_text(ranks_csv(rows), encoding="utf-8")
    print(metrics_json(metrics, label), end="")
    return {"metrics": metrics.to_json()}


def cmd_explain(cfg: RunConfig, out: Path) -> dict:
    if not cfg.query:
        raise UsageError("--query is required: one fact line whose object is the answer")
    model = _load_model(cfg)
    _apply_switches(model, cfg)
    g, quads = load_tkg_with_queries(_read(cfg.data, "data"), cfg.query.replace("|", "\t"),
                                     cfg.format)
    q = quads[0]
    question = Question(q.subject, q.relation, q.time, q.object, [q.object])
    ex = explain(model, g, question, q.object)
    result = {"text": ex.text, "weight": ex.weight, "p": ex.p, "summand": ex.summand}
    out.mkdir(parents=True, exist_ok=True)
    (out / "explanation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    print(ex.text)
    return {"explanation": result}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    try:
        seeds = [int(s) for s in cfg.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {cfg.seeds!r}") from None
    if not seeds:
        raise UsageError("at least one seed is required")
    base = Recipe(pretrain_epochs=cfg.pretrain_epochs, pretrain_lr=cfg.pretrain_lr,
                  pretrain_batch=cfg.pretrain_batch)
    if cfg.mode == "masking":
        configs = {"time": base, "random": replace(base, mask_mode="random")}
        eval_epochs = None
    else:
        configs = {name: replace(base, **v) for name, v in VARIANTS.items()}
        eval_epochs = [cfg.pretrain_epochs]
    rows = emit_ablation_curve(configs, seeds, eval_epochs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(curve_csv(rows), encoding="utf-8")
    means = mean_by_variant(rows, cfg.pretrain_epochs)
    for name, value in means.items():
        print(f"{name}\t{value:.4f}")
    return {"recipe": recipe_dict(base), "mean_mrr": means}


HANDLERS = {"validate": cmd_validate, "split": cmd_split, "corpus": cmd_corpus,
            "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "explain": cmd_explain, "ablate": cmd_ablate}


def run(argv=None, environ=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command, cfg = resolve_config(argv, environ)
    except UsageError as e:
        print(f"tempkg: usage error: {e}", file=sys.stderr)
        return 1
    out = Path(cfg.out)
    try:
        extra = HANDLERS[command](cfg, out)
        write_manifest(out, command, cfg, {"result": extra})
    except UsageError as e:
        print(f"tempkg: usage error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"tempkg: training diverged: {e}", file=sys.stderr)
        return 3
    except (DataError, TkgParseError, TkgValidationError, TemplateError, TokenizeError,
            SplitError, json.JSONDecodeError) as e:
        print(f"tempkg: data error: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    logging.basicConfig(level=os.environ.get("TEMPKG_LOG", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())
