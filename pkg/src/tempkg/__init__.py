"""Temporal relation prediction over temporal knowledge graphs with structured sentences.

Graphs are stored in :mod:`tempkg.kg_store`, verbalized into path-and-history
sentences by :mod:`tempkg.sentences`, encoded by the small transformer in
:mod:`tempkg.encoder`, and scored with time-aware aggregation in
:mod:`tempkg.scoring`.
"""
__version__ = "0.1.0"

from .kg_store import Interval, Point, Quadruple, Tkg, load_tkg, read_tkg
from .sentences import SentenceConfig, TemplateTable, build_bundle, extract_paths
from .corpus import Vocab, build_vocab, time_mask, random_mask
from .encoder import EncoderConfig, init_encoder, pretrain
from .scoring import Model, TrainHyper, aggregate, new_model, train
from .evaluation import Question, evaluate, explain, rank_and_metrics
from .splitter import SplitParams, sample_split, validate_split

__all__ = [
    "Interval", "Point", "Quadruple", "Tkg", "load_tkg", "read_tkg",
    "SentenceConfig", "TemplateTable", "build_bundle", "extract_paths",
    "Vocab", "build_vocab", "time_mask", "random_mask",
    "EncoderConfig", "init_encoder", "pretrain",
    "Model", "TrainHyper", "aggregate", "new_model", "train",
    "Question", "evaluate", "explain", "rank_and_metrics",
    "SplitParams", "sample_split", "validate_split",
]
