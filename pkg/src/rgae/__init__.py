"""Recurrent gated autoencoder (RGAE) toolkit.

Modules: :mod:`mathcore` (numerics, optimizer, gradient checking),
:mod:`gae` (gated autoencoder), :mod:`recurrent` (GRU, RGAE and baseline),
:mod:`ensemble`, :mod:`data`, :mod:`evaluate`, :mod:`serialize`,
:mod:`config` and :mod:`cli`.
"""
from .data import FrameSequence, SchemeDatasetSpec, TranspositionScheme, generate_scheme_dataset, read_corpus, write_corpus
from .ensemble import WeightedCombineConfig, combine
from .evaluate import EvalReport, count_parameters, evaluate_ce, evaluate_continuation
from .gae import GaeParams, GaePretrainConfig, infer_mapping, pretrain, reconstruct, shift
from .recurrent import BaselineRnn, GruParams, RgaeModel, TrainConfig, continue_sequence, train
from .serialize import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "BaselineRnn", "EvalReport", "FrameSequence", "GaeParams", "GaePretrainConfig", "GruParams",
    "RgaeModel", "SchemeDatasetSpec", "TrainConfig", "TranspositionScheme", "WeightedCombineConfig",
    "combine", "continue_sequence", "count_parameters", "evaluate_ce", "evaluate_continuation",
    "generate_scheme_dataset", "infer_mapping", "load_model", "pretrain", "read_corpus", "reconstruct",
    "save_model", "shift", "train", "write_corpus",
]
