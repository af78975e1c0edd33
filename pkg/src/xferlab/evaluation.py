"""Greedy-decode an utterance set and score it."""
from __future__ import annotations

from typing import Sequence

from .datagen import Utterance
from .errors import DataError
from .metrics import EvalReport, edit_distance, keyword_accuracy
from .model import TransducerModel, greedy_decode_batch


def decode_all(model: TransducerModel, utts: Sequence[Utterance], batch_size: int = 100,
               max_symbols_per_frame: int = 10) -> list[list[int]]:
    hyps = []
    for i in range(0, len(utts), batch_size):
        chunk = utts[i : i + batch_size]
        hyps.extend(greedy_decode_batch(model, [u.features for u in chunk], max_symbols_per_frame))
    return hyps


def evaluate(model: TransducerModel, utts: Sequence[Utterance], dataset_id: str,
             keyword: bool = False) -> EvalReport:
    if not utts:
        raise DataError(f"{dataset_id}: empty evaluation set")
    n_feats = utts[0].features.shape[1]
    if n_feats != model.cfg.n_feats:
        raise DataError(f"{dataset_id}: {n_feats} features per frame, model expects {model.cfg.n_feats}")
    if max(max(u.tokens, default=0) for u in utts) >= model.cfg.vocab_size:
        raise DataError(f"{dataset_id}: token ids exceed the model vocabulary")
    hyps = decode_all(model, utts)
    errors = words = 0
    for u, h in zip(utts, hyps):
        errors += edit_distance(u.tokens, h).errors
        words += len(u.tokens)
    acc = None
    if keyword:
        acc = keyword_accuracy([u.tokens[0] for u in utts], hyps)
    return EvalReport.from_counts(dataset_id, errors, words, acc)
