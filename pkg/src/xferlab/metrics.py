"""Word error rate and the degradation-bounded candidate score.

All WER values are percentages, as printed in result tables.

    wer_degradation = max(0, WER_after_orig - WER_before_orig)
    o_scale         = mean_i max(0, (kappa - deg_i) / kappa)
    a_werr          = max(0, (WER_before_new - WER_after_new) / WER_before_new)
    score           = o_scale * a_werr
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .errors import ConfigError, DataError

DEFAULT_KAPPA = 3.0


@dataclass
class EvalReport:
    dataset_id: str
    wer: float
    n_words: int
    n_errors: int
    accuracy: float | None = None  # keyword domains only

    @classmethod
    def from_counts(cls, dataset_id: str, n_errors: int, n_words: int, accuracy=None):
        if n_words <= 0:
            raise DataError(f"{dataset_id}: WER undefined without reference words")
        return cls(dataset_id, 100.0 * n_errors / n_words, n_words, n_errors, accuracy)


@dataclass
class SelectionConfig:
    original_datasets: list[str]
    new_datasets: list[str]
    kappa: float = DEFAULT_KAPPA

    def __post_init__(self):
        if not self.original_datasets:
            raise ConfigError("at least one original-domain evaluation set is required")
        if not self.new_datasets:
            raise ConfigError("at least one new-domain evaluation set is required")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")


@dataclass
class CandidateScore:
    wer_deg: dict[str, float]
    o_scale: float
    a_werr: float
    score: float
    kappa_violated: bool
    candidate: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Alignment:
    subs: int
    ins: int
    dels: int

    @property
    def errors(self) -> int:
        return self.subs + self.ins + self.dels


def edit_distance(ref: Sequence, hyp: Sequence) -> Alignment:
    """Unit-cost Levenshtein alignment.

    Among minimum-cost alignments the backtrace prefers substitution (or
    match), then insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(
                d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                d[i][j - 1] + 1,
                d[i - 1][j] + 1,
            )
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return Alignment(subs, ins, dels)


def _words(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def wer(ref_corpus: Sequence, hyp_corpus: Sequence) -> float:
    if len(ref_corpus) != len(hyp_corpus):
        raise ValueError("reference and hypothesis corpora differ in length")
    errors = words = 0
    for r, h in zip(ref_corpus, hyp_corpus):
        r, h = _words(r), _words(h)
        errors += edit_distance(r, h).errors
        words += len(r)
    if words == 0:
        raise ValueError("WER is undefined for an empty reference corpus")
    return 100.0 * errors / words


def keyword_accuracy(refs: Sequence, hyps: Sequence) -> float:
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis lists differ in length")
    if not refs:
        raise ValueError("accuracy is undefined for an empty set")
    hits = sum(_words(h) == [r] for r, h in zip(refs, hyps))
    return 100.0 * hits / len(refs)


def wer_degradation(wer_o: float, wer_o_star: float) -> float:
    if wer_o < 0 or wer_o_star < 0:
        raise ValueError("WER values must be non-negative")
    return max(0.0, wer_o_star - wer_o)


def o_scale(degs: Sequence[float], kappa: float = DEFAULT_KAPPA) -> float:
    if len(degs) == 0:
        raise ValueError("o_scale needs at least one original-domain degradation")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return sum(max(0.0, (kappa - d) / kappa) for d in degs) / len(degs)


def a_werr(wer_a: float, wer_a_star: float) -> float:
    if wer_a <= 0:
        raise ValueError("relative improvement is undefined when the pre-adaptation WER is 0")
    return max(0.0, (wer_a - wer_a_star) / wer_a)


def score(
    before: Mapping[str, EvalReport | float],
    after: Mapping[str, EvalReport | float],
    cfg: SelectionConfig,
    candidate: dict | None = None,
) -> CandidateScore:
    """Combine per-dataset reports taken before and after adaptation.

    The new-domain term uses the unweighted mean WER over ``cfg.new_datasets``.
    """

    def get(reports, key):
        try:
            r = reports[key]
        except KeyError:
            raise DataError(f"missing evaluation report for dataset {key!r}") from None
        return r.wer if isinstance(r, EvalReport) else float(r)

    degs = {k: wer_degradation(get(before, k), get(after, k)) for k in cfg.original_datasets}
    scale = o_scale(list(degs.values()), cfg.kappa)
    new_before = sum(get(before, k) for k in cfg.new_datasets) / len(cfg.new_datasets)
    new_after = sum(get(after, k) for k in cfg.new_datasets) / len(cfg.new_datasets)
    werr = a_werr(new_before, new_after)
    return CandidateScore(
        wer_deg=degs,
        o_scale=scale,
        a_werr=werr,
        score=scale * werr,
        kappa_violated=any(d >= cfg.kappa for d in degs.values()),
        candidate=dict(candidate or {}),
    )


CSV_COLUMNS = (
    "candidate_id",
    "position",
    "hidden_dim",
    "dropout",
    "stochastic_depth",
    "steps",
    "lr",
    "o_scale",
    "a_werr",
    "score",
    "kappa_violated",
)


def score_csv_row(cs: CandidateScore) -> dict:
    row = {k: cs.candidate.get(k, "") for k in CSV_COLUMNS[:7]}
    row.update(
        o_scale=f"{cs.o_scale:.6f}",
        a_werr=f"{cs.a_werr:.6f}",
        score=f"{cs.score:.6f}",
        kappa_violated=str(cs.kappa_violated).lower(),
    )
    return row


def scores_to_csv(scores: Sequence[CandidateScore]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for cs in scores:
        w.writerow(score_csv_row(cs))
    return buf.getvalue()


def score_to_json(cs: CandidateScore) -> str:
    return json.dumps(cs.to_json(), sort_keys=True)
