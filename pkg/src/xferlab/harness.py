"""Experiment driver: base training, single-candidate adaptation, grid search, evaluation."""
from __future__ import annotations

import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import Candidate, ExperimentConfig
from .datagen import Utterance, generate_domain, read_dataset, read_domain_spec, write_dataset
from .errors import ConfigError, DataError, XferlabError
from .evaluation import evaluate
from .metrics import CandidateScore, EvalReport, score, scores_to_csv
from .model import ModelConfig, TransducerModel, added_param_count, check_param_budget, inject_adapters
from .numeric import freeze_base
from .training import TrainConfig, adapt, write_step_log

log = logging.getLogger(__name__)


# --------------------------------------------------------------- file access log


class FileAccessLog:
    """Records every file the interpreter opens while active, tagged with the current phase.

    Built on ``sys.addaudithook``. Hooks cannot be removed, so a single hook is
    installed on first use and dispatches to whichever logs are active.
    """

    _active: list["FileAccessLog"] = []
    _installed = False

    def __init__(self):
        self.events: list[tuple[str | None, str]] = []
        self.phase: str | None = None

    @classmethod
    def _hook(cls, event, args):
        if event != "open" or not cls._active:
            return
        path = args[0]
        if isinstance(path, int):
            return
        try:
            path = os.path.abspath(os.fsdecode(path))
        except TypeError:
            return
        for lg in cls._active:
            lg.events.append((lg.phase, path))

    def __enter__(self):
        if not FileAccessLog._installed:
            sys.addaudithook(FileAccessLog._hook)
            FileAccessLog._installed = True
        FileAccessLog._active.append(self)
        return self

    def __exit__(self, *exc):
        FileAccessLog._active.remove(self)
        return False

    def opened_under(self, directory, phase: str | None = None) -> list[str]:
        root = os.path.abspath(directory) + os.sep
        return [p for ph, p in self.events if p.startswith(root) and (phase is None or ph == phase)]


@contextmanager
def phase(name: str):
    prev = [lg.phase for lg in FileAccessLog._active]
    for lg in FileAccessLog._active:
        lg.phase = name
    try:
        yield
    finally:
        for lg, p in zip(FileAccessLog._active, prev):
            lg.phase = p


# ------------------------------------------------------------------- data helpers


def generate_data(cfg: ExperimentConfig) -> dict[str, int]:
    """Write every domain that carries a ``generate`` block. Returns utterance counts per directory."""
    written = {}
    for dom in (cfg.original, cfg.new):
        if not dom.generate:
            continue
        spec = dom.spec
        data = generate_domain(spec, int(dom.generate.get("n_train", 500)), int(dom.generate.get("n_eval", 200)))
        if len(dom.eval) != 1:
            raise ConfigError("generated domains have exactly one evaluation set")
        (eval_dir,) = dom.eval.values()
        write_dataset(data["train"], dom.train, spec)
        write_dataset(data["eval"], eval_dir, spec)
        written[str(dom.train)] = len(data["train"])
        written[str(eval_dir)] = len(data["eval"])
    return written


def _require_dir(path: Path, what: str):
    if not Path(path).is_dir():
        raise DataError(f"{what} directory {path} does not exist")


def load_split(path: Path, what: str) -> list[Utterance]:
    _require_dir(path, what)
    utts = read_dataset(path)
    if not utts:
        raise DataError(f"{what} directory {path} holds no utterances")
    return utts


@dataclass
class EvalSet:
    dataset_id: str
    utts: list[Utterance]
    keyword: bool
    vocab_size: int | None


def load_eval_set(dataset_id: str, path: Path) -> EvalSet:
    utts = load_split(path, f"evaluation set {dataset_id!r}")
    spec = read_domain_spec(path)
    return EvalSet(dataset_id, utts, bool(spec and spec.is_keyword), spec.vocab_size if spec else None)


def evaluate_sets(model: TransducerModel, sets: list[EvalSet]) -> dict[str, EvalReport]:
    out = {}
    for s in sets:
        if s.vocab_size is not None and s.vocab_size != model.cfg.vocab_size:
            raise DataError(
                f"{s.dataset_id}: dataset vocabulary {s.vocab_size} != checkpoint vocabulary {model.cfg.vocab_size}"
            )
        out[s.dataset_id] = evaluate(model, s.utts, s.dataset_id, keyword=s.keyword)
    return out


def write_reports(reports: dict[str, EvalReport], path) -> None:
    """JSON at ``path`` plus a CSV with the same stem."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [asdict(r) for r in reports.values()]
    path.write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["dataset_id", "wer", "n_words", "n_errors", "accuracy"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "accuracy": "" if r["accuracy"] is None else r["accuracy"]})


def read_reports(path) -> dict[str, EvalReport]:
    try:
        rows = json.loads(Path(path).read_text(encoding="utf-8"))
        return {r["dataset_id"]: EvalReport(**r) for r in rows}
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read reports {path}: {exc}") from exc


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    dims = dict(cfg.model)
    spec = read_domain_spec(cfg.original.train) if cfg.original.train.is_dir() else None
    if "n_feats" not in dims or "vocab_size" not in dims:
        if spec is None:
            raise ConfigError("model.n_feats / model.vocab_size missing and no domain.json to infer them from")
        dims.setdefault("n_feats", spec.feature_dim)
        dims.setdefault("vocab_size", spec.vocab_size)
    try:
        return ModelConfig(**dims)
    except TypeError as exc:
        raise ConfigError(f"bad model section: {exc}") from exc


# ----------------------------------------------------------------------- commands


def cmd_train_base(config_path, out) -> dict[str, EvalReport]:
    """Train on the original domain; write base.ckpt, reports.json/.csv and train_log.csv."""
    cfg = ExperimentConfig.load(config_path)
    out = Path(out)
    train = load_split(cfg.original.train, "original-domain training")
    sets = [load_eval_set(k, p) for k, p in cfg.eval_sets().items()]
    mcfg = model_config(cfg)
    if train[0].features.shape[1] != mcfg.n_feats:
        raise DataError(f"training features have {train[0].features.shape[1]} dims, model expects {mcfg.n_feats}")
    model = TransducerModel(mcfg, seed=cfg.seed)
    try:
        tcfg = TrainConfig(**{"seed": cfg.seed, **cfg.base, "mode": "finetune"})
    except TypeError as exc:
        raise ConfigError(f"bad base section: {exc}") from exc
    model, steplog = adapt(model, train, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "base.ckpt", {"train": json.loads(tcfg.to_json())})
    write_step_log(steplog, out / "train_log.csv")
    reports = evaluate_sets(model, sets)
    write_reports(reports, out / "reports.json")
    return reports


def trainable_params(model: TransducerModel, cand: Candidate) -> int:
    if cand.is_finetune:
        return model.base_param_count()
    return added_param_count(model, cand.adapter_spec())


def _adapt_config(cfg: ExperimentConfig, cand: Candidate, seed: int) -> TrainConfig:
    try:
        return TrainConfig(
            **{**cfg.adapt, "total_steps": cand.steps, "lr_peak": cand.lr, "seed": seed,
               "mode": "finetune" if cand.is_finetune else "adapter"}
        )
    except TypeError as exc:
        raise ConfigError(f"bad adapt section: {exc}") from exc


def run_candidate(
    cfg: ExperimentConfig,
    base: TransducerModel,
    cand: Candidate,
    seed: int,
    out: Path | None = None,
    sets: list[EvalSet] | None = None,
) -> tuple[TransducerModel, dict[str, EvalReport]]:
    """Adapt a copy of ``base`` to the new domain, then evaluate on every configured set.

    The adaptation phase reads new-domain training data only. Evaluation data is
    loaded afterwards, in its own phase.
    """
    model = base.copy()
    if not cand.is_finetune:
        inject_adapters(model, cand.adapter_spec(cfg.init_scale), seed=seed)
        freeze_base(model.store)
    tcfg = _adapt_config(cfg, cand, seed)
    with phase("adapt"):
        train = load_split(cfg.new.train, "new-domain training")
        model, steplog = adapt(model, train, tcfg)
    with phase("evaluate"):
        if sets is None:
            sets = [load_eval_set(k, p) for k, p in cfg.eval_sets().items()]
        reports = evaluate_sets(model, sets)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "adapted.ckpt", {"candidate": cand.to_json(), "seed": seed})
        write_step_log(steplog, out / "step_log.csv")
        write_reports(reports, out / "reports.json")
    return model, reports


def _load_base(path) -> TransducerModel:
    if path is None or not Path(path).is_file():
        raise DataError(f"base checkpoint {path} not found")
    base = TransducerModel.load(path)
    if base.adapters:
        raise DataError(f"{path} already carries adapters; expected a base checkpoint")
    return base


def cmd_adapt(config_path, base_ckpt, cand: Candidate, seed: int, out) -> dict:
    """Adapt one candidate and score it against the base model's reports."""
    cfg = ExperimentConfig.load(config_path)
    out = Path(out)
    with phase("load"):
        base = _load_base(base_ckpt)
    budget = None
    if not cand.is_finetune:
        budget = check_param_budget(base, cand.adapter_spec(), cfg.budget_fraction)
        if not budget["compliant"]:
            log.warning("%s exceeds the parameter budget (%.4f%%)", cand.candidate_id, 100 * budget["fraction"])
    _, reports = run_candidate(cfg, base, cand, seed, out)
    with phase("evaluate"):
        sets = [load_eval_set(k, p) for k, p in cfg.eval_sets().items()]
        baseline = evaluate_sets(base, sets)
    cs = score(baseline, reports, cfg.selection, cand.to_json())
    result = {"score": cs.to_json(), "budget": budget, "seed": seed,
              "trainable_params": trainable_params(base, cand)}
    write_reports(baseline, out / "baseline_reports.json")
    (out / "score.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


def cmd_evaluate(ckpt, data_dirs, out) -> dict[str, EvalReport]:
    if not Path(ckpt).is_file():
        raise DataError(f"checkpoint {ckpt} not found")
    model = TransducerModel.load(ckpt)
    sets = []
    for d in data_dirs:
        d = Path(d).resolve()
        sets.append(load_eval_set(f"{d.parent.name}/{d.name}", d))
    reports = evaluate_sets(model, sets)
    write_reports(reports, out)
    return reports


# --------------------------------------------------------------------------- grid


def trial_seed(base_seed: int, trial: int) -> int:
    return base_seed * 1000 + trial


@dataclass
class CellResult:
    candidate: Candidate
    trainable_params: int
    budget_compliant: bool | None
    trial_reports: list[dict[str, EvalReport]] = field(default_factory=list)
    mean_wer: dict[str, float] = field(default_factory=dict)
    score: CandidateScore | None = None
    error: str | None = None


def _run_cell(args) -> tuple[int, dict | None, str | None]:
    """Worker: every trial of one cell. Returns per-trial report dicts or an error message."""
    config_path, base_ckpt, cand_json, index, trials, out = args
    cand = Candidate.from_json(cand_json)
    try:
        cfg = ExperimentConfig.load(config_path)
        base = TransducerModel.load(base_ckpt)
        sets = [load_eval_set(k, p) for k, p in cfg.eval_sets().items()]
        runs = []
        for k in range(trials):
            wd = Path(out) / "cells" / cand.candidate_id / f"trial{k}"
            _, reports = run_candidate(cfg, base, cand, trial_seed(cfg.seed, k), wd, sets)
            runs.append({key: asdict(r) for key, r in reports.items()})
        return index, runs, None
    except (XferlabError, ValueError, FloatingPointError) as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def rank_key(c: CellResult, metric: str):
    value = getattr(c.score, metric)
    return (-value, c.trainable_params, c.candidate.steps)


def select(cells: list[CellResult]) -> dict:
    """Constrained winner: highest score among cells within kappa. Unconstrained: highest a_werr."""
    ok = [c for c in cells if c.error is None]
    ranking = sorted(ok, key=lambda c: rank_key(c, "score"))
    within = [c for c in ranking if not c.score.kappa_violated]
    constrained = within[0] if within else None
    unconstrained = min(ok, key=lambda c: rank_key(c, "a_werr")) if ok else None
    return {
        "constrained_winner": constrained.candidate.candidate_id if constrained else None,
        "unconstrained_winner": unconstrained.candidate.candidate_id if unconstrained else None,
        "ranking": ranking,
    }


def cmd_grid(config_path, out, jobs: int = 1, base_ckpt=None) -> dict:
    """Run every grid cell for every trial, score the per-cell mean WERs, write CSV + JSON."""
    cfg = ExperimentConfig.load(config_path)
    if cfg.grid is None:
        raise ConfigError("config has no grid section")
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out = Path(out)
    base_ckpt = Path(base_ckpt) if base_ckpt else cfg.base_ckpt
    base = _load_base(base_ckpt)
    sets = [load_eval_set(k, p) for k, p in cfg.eval_sets().items()]
    baseline = evaluate_sets(base, sets)
    cands = cfg.grid.cells()
    cells = []
    for cand in cands:
        compliant = None
        if not cand.is_finetune:
            compliant = check_param_budget(base, cand.adapter_spec(), cfg.budget_fraction)["compliant"]
        cells.append(CellResult(cand, trainable_params(base, cand), compliant))
    work = [
        (str(cfg.path), str(base_ckpt), c.to_json(), i, cfg.grid.trials, str(out))
        for i, c in enumerate(cands)
    ]
    if jobs == 1:
        results = [_run_cell(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, work))
    # single-threaded merge, in grid order
    for index, runs, err in sorted(results, key=lambda r: r[0]):
        cell = cells[index]
        if err is not None:
            cell.error = err
            log.warning("cell %s failed: %s", cell.candidate.candidate_id, err)
            continue
        cell.trial_reports = [{k: EvalReport(**r) for k, r in run.items()} for run in runs]
        keys = list(cell.trial_reports[0])
        cell.mean_wer = {k: sum(t[k].wer for t in cell.trial_reports) / len(runs) for k in keys}
        cell.score = score(baseline, cell.mean_wer, cfg.selection, cell.candidate.to_json())
    outcome = select(cells)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ranking.csv").write_text(scores_to_csv([c.score for c in outcome["ranking"]]), encoding="utf-8")
    write_reports(baseline, out / "baseline_reports.json")
    doc = {
        "constrained_winner": outcome["constrained_winner"],
        "unconstrained_winner": outcome["unconstrained_winner"],
        "kappa": cfg.kappa,
        "trials": cfg.grid.trials,
        "baseline": {k: r.wer for k, r in baseline.items()},
        "ranking": [
            {
                **c.score.to_json(),
                "trainable_params": c.trainable_params,
                "budget_compliant": c.budget_compliant,
                "mean_wer": c.mean_wer,
            }
            for c in outcome["ranking"]
        ],
        "failures": [
            {"candidate": c.candidate.to_json(), "error": c.error} for c in cells if c.error is not None
        ],
    }
    (out / "selection.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return doc
