"""Experiment configuration: one JSON document, paths relative to its directory.

Example::

    {
      "seed": 0,
      "model": {"d_model": 64, "n_blocks": 4},
      "domains": {
        "original": {"train": "data/original/train",
                     "eval": {"original": "data/original/eval"},
                     "generate": {"spec": {...}, "n_train": 500, "n_eval": 200}},
        "new": {...}
      },
      "base": {"total_steps": 400, "lr_peak": 0.002, "batch_size": 16},
      "adapt": {"batch_size": 16},
      "selection": {"kappa": 3.0, "budget_fraction": 0.005},
      "grid": {"finetune": {...}, "adapters": {...}, "trials": 5},
      "base_ckpt": "runs/base/base.ckpt"
    }
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import DomainSpec
from .errors import ConfigError
from .metrics import DEFAULT_KAPPA, SelectionConfig
from .model import POSITIONS, AdapterSpec

FINETUNE = "finetune"


@dataclass
class DomainConfig:
    train: Path
    eval: dict[str, Path]
    generate: dict | None = None

    @property
    def spec(self) -> DomainSpec | None:
        if not self.generate:
            return None
        return DomainSpec.from_json(self.generate["spec"])

    def dirs(self) -> list[Path]:
        return [self.train, *self.eval.values()]


@dataclass(frozen=True)
class Candidate:
    """One grid cell: fine-tuning or an adapter configuration, plus its schedule."""

    position: str
    steps: int
    lr: float
    hidden_dim: int = 0
    dropout: float = 0.0
    stochastic_depth: float = 0.0

    @property
    def is_finetune(self) -> bool:
        return self.position == FINETUNE

    @property
    def candidate_id(self) -> str:
        if self.is_finetune:
            return f"finetune-lr{self.lr:g}-s{self.steps}"
        return (
            f"{self.position}-h{self.hidden_dim}-do{self.dropout:g}"
            f"-sd{self.stochastic_depth:g}-lr{self.lr:g}-s{self.steps}"
        )

    def adapter_spec(self, init_scale: float = 1e-2) -> AdapterSpec:
        return AdapterSpec(self.position, self.hidden_dim, self.dropout, self.stochastic_depth, init_scale)

    def to_json(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "position": self.position,
            "hidden_dim": self.hidden_dim if not self.is_finetune else "",
            "dropout": self.dropout,
            "stochastic_depth": self.stochastic_depth,
            "steps": self.steps,
            "lr": self.lr,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Candidate":
        return cls(
            position=obj["position"],
            steps=int(obj["steps"]),
            lr=float(obj["lr"]),
            hidden_dim=int(obj.get("hidden_dim") or 0),
            dropout=float(obj.get("dropout", 0.0)),
            stochastic_depth=float(obj.get("stochastic_depth", 0.0)),
        )


@dataclass
class GridSpec:
    finetune_lrs: list[float] = field(default_factory=list)
    finetune_steps: list[int] = field(default_factory=list)
    positions: list[str] = field(default_factory=list)
    hidden_dims: dict[str, list[int]] = field(default_factory=dict)
    dropout_rates: list[float] = field(default_factory=lambda: [0.0])
    stochastic_depth_rates: list[float] = field(default_factory=lambda: [0.0])
    step_counts: list[int] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    trials: int = 5

    @classmethod
    def from_json(cls, obj: dict) -> "GridSpec":
        ft = obj.get("finetune", {})
        ad = obj.get("adapters", {})
        positions = list(ad.get("positions", []))
        for p in positions:
            if p not in POSITIONS:
                raise ConfigError(f"unknown adapter position {p!r} in grid")
        dims = ad.get("hidden_dims", {})
        if isinstance(dims, list):
            dims = {p: list(dims) for p in positions}
        grid = cls(
            finetune_lrs=[float(v) for v in ft.get("learning_rates", [])],
            finetune_steps=[int(v) for v in ft.get("step_counts", [])],
            positions=positions,
            hidden_dims={p: [int(h) for h in dims.get(p, [])] for p in positions},
            dropout_rates=[float(v) for v in ad.get("dropout_rates", [0.0])],
            stochastic_depth_rates=[float(v) for v in ad.get("stochastic_depth_rates", [0.0])],
            step_counts=[int(v) for v in ad.get("step_counts", [])],
            learning_rates=[float(v) for v in ad.get("learning_rates", [])],
            trials=int(obj.get("trials", 5)),
        )
        if grid.trials < 1:
            raise ConfigError("grid trials must be >= 1")
        if not grid.cells():
            raise ConfigError("grid is empty")
        return grid

    def cells(self) -> list[Candidate]:
        out = [
            Candidate(FINETUNE, steps=s, lr=lr)
            for lr, s in itertools.product(self.finetune_lrs, self.finetune_steps)
        ]
        for pos in self.positions:
            for h, do, sd, s, lr in itertools.product(
                self.hidden_dims.get(pos, []),
                self.dropout_rates,
                self.stochastic_depth_rates,
                self.step_counts,
                self.learning_rates,
            ):
                out.append(Candidate(pos, steps=s, lr=lr, hidden_dim=h, dropout=do, stochastic_depth=sd))
        return out


@dataclass
class ExperimentConfig:
    path: Path
    seed: int
    model: dict
    original: DomainConfig
    new: DomainConfig
    base: dict
    adapt: dict
    kappa: float
    budget_fraction: float
    grid: GridSpec | None
    base_ckpt: Path | None
    init_scale: float = 1e-2

    @property
    def selection(self) -> SelectionConfig:
        return SelectionConfig(list(self.original.eval), list(self.new.eval), self.kappa)

    def eval_sets(self) -> dict[str, Path]:
        return {**self.original.eval, **self.new.eval}

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(obj, path)

    @classmethod
    def from_dict(cls, obj: dict, path) -> "ExperimentConfig":
        path = Path(path)
        root = path.parent

        def resolve(p):
            return (root / p).resolve() if p is not None else None

        def domain(key) -> DomainConfig:
            try:
                d = obj["domains"][key]
                return DomainConfig(
                    train=resolve(d["train"]),
                    eval={k: resolve(v) for k, v in d["eval"].items()},
                    generate=d.get("generate"),
                )
            except (KeyError, TypeError, AttributeError) as exc:
                raise ConfigError(f"config: domains.{key} is missing or malformed ({exc})") from exc

        original, new = domain("original"), domain("new")
        overlap = set(original.eval) & set(new.eval)
        if overlap:
            raise ConfigError(f"evaluation set ids used by both domains: {sorted(overlap)}")
        if not original.eval or not new.eval:
            raise ConfigError("each domain needs at least one evaluation set")
        sel = obj.get("selection", {})
        kappa = float(sel.get("kappa", DEFAULT_KAPPA))
        budget = float(sel.get("budget_fraction", 0.005))
        if kappa <= 0:
            raise ConfigError("selection.kappa must be positive")
        if not 0.0 < budget < 1.0:
            raise ConfigError("selection.budget_fraction must lie in (0, 1)")
        return cls(
            path=path,
            seed=int(obj.get("seed", 0)),
            model=dict(obj.get("model", {})),
            original=original,
            new=new,
            base=dict(obj.get("base", {"total_steps": 400, "lr_peak": 2e-3})),
            adapt=dict(obj.get("adapt", {})),
            kappa=kappa,
            budget_fraction=budget,
            grid=GridSpec.from_json(obj["grid"]) if "grid" in obj else None,
            base_ckpt=resolve(obj.get("base_ckpt")),
            init_scale=float(obj.get("init_scale", 1e-2)),
        )
