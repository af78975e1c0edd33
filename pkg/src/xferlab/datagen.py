"""Synthetic pseudo-acoustic domains and their on-disk format.

Every token owns a fixed pair of feature templates (an onset frame and a
steady-state frame). An utterance concatenates, per token, the onset followed
by repeated steady frames, then adds Gaussian noise. Domain shifts:

* ``acoustic``: every frame is multiplied by a fixed rotation
  ``expm(strength * K)`` (K skew-symmetric, largest angle 1 rad at strength 1)
  and shifted by a constant channel offset. Labels are untouched.
* ``vocabulary``: the last ``new_token_count`` tokens get fresh templates
  drawn from a disjoint stream.
* ``keyword``: one token per utterance with short durations; the acoustic
  transform is applied as well when its parameters are non-zero.

Dataset directory: ``manifest.jsonl`` (one JSON object per utterance) plus one
``.xff`` feature file per utterance (magic ``XFF1``, u32 T, u32 F, float32
row-major payload) and an optional ``domain.json`` with the domain spec.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, DataError
from .numeric import stream

MAGIC = b"XFF1"
SHIFT_KINDS = ("none", "acoustic", "vocabulary", "keyword")


@dataclass
class Shift:
    kind: str = "none"
    rotation_strength: float = 0.0
    channel_offset: float = 0.0
    new_token_count: int = 0
    keywords: list[int] | None = None

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"shift kind must be one of {SHIFT_KINDS}, got {self.kind!r}")


@dataclass
class DomainSpec:
    name: str = "original"
    vocab_size: int = 16
    tokens_per_utterance: tuple[int, int] = (3, 8)
    frames_per_token: tuple[int, int] = (3, 6)
    feature_dim: int = 16
    template_seed: int = 0
    noise_sigma: float = 0.1
    shift: Shift = field(default_factory=Shift)

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = Shift(**self.shift)
        self.tokens_per_utterance = tuple(self.tokens_per_utterance)
        self.frames_per_token = tuple(self.frames_per_token)
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.feature_dim < 4:
            raise ConfigError("feature_dim must be >= 4")
        if self.frames_per_token[0] < 2 or self.frames_per_token[1] < self.frames_per_token[0]:
            raise ConfigError("frames_per_token must be a range with minimum >= 2")
        lo, hi = self.tokens_per_utterance
        if lo < 1 or hi < lo:
            raise ConfigError("tokens_per_utterance must be a range with minimum >= 1")
        if self.shift.kind == "keyword":
            self.tokens_per_utterance = (1, 1)
        if self.shift.new_token_count > self.vocab_size:
            raise ConfigError("new_token_count exceeds vocab_size")

    @property
    def is_keyword(self) -> bool:
        return self.shift.kind == "keyword"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DomainSpec":
        return cls(**obj)


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, F]
    tokens: list[int]

    def __eq__(self, other):
        return (
            isinstance(other, Utterance)
            and self.id == other.id
            and self.tokens == other.tokens
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


def token_templates(spec: DomainSpec) -> tuple[np.ndarray, np.ndarray]:
    """(onset, steady) templates, each [V, F]."""
    V, F = spec.vocab_size, spec.feature_dim
    rng = stream(spec.template_seed, "templates")
    onset = rng.normal(size=(V, F))
    steady = rng.normal(size=(V, F))
    k = spec.shift.new_token_count if spec.shift.kind == "vocabulary" else 0
    if k:
        alt = stream(spec.template_seed, "templates.vocabulary-shift")
        onset[V - k :] = alt.normal(size=(k, F))
        steady[V - k :] = alt.normal(size=(k, F))
    return onset, steady


def acoustic_transform(spec: DomainSpec) -> tuple[np.ndarray, np.ndarray]:
    """(mixing matrix [F, F], offset [F]) applied as ``frame @ M + offset``."""
    F = spec.feature_dim
    rng = stream(spec.template_seed, "shift.acoustic")
    g = rng.normal(size=(F, F))
    skew = g - g.T
    skew /= np.abs(np.linalg.eigvals(skew)).max()
    direction = rng.normal(size=F)
    direction /= np.sqrt(np.mean(direction**2))
    s = spec.shift
    if s.kind not in ("acoustic", "keyword"):
        return np.eye(F), np.zeros(F)
    return expm(s.rotation_strength * skew), s.channel_offset * direction


def _sample(spec: DomainSpec, n: int, split: str) -> list[Utterance]:
    onset, steady = token_templates(spec)
    mix, offset = acoustic_transform(spec)
    shifted = spec.shift.kind in ("acoustic", "keyword") and (
        spec.shift.rotation_strength != 0.0 or spec.shift.channel_offset != 0.0
    )
    rng = stream(spec.template_seed, f"utterances.{spec.name}.{split}")
    vocab = np.arange(spec.vocab_size)
    if spec.is_keyword and spec.shift.keywords:
        vocab = np.asarray(spec.shift.keywords)
    out = []
    for i in range(n):
        n_tok = int(rng.integers(spec.tokens_per_utterance[0], spec.tokens_per_utterance[1] + 1))
        tokens = [int(t) for t in rng.choice(vocab, size=n_tok)]
        frames = []
        for tok in tokens:
            dur = int(rng.integers(spec.frames_per_token[0], spec.frames_per_token[1] + 1))
            frames.append(onset[tok][None])
            frames.append(np.repeat(steady[tok][None], dur - 1, axis=0))
        x = np.concatenate(frames, axis=0)
        x = x + spec.noise_sigma * rng.normal(size=x.shape)
        if shifted:
            x = x @ mix + offset
        # stored as float32 on disk; keep in-memory values exactly representable
        x = x.astype(np.float32).astype(np.float64)
        out.append(Utterance(f"{spec.name}-{split}-{i:05d}", x, tokens))
    return out


def generate_domain(spec: DomainSpec, n_train: int, n_eval: int) -> dict[str, list[Utterance]]:
    if n_train < 1 or n_eval < 1:
        raise ConfigError("n_train and n_eval must be >= 1")
    return {"train": _sample(spec, n_train, "train"), "eval": _sample(spec, n_eval, "eval")}


# ------------------------------------------------------------------------ I/O


def write_features(path: Path, x: np.ndarray):
    T, F = x.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", T, F))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path: Path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic or truncated header")
    T, F = struct.unpack_from("<II", blob, 4)
    if len(blob) != 12 + 4 * T * F:
        raise DataError(f"{path}: corrupt feature file, expected {T}x{F} floats")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(T, F).astype(np.float64)


def write_dataset(utts: list[Utterance], directory, spec: DomainSpec | None = None):
    d = Path(directory)
    (d / "feats").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utts:
        rel = f"feats/{u.id}.xff"
        write_features(d / rel, u.features)
        T, F = u.features.shape
        rec = {"id": u.id, "features": rel, "n_frames": T, "n_feats": F, "tokens": list(u.tokens)}
        lines.append(json.dumps(rec, sort_keys=True))
    (d / "manifest.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    if spec is not None:
        (d / "domain.json").write_text(json.dumps(spec.to_json(), sort_keys=True, indent=1))


def read_dataset(directory) -> list[Utterance]:
    d = Path(directory)
    manifest = d / "manifest.jsonl"
    if not manifest.is_file():
        raise DataError(f"no manifest.jsonl in {d}")
    out = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                uid, rel = rec["id"], rec["features"]
                T, F = int(rec["n_frames"]), int(rec["n_feats"])
                tokens = [int(t) for t in rec["tokens"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{manifest}:{lineno}: malformed manifest line ({exc})") from exc
            x = read_features(d / rel)
            if x.shape != (T, F):
                raise DataError(f"{d / rel}: corrupt, header {x.shape} vs manifest {(T, F)}")
            out.append(Utterance(uid, x, tokens))
    return out


def read_domain_spec(directory) -> DomainSpec | None:
    p = Path(directory) / "domain.json"
    if not p.is_file():
        return None
    return DomainSpec.from_json(json.loads(p.read_text()))
