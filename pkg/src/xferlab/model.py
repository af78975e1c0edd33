"""Transducer with positional adapters.

Encoder: input projection followed by simplified Conformer blocks
(half-step FFN, multi-head self-attention, half-step FFN, final layer norm;
no convolution module). Prediction network: embedding + single-layer LSTM.
Joint: linear(enc) + linear(pred) -> tanh -> projection to V+1 logits, with
the blank symbol at index V.

Adapters sit after each encoder block's final layer norm, on the prediction
network output, and after the joint tanh.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .numeric import (
    ADAPTER_PREFIX,
    ParamStore,
    Tensor,
    dropout,
    embedding,
    layer_norm,
    load_checkpoint,
    log_softmax,
    masked_fill,
    no_grad,
    save_checkpoint,
    sigmoid,
    softmax,
    stack,
    stream,
    swish,
    tanh,
)

POSITIONS = ("encoder", "decoder", "joint")
ATTN_MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    n_feats: int
    vocab_size: int
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    ff_mult: int = 4
    embed_dim: int = 64
    pred_hidden: int = 64
    joint_hidden: int = 64
    ln_eps: float = 1e-5

    @property
    def blank_id(self) -> int:
        return self.vocab_size


@dataclass
class AdapterSpec:
    position: str
    hidden_dim: int
    dropout_rate: float = 0.0
    stochastic_depth_rate: float = 0.0
    init_scale: float = 1e-2

    def __post_init__(self):
        if self.position not in POSITIONS:
            raise ConfigError(f"adapter position must be one of {POSITIONS}, got {self.position!r}")
        if int(self.hidden_dim) < 1:
            raise ConfigError(f"adapter hidden_dim must be >= 1, got {self.hidden_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"adapter dropout must lie in [0, 1), got {self.dropout_rate}")
        if not 0.0 <= self.stochastic_depth_rate <= 1.0:
            raise ConfigError(
                f"stochastic depth must lie in [0, 1], got {self.stochastic_depth_rate}"
            )
        if self.init_scale < 0:
            raise ConfigError("init_scale must be non-negative")
        self.hidden_dim = int(self.hidden_dim)

    def to_json(self) -> dict:
        return {
            "position": self.position,
            "hidden_dim": self.hidden_dim,
            "dropout": self.dropout_rate,
            "stochastic_depth": self.stochastic_depth_rate,
            "init_scale": self.init_scale,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AdapterSpec":
        return cls(
            position=obj["position"],
            hidden_dim=obj["hidden_dim"],
            dropout_rate=obj.get("dropout", 0.0),
            stochastic_depth_rate=obj.get("stochastic_depth", 0.0),
            init_scale=obj.get("init_scale", 1e-2),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


@dataclass
class RunContext:
    """Train-time randomness for one optimisation step."""

    seed: int
    step: int
    train: bool = True

    def rng(self, site: str) -> np.random.Generator:
        return stream(self.seed, site, self.step)


def adapter_param_count(d_in: int, hidden: int) -> int:
    # LN gamma/beta + down (W, b) + up (W, b)
    return 2 * d_in + d_in * hidden + hidden + hidden * d_in + d_in


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class TransducerModel:
    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.adapters: dict[str, AdapterSpec] = {}
        if store is None:
            store = ParamStore()
            self._init_params(store, seed)
        self.store = store

    # ------------------------------------------------------------ parameters

    def _init_params(self, store: ParamStore, seed: int):
        c = self.cfg
        rng = stream(seed, "model.init")
        d, ff = c.d_model, c.d_model * c.ff_mult

        def lin(prefix, fi, fo):
            store.add(f"{prefix}.w", _glorot(rng, fi, fo))
            store.add(f"{prefix}.b", np.zeros(fo))

        def ln(prefix, n):
            store.add(f"{prefix}.gamma", np.ones(n))
            store.add(f"{prefix}.beta", np.zeros(n))

        lin("encoder.input", c.n_feats, d)
        for i in range(c.n_blocks):
            p = f"encoder.block{i}"
            for half in ("ff1", "ff2"):
                ln(f"{p}.{half}.ln", d)
                lin(f"{p}.{half}.up", d, ff)
                lin(f"{p}.{half}.down", ff, d)
            ln(f"{p}.attn.ln", d)
            lin(f"{p}.attn.qkv", d, 3 * d)
            lin(f"{p}.attn.out", d, d)
            ln(f"{p}.ln_out", d)

        H = c.pred_hidden
        store.add("prediction.embed", rng.normal(0.0, 1.0, size=(c.vocab_size + 1, c.embed_dim)))
        store.add("prediction.w_ih", _glorot(rng, c.embed_dim, 4 * H))
        store.add("prediction.w_hh", _glorot(rng, H, 4 * H))
        bias = np.zeros(4 * H)
        bias[H : 2 * H] = 1.0  # forget gate
        store.add("prediction.b", bias)

        J = c.joint_hidden
        lin("joint.enc", d, J)
        store.add("joint.pred.w", _glorot(rng, H, J))
        lin("joint.out", J, c.vocab_size + 1)

    def p(self, name: str) -> Tensor:
        return self.store[name]

    def adapter_sites(self, position: str) -> list[tuple[str, int]]:
        """(parameter prefix, input width) for every instance at ``position``."""
        c = self.cfg
        if position == "encoder":
            return [(f"{ADAPTER_PREFIX}encoder.block{i}", c.d_model) for i in range(c.n_blocks)]
        if position == "decoder":
            return [(f"{ADAPTER_PREFIX}decoder", c.pred_hidden)]
        if position == "joint":
            return [(f"{ADAPTER_PREFIX}joint", c.joint_hidden)]
        raise ConfigError(f"unknown adapter position {position!r}")

    def base_param_count(self) -> int:
        return self.store.count(predicate=lambda n: not n.startswith(ADAPTER_PREFIX))

    def adapter_param_count(self) -> int:
        return self.store.count(predicate=lambda n: n.startswith(ADAPTER_PREFIX))

    def copy(self) -> "TransducerModel":
        other = TransducerModel(self.cfg, self.store.copy())
        other.adapters = dict(self.adapters)
        return other

    # ------------------------------------------------------------ persistence

    def meta(self) -> dict:
        return {
            "model": asdict(self.cfg),
            "adapters": {k: v.to_json() for k, v in self.adapters.items()},
        }

    def save(self, path, extra_meta: dict | None = None):
        meta = self.meta()
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(self.store, path, meta)

    @classmethod
    def load(cls, path) -> "TransducerModel":
        store, meta = load_checkpoint(path)
        model = cls(ModelConfig(**meta["model"]), store)
        model.adapters = {k: AdapterSpec.from_json(v) for k, v in meta.get("adapters", {}).items()}
        return model

    # ---------------------------------------------------------------- layers

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return x @ self.p(f"{prefix}.w") + self.p(f"{prefix}.b")

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self.p(f"{prefix}.gamma"), self.p(f"{prefix}.beta"), self.cfg.ln_eps)

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        h = swish(self._linear(self._ln(x, f"{prefix}.ln"), f"{prefix}.up"))
        return x + self._linear(h, f"{prefix}.down") * 0.5

    def _attention(self, x: Tensor, prefix: str, key_pad: np.ndarray | None) -> Tensor:
        B, T, d = x.shape
        nh = self.cfg.n_heads
        dh = d // nh
        qkv = self._linear(self._ln(x, f"{prefix}.ln"), f"{prefix}.qkv")
        qkv = qkv.reshape(B, T, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        if key_pad is not None and key_pad.any():
            scores = masked_fill(scores, key_pad[:, None, None, :], ATTN_MASK_VALUE)
        ctx = softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, T, d)
        return x + self._linear(ctx, f"{prefix}.out")

    def adapter_forward(
        self, x: Tensor, prefix: str, spec: AdapterSpec, ctx: RunContext | None
    ) -> Tensor:
        """Residual bottleneck: x + dropout(up(swish(down(LN(x))))).

        In train mode the whole module is skipped with probability
        ``spec.stochastic_depth_rate``. Eval mode is deterministic.
        """
        train = ctx is not None and ctx.train
        if train and ctx.rng(f"{prefix}.sdepth").random() < spec.stochastic_depth_rate:
            return x
        h = layer_norm(x, self.p(f"{prefix}.ln_gamma"), self.p(f"{prefix}.ln_beta"), self.cfg.ln_eps)
        h = swish(h @ self.p(f"{prefix}.w_down") + self.p(f"{prefix}.b_down"))
        y = h @ self.p(f"{prefix}.w_up") + self.p(f"{prefix}.b_up")
        if train:
            y = dropout(y, spec.dropout_rate, ctx.rng(f"{prefix}.dropout"), True)
        return x + y

    # ------------------------------------------------------------- networks

    def _block(self, x: Tensor, i: int, key_pad) -> Tensor:
        p = f"encoder.block{i}"
        x = self._ffn(x, f"{p}.ff1")
        x = self._attention(x, f"{p}.attn", key_pad)
        x = self._ffn(x, f"{p}.ff2")
        return self._ln(x, f"{p}.ln_out")

    def encode(
        self,
        feats: Tensor,
        lengths: Sequence[int] | None = None,
        ctx=None,
        resume: tuple[int, Tensor] | None = None,
    ) -> Tensor:
        """[B, T, F] features -> [B, T, d_model] encodings.

        ``resume=(k, h)`` starts from ``h``, the output of block k-1 before its
        adapter, as produced by :meth:`frozen_prefix`.
        """
        B, T = feats.shape[:2] if resume is None else resume[1].shape[:2]
        key_pad = None
        if lengths is not None:
            key_pad = np.arange(T)[None, :] >= np.asarray(lengths)[:, None]
        spec = self.adapters.get("encoder")
        if resume is None:
            done, x = 0, self._linear(feats, "encoder.input")
        else:
            done, x = resume
        for i in range(self.cfg.n_blocks):
            if i >= done:
                x = self._block(x, i, key_pad)
            if spec is not None and i >= done - 1:
                x = self.adapter_forward(x, f"{ADAPTER_PREFIX}encoder.block{i}", spec, ctx)
        return x

    def frozen_depth(self) -> int:
        """Number of leading encoder blocks whose output is fixed during adapter training."""
        if any(t.requires_grad for n, t in self.store.items() if not n.startswith(ADAPTER_PREFIX)):
            return 0
        return 1 if "encoder" in self.adapters else self.cfg.n_blocks

    def frozen_prefix(self, feature_list: Sequence[np.ndarray], depth: int,
                      batch_size: int = 64) -> list[np.ndarray]:
        """Per-utterance output of the first ``depth`` blocks (adapters excluded)."""
        out = []
        with no_grad():
            for s in range(0, len(feature_list), batch_size):
                chunk = feature_list[s : s + batch_size]
                feats, lengths = pad_batch(chunk)
                key_pad = np.arange(feats.shape[1])[None, :] >= lengths[:, None]
                x = self._linear(Tensor(feats), "encoder.input")
                for i in range(depth):
                    x = self._block(x, i, key_pad)
                out.extend(x.data[j, : lengths[j]].copy() for j in range(len(chunk)))
        return out

    def _lstm_step(self, xw: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        H = self.cfg.pred_hidden
        z = xw + h @ self.p("prediction.w_hh")
        gates = sigmoid(z)
        i, f, o = gates[:, :H], gates[:, H : 2 * H], gates[:, 3 * H :]
        g = tanh(z[:, 2 * H : 3 * H])
        c = f * c + i * g
        return o * tanh(c), c

    def _pred_output(self, h: Tensor, ctx) -> Tensor:
        spec = self.adapters.get("decoder")
        if spec is not None:
            h = self.adapter_forward(h, f"{ADAPTER_PREFIX}decoder", spec, ctx)
        return h

    def predict(self, tokens_in: np.ndarray, ctx=None) -> Tensor:
        """[B, U+1] ids (start symbol first) -> [B, U+1, pred_hidden]."""
        B, L = tokens_in.shape
        H = self.cfg.pred_hidden
        emb = embedding(self.p("prediction.embed"), tokens_in)
        xw = emb @ self.p("prediction.w_ih") + self.p("prediction.b")
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        outs = []
        for u in range(L):
            h, c = self._lstm_step(xw[:, u], h, c)
            outs.append(h)
        return self._pred_output(stack(outs, axis=1), ctx)

    def joint_hidden(self, enc_proj: Tensor, pred_proj: Tensor, ctx=None) -> Tensor:
        h = tanh(enc_proj + pred_proj)
        spec = self.adapters.get("joint")
        if spec is not None:
            h = self.adapter_forward(h, f"{ADAPTER_PREFIX}joint", spec, ctx)
        return h

    def log_probs(
        self,
        feats: Tensor | None,
        tokens_in: np.ndarray,
        lengths: Sequence[int] | None = None,
        ctx: RunContext | None = None,
        resume: tuple[int, Tensor] | None = None,
    ) -> Tensor:
        """Joint log-probabilities [B, T, U+1, V+1]."""
        self._check_tokens(tokens_in)
        enc = self.encode(feats, lengths, ctx, resume)
        pred = self.predict(tokens_in, ctx)
        enc_proj = self._linear(enc, "joint.enc")  # [B, T, J]
        pred_proj = pred @ self.p("joint.pred.w")  # [B, U+1, J]
        B, T, J = enc_proj.shape
        L = pred_proj.shape[1]
        h = self.joint_hidden(enc_proj.reshape(B, T, 1, J), pred_proj.reshape(B, 1, L, J), ctx)
        return log_softmax(self._linear(h, "joint.out"), axis=-1)

    def _check_tokens(self, tokens_in: np.ndarray):
        if tokens_in.size and (tokens_in.min() < 0 or tokens_in.max() > self.cfg.blank_id):
            raise InputError("token id outside [0, V]")


def inject_adapters(model: TransducerModel, spec: AdapterSpec, seed: int = 0) -> TransducerModel:
    """Install adapters at ``spec.position``; the forward function is unchanged until trained."""
    if spec.position in model.adapters:
        raise ConfigError(f"adapters already present at position {spec.position!r}")
    rng = stream(seed, f"adapter.init.{spec.position}")
    h = spec.hidden_dim
    for prefix, d in model.adapter_sites(spec.position):
        s = model.store
        s.add(f"{prefix}.ln_gamma", np.ones(d))
        s.add(f"{prefix}.ln_beta", np.zeros(d))
        s.add(f"{prefix}.w_down", rng.uniform(-spec.init_scale, spec.init_scale, size=(d, h)))
        s.add(f"{prefix}.b_down", np.zeros(h))
        s.add(f"{prefix}.w_up", np.zeros((h, d)))
        s.add(f"{prefix}.b_up", np.zeros(d))
    model.adapters[spec.position] = spec
    return model


def added_param_count(model: TransducerModel, spec: AdapterSpec) -> int:
    return sum(adapter_param_count(d, spec.hidden_dim) for _, d in model.adapter_sites(spec.position))


def check_param_budget(model: TransducerModel, spec: AdapterSpec, budget_fraction: float) -> dict:
    if not 0.0 < budget_fraction < 1.0:
        raise ConfigError(f"budget_fraction must lie in (0, 1), got {budget_fraction}")
    fraction = added_param_count(model, spec) / model.base_param_count()
    return {"compliant": fraction <= budget_fraction, "fraction": fraction}


def forward(
    model: TransducerModel, features, targets: Sequence[int], mode: str = "eval", ctx=None
) -> Tensor:
    """Single-utterance joint log-probs [T, U+1, V+1]."""
    feats = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=float)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ShapeError("features must be a non-empty [T, F] matrix")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= model.cfg.vocab_size):
        raise InputError("target id outside [0, V)")
    tokens_in = np.concatenate([[model.cfg.blank_id], targets])[None, :]
    if mode == "train" and ctx is None:
        ctx = RunContext(seed=0, step=0)
    if mode == "eval":
        ctx = None
    return model.log_probs(Tensor(feats[None]), tokens_in, None, ctx)[0]


def pad_batch(feature_list: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feature_list], dtype=np.int64)
    F = feature_list[0].shape[1]
    out = np.zeros((len(feature_list), int(lengths.max()), F))
    for i, f in enumerate(feature_list):
        out[i, : f.shape[0]] = f
    return out, lengths


def greedy_decode_batch(
    model: TransducerModel, feature_list: Sequence[np.ndarray], max_symbols_per_frame: int = 10
) -> list[list[int]]:
    """Frame-synchronous greedy decoding, vectorised over utterances."""
    if max_symbols_per_frame < 1:
        raise ConfigError("max_symbols_per_frame must be >= 1")
    if not feature_list:
        return []
    blank = model.cfg.blank_id
    feats, lengths = pad_batch(feature_list)
    B, T = feats.shape[:2]
    hyps: list[list[int]] = [[] for _ in range(B)]
    with no_grad():
        enc = model.encode(Tensor(feats), lengths)
        enc_proj = model._linear(enc, "joint.enc").data
        w_pred = model.p("joint.pred.w")

        def advance(tokens, h, c):
            xw = embedding(model.p("prediction.embed"), tokens) @ model.p("prediction.w_ih")
            h, c = model._lstm_step(xw + model.p("prediction.b"), h, c)
            return h, c, (model._pred_output(h, None) @ w_pred).data

        H = model.cfg.pred_hidden
        h, c, pred_proj = advance(
            np.full(B, blank), Tensor(np.zeros((B, H))), Tensor(np.zeros((B, H)))
        )
        for t in range(T):
            active = t < lengths
            for _ in range(max_symbols_per_frame):
                hid = model.joint_hidden(Tensor(enc_proj[:, t]), Tensor(pred_proj))
                logits = model._linear(hid, "joint.out").data
                k = logits.argmax(axis=-1)
                emit = active & (k != blank)
                if not emit.any():
                    break
                for b in np.flatnonzero(emit):
                    hyps[b].append(int(k[b]))
                h2, c2, p2 = advance(np.where(emit, k, blank), h, c)
                m = emit[:, None]
                h = Tensor(np.where(m, h2.data, h.data))
                c = Tensor(np.where(m, c2.data, c.data))
                pred_proj = np.where(m, p2, pred_proj)
                active = emit
    return hyps


def greedy_decode(model: TransducerModel, features, max_symbols_per_frame: int = 10) -> list[int]:
    feats = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=float)
    return greedy_decode_batch(model, [feats], max_symbols_per_frame)[0]
