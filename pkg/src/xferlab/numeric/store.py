"""Named parameter registry and its on-disk checkpoint format.

Checkpoint layout::

    u64 little-endian header length
    UTF-8 JSON header {"format": 1, "tensors": [{name, shape, trainable, offset}], "meta": {...}}
    raw little-endian float64 payloads, offsets relative to the end of the header
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import DataError
from .tensor import Tensor

FORMAT_VERSION = 1
ADAPTER_PREFIX = "adapter."


class ParamStore:
    """Ordered name -> tensor map with a frozen/trainable partition."""

    def __init__(self):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def trainable_items(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._entries.items() if t.requires_grad)

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].requires_grad

    def set_trainable(self, name: str, flag: bool):
        t = self._entries[name]
        t.requires_grad = flag
        if not flag:
            t.grad = None

    def count(self, trainable_only: bool = False, predicate=None) -> int:
        total = 0
        for name, t in self._entries.items():
            if trainable_only and not t.requires_grad:
                continue
            if predicate is not None and not predicate(name):
                continue
            total += t.data.size
        return total

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._entries.items()}

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, t in self._entries.items():
            other.add(n, t.data.copy(), trainable=t.requires_grad)
        return other


def freeze_base(store: ParamStore) -> ParamStore:
    """Only parameters named ``adapter.*`` stay trainable."""
    for name, _ in store.items():
        store.set_trainable(name, name.startswith(ADAPTER_PREFIX))
    return store


def save_checkpoint(store: ParamStore, path, meta: dict | None = None):
    records, chunks, offset = [], [], 0
    for name, t in store.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        records.append(
            {"name": name, "shape": list(t.shape), "trainable": t.requires_grad, "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": FORMAT_VERSION, "tensors": records, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 8:
        raise DataError(f"checkpoint {path} is truncated")
    (hlen,) = struct.unpack_from("<Q", blob, 0)
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint {path} has a corrupt header") from exc
    if header.get("format") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {header.get('format')!r}")
    base = 8 + hlen
    store = ParamStore()
    for rec in header["tensors"]:
        n = int(np.prod(rec["shape"], dtype=np.int64))
        start = base + rec["offset"]
        if start + 8 * n > len(blob):
            raise DataError(f"checkpoint {path}: payload for {rec['name']} is truncated")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=start).reshape(rec["shape"])
        store.add(rec["name"], arr.astype(np.float64), trainable=rec["trainable"])
    return store, header.get("meta", {})
