"""Transducer negative log-likelihood over the (T, U) alignment lattice.

The forward variable is computed in log space one anti-diagonal at a time:
every cell with t + u = n depends only on diagonal n - 1, so each diagonal is
a single vectorised step and the autodiff tape provides the gradient.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, ShapeError
from .numeric import Tensor, concat, getitem, logaddexp, masked_fill, stack

# Finite stand-in for log(0); keeps every tape value finite.
LOG_ZERO = -1e30
BRUTE_FORCE_LIMIT = 12


@dataclass
class Lattice:
    log_probs: Tensor  # [T, U+1, V+1]
    target: Sequence[int]
    blank_id: int

    def __post_init__(self):
        if not isinstance(self.log_probs, Tensor):
            self.log_probs = Tensor(self.log_probs)
        T, L, K = self.log_probs.shape
        if T < 1:
            raise ShapeError("lattice needs T >= 1")
        if L != len(self.target) + 1:
            raise ShapeError(f"lattice has {L} label positions for a {len(self.target)}-token target")
        _check_targets(np.asarray(self.target, dtype=np.int64), self.blank_id, K)


def _check_targets(targets: np.ndarray, blank_id: int, n_symbols: int):
    if targets.size and (
        targets.min() < 0 or targets.max() >= n_symbols or (targets == blank_id).any()
    ):
        raise InputError("target id out of range or equal to blank")


def batch_transducer_loss(
    log_probs: Tensor,
    targets: np.ndarray,
    frame_lengths: Sequence[int],
    target_lengths: Sequence[int],
    blank_id: int,
    reduction: str = "mean",
) -> Tensor:
    """Per-utterance -log P(y|x) for a padded batch.

    ``log_probs`` is [B, T, U+1, V+1]; ``targets`` is [B, U] padded with any
    valid id. Padding cells are computed but never reach a read-out cell.
    """
    B, T, L, K = log_probs.shape
    Umax = L - 1
    targets = np.asarray(targets, dtype=np.int64).reshape(B, Umax)
    t_len = np.asarray(frame_lengths, dtype=np.int64)
    u_len = np.asarray(target_lengths, dtype=np.int64)
    if (t_len < 1).any() or (t_len > T).any() or (u_len < 0).any() or (u_len > Umax).any():
        raise ShapeError("frame/target lengths inconsistent with log_probs shape")
    for b in range(B):
        _check_targets(targets[b, : u_len[b]], blank_id, K)

    blank = getitem(log_probs, (Ellipsis, blank_id))  # [B, T, L]
    N = T + Umax
    diag = np.arange(N)[:, None]
    tt = np.broadcast_to(np.arange(T)[None, :], (N, T))
    uu = diag - tt
    blank_ok = (uu >= 0) & (uu <= Umax)
    blank_sk = masked_fill(
        getitem(blank, (slice(None), tt, np.clip(uu, 0, Umax))), ~blank_ok[None], LOG_ZERO
    )  # [B, N, T]; entry (n, t) is cell (t, n - t)
    if Umax > 0:
        label = getitem(
            log_probs,
            (
                np.arange(B)[:, None, None],
                np.arange(T)[None, :, None],
                np.arange(Umax)[None, None, :],
                targets[:, None, :],
            ),
        )  # [B, T, Umax]
        label_ok = (uu >= 0) & (uu < Umax)
        label_sk = masked_fill(
            getitem(label, (slice(None), tt, np.clip(uu, 0, Umax - 1))), ~label_ok[None], LOG_ZERO
        )

    init = np.full((B, T), LOG_ZERO)
    init[:, 0] = 0.0
    alphas = [Tensor(init)]
    edge = Tensor(np.full((B, 1), LOG_ZERO))
    for n in range(1, N):
        prev = alphas[-1]
        # arrive at (t, u) by a blank from (t-1, u)
        via_blank = prev + getitem(blank_sk, (slice(None), n - 1))
        via_blank = concat([edge, getitem(via_blank, (slice(None), slice(0, T - 1)))], axis=1)
        if Umax > 0:
            # or by emitting y_u from (t, u-1)
            via_label = prev + getitem(label_sk, (slice(None), n - 1))
            alphas.append(logaddexp(via_blank, via_label))
        else:
            alphas.append(via_blank)

    alpha = stack(alphas, axis=1)  # [B, N, T]
    bidx = np.arange(B)
    final = getitem(alpha, (bidx, t_len - 1 + u_len, t_len - 1))
    exit_blank = getitem(blank, (bidx, t_len - 1, u_len))
    nll = -(final + exit_blank)
    if reduction == "mean":
        return nll.mean()
    if reduction == "sum":
        return nll.sum()
    return nll


def transducer_log_loss(lat: Lattice) -> Tensor:
    """-log P(target | features) for one lattice, as a scalar tensor."""
    T, L, K = lat.log_probs.shape
    lp = lat.log_probs.reshape(1, T, L, K)
    targets = np.asarray(lat.target, dtype=np.int64).reshape(1, L - 1)
    return batch_transducer_loss(lp, targets, [T], [L - 1], lat.blank_id, reduction="sum")


def brute_force_log_loss(lat: Lattice) -> float:
    """Enumerate every monotone alignment path; test oracle only."""
    lp = lat.log_probs.data
    T = lp.shape[0]
    y = list(lat.target)
    U = len(y)
    if T + U > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force refuses T + U = {T + U} > {BRUTE_FORCE_LIMIT}")
    scores = []
    # the final symbol is always the exit blank at (T-1, U)
    for label_slots in itertools.combinations(range(T + U - 1), U):
        slots = set(label_slots)
        t = u = 0
        s = 0.0
        for step in range(T + U - 1):
            if step in slots:
                s += lp[t, u, y[u]]
                u += 1
            else:
                s += lp[t, u, lat.blank_id]
                t += 1
        s += lp[T - 1, U, lat.blank_id]
        scores.append(s)
    m = max(scores)
    return -(m + math.log(sum(math.exp(v - m) for v in scores)))


def uniform_loss(T: int, U: int, V: int) -> float:
    """Closed form for a lattice whose every distribution is uniform over V+1 symbols."""
    return -(math.log(math.comb(T - 1 + U, U)) + (T + U) * math.log(1.0 / (V + 1)))
