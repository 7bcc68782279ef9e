"""Exact log-space CTC: likelihood, gradient, greedy decoding, brute-force oracle.

The blank symbol is always the LAST vocabulary index of a lattice. Log-zero
is the sentinel ``LOG_ZERO`` (-1e30); it only meets finite values inside
log-sum-exp, where it is absorbed.
"""
from __future__ import annotations

import itertools

import numpy as np

from . import adcore
from .adcore import Tensor, log_softmax_np

__all__ = [
    "LOG_ZERO",
    "InfeasibleTargetError",
    "SearchSpaceError",
    "alignment_posterior",
    "check_lattice",
    "collapse_path",
    "ctc_brute_force",
    "ctc_brute_force_table",
    "ctc_grad",
    "ctc_greedy_decode",
    "ctc_log_likelihood",
    "ctc_loss_node",
    "is_log_zero",
    "logadd",
    "min_frames",
]

LOG_ZERO = -1.0e30
_LOG_ZERO_EDGE = -1.0e29


class InfeasibleTargetError(ValueError):
    """Target cannot be produced by any alignment of the given length."""


class SearchSpaceError(ValueError):
    """Brute-force enumeration would exceed its size bound."""


def is_log_zero(x: float) -> bool:
    return x <= _LOG_ZERO_EDGE


def logadd(a: float, b: float) -> float:
    """Two-way log-sum-exp honoring the log-zero sentinel."""
    if a <= _LOG_ZERO_EDGE:
        return b
    if b <= _LOG_ZERO_EDGE:
        return a
    return float(np.logaddexp(a, b))


def check_lattice(lattice: np.ndarray) -> np.ndarray:
    """Validate a frames x (vocab+1) matrix of per-frame log-distributions."""
    lat = np.asarray(lattice, dtype=np.float64)
    if lat.ndim != 2 or lat.shape[0] < 1 or lat.shape[1] < 2:
        raise ValueError(f"lattice must be (T>=1) x (V+1>=2), got {lat.shape}")
    norms = np.log(np.exp(lat - lat.max(axis=1, keepdims=True)).sum(axis=1)) + lat.max(
        axis=1
    )
    if np.abs(norms).max() > 1e-9:
        raise ValueError("lattice rows must log-normalize to 0 within 1e-9")
    return lat


def min_frames(target: list[int] | tuple[int, ...]) -> int:
    """Fewest frames that can emit ``target``: length plus adjacent repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_target(target, vocab: int) -> list[int]:
    tgt = [int(t) for t in target]
    for t in tgt:
        if not 0 <= t < vocab:
            raise ValueError(f"target token {t} outside vocab [0, {vocab})")
    return tgt


def _extended(target: list[int], blank: int) -> tuple[np.ndarray, np.ndarray]:
    # blank-interleaved labels [b, y1, b, y2, ..., b] and skip-allowed flags
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    allow_skip = np.zeros(ext.size, dtype=bool)
    for s in range(2, ext.size):
        allow_skip[s] = ext[s] != blank and ext[s] != ext[s - 2]
    return ext, allow_skip


def _forward(lat: np.ndarray, ext: np.ndarray, allow_skip: np.ndarray) -> np.ndarray:
    T = lat.shape[0]
    S = ext.size
    lat_ext = lat[:, ext]
    alpha = np.full((T, S), LOG_ZERO)
    alpha[0, 0] = lat_ext[0, 0]
    if S > 1:
        alpha[0, 1] = lat_ext[0, 1]
    step = np.empty(S)
    skip = np.empty(S)
    no_skip = ~allow_skip
    for t in range(1, T):
        prev = alpha[t - 1]
        step[0] = LOG_ZERO
        step[1:] = prev[:-1]
        np.logaddexp(prev, step, out=alpha[t])
        if S > 2:
            skip[:2] = LOG_ZERO
            skip[2:] = prev[:-2]
            skip[no_skip] = LOG_ZERO
            np.logaddexp(alpha[t], skip, out=alpha[t])
        alpha[t] += lat_ext[t]
    return alpha


def _backward_dp(lat: np.ndarray, ext: np.ndarray, allow_skip: np.ndarray) -> np.ndarray:
    T = lat.shape[0]
    S = ext.size
    lat_ext = lat[:, ext]
    beta = np.full((T, S), LOG_ZERO)
    beta[T - 1, S - 1] = lat_ext[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = lat_ext[T - 1, S - 2]
    # skip out of s is allowed when position s+2 permits the skip
    no_skip_from = np.ones(S, dtype=bool)
    no_skip_from[:-2] = ~allow_skip[2:]
    step = np.empty(S)
    skip = np.empty(S)
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        step[-1] = LOG_ZERO
        step[:-1] = nxt[1:]
        np.logaddexp(nxt, step, out=beta[t])
        if S > 2:
            skip[-2:] = LOG_ZERO
            skip[:-2] = nxt[2:]
            skip[no_skip_from] = LOG_ZERO
            np.logaddexp(beta[t], skip, out=beta[t])
        beta[t] += lat_ext[t]
    return beta


def ctc_log_likelihood(lattice: np.ndarray, target) -> float:
    """Log-probability that a random alignment path collapses to ``target``.

    Standard blank-interleaved dynamic program in log space. Raises
    ``InfeasibleTargetError`` when the frame count cannot fit the target.
    """
    lat = check_lattice(lattice)
    T, width = lat.shape
    tgt = _check_target(target, width - 1)
    if min_frames(tgt) > T:
        raise InfeasibleTargetError(
            f"target of effective length {min_frames(tgt)} does not fit in {T} frames"
        )
    ext, allow_skip = _extended(tgt, width - 1)
    alpha = _forward(lat, ext, allow_skip)
    total = alpha[T - 1, ext.size - 1]
    if ext.size > 1:
        total = logadd(total, alpha[T - 1, ext.size - 2])
    return float(total)


def collapse_path(path) -> list[int]:
    """Deduplicate consecutive repeats, then drop blanks (marked by ``None``)."""
    out: list[int] = []
    prev = object()
    for p in path:
        if p != prev:
            if p is not None:
                out.append(p)
            prev = p
    return out


def ctc_brute_force(lattice: np.ndarray, target) -> float:
    """Oracle: enumerate every alignment path and sum those matching ``target``.

    Returns ``LOG_ZERO`` when no path collapses to the target.
    """
    lat = check_lattice(lattice)
    T, width = lat.shape
    vocab = width - 1
    tgt = _check_target(target, vocab)
    if float(width) ** T > 1e6:
        raise SearchSpaceError(f"{width}^{T} alignment paths exceed the 1e6 bound")
    total = 0.0
    for path in itertools.product(range(width), repeat=T):
        labels = collapse_path(p if p != vocab else None for p in path)
        if labels == tgt:
            total += float(np.exp(sum(lat[t, p] for t, p in enumerate(path))))
    return float(np.log(total)) if total > 0.0 else LOG_ZERO


def ctc_brute_force_table(lattice: np.ndarray) -> dict[tuple[int, ...], float]:
    """One enumeration pass: probability mass of every reachable label sequence."""
    lat = check_lattice(lattice)
    T, width = lat.shape
    vocab = width - 1
    if float(width) ** T > 1e6:
        raise SearchSpaceError(f"{width}^{T} alignment paths exceed the 1e6 bound")
    probs = np.exp(lat)
    table: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(width), repeat=T):
        labels = tuple(collapse_path(p if p != vocab else None for p in path))
        p = 1.0
        for t, sym in enumerate(path):
            p *= probs[t, sym]
        table[labels] = table.get(labels, 0.0) + p
    return {k: float(np.log(v)) for k, v in table.items()}


def alignment_posterior(lattice: np.ndarray, target) -> np.ndarray:
    """Per-frame symbol occupancy posterior, a T x (V+1) stochastic matrix."""
    lat = check_lattice(lattice)
    T, width = lat.shape
    tgt = _check_target(target, width - 1)
    if min_frames(tgt) > T:
        raise InfeasibleTargetError(
            f"target of effective length {min_frames(tgt)} does not fit in {T} frames"
        )
    ext, allow_skip = _extended(tgt, width - 1)
    alpha = _forward(lat, ext, allow_skip)
    beta = _backward_dp(lat, ext, allow_skip)
    loglik = alpha[T - 1, ext.size - 1]
    if ext.size > 1:
        loglik = logadd(loglik, alpha[T - 1, ext.size - 2])
    # alpha and beta both include the emission at t; divide it out once
    occ = alpha + beta - lat[:, ext] - loglik
    onehot = np.zeros((ext.size, width))
    onehot[np.arange(ext.size), ext] = 1.0
    return np.exp(occ) @ onehot


def ctc_grad(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. pre-softmax logits.

    Gradient is softmax(logits) minus the alignment occupancy posterior.
    """
    logits = np.asarray(logits, dtype=np.float64)
    lat = log_softmax_np(logits)
    loglik = ctc_log_likelihood(lat, target)
    post = alignment_posterior(lat, target)
    grad = np.exp(lat) - post
    return -loglik, grad


def ctc_loss_node(logits: Tensor, target) -> Tensor:
    """Register the CTC negative log-likelihood as a custom autodiff node."""
    loss, grad = ctc_grad(logits.data, target)

    def push(g, logits=logits, grad=grad):
        adcore._accum(logits, g[0, 0] * grad)

    return logits.graph.op("ctc_loss", np.array([[loss]]), (logits,), push)


def ctc_greedy_decode(lattice: np.ndarray) -> list[int]:
    """Best-path decoding: per-frame argmax, collapse repeats, drop blanks."""
    lat = np.asarray(lattice, dtype=np.float64)
    blank = lat.shape[1] - 1
    ids = lat.argmax(axis=1)
    return collapse_path(int(i) if i != blank else None for i in ids)
