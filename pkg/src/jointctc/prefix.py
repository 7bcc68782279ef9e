"""Incremental CTC prefix scoring over a text-level log-prob lattice.

A state tracks, per frame, the log mass of alignment paths that have emitted
exactly the current prefix, split by whether the path currently ends in blank
(``log_b``) or in the prefix's final token (``log_nb``). Extending by one
token returns the standard CTC prefix probability: the log mass of all
complete label sequences that begin with the extended prefix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctc import LOG_ZERO, check_lattice, is_log_zero, logadd

__all__ = ["PrefixState", "VocabError", "prefix_init", "prefix_extend", "prefix_eos_score"]


class VocabError(ValueError):
    """Extension token outside the lattice's label vocabulary."""


def _clamp(x: float) -> float:
    return LOG_ZERO if is_log_zero(x) else float(x)


@dataclass(frozen=True)
class PrefixState:
    """Immutable per-prefix scoring state; extensions return new states."""

    log_b: np.ndarray
    log_nb: np.ndarray
    length: int
    lattice: np.ndarray
    last: int | None

    @property
    def frames(self) -> int:
        return self.lattice.shape[0]


def prefix_init(lattice: np.ndarray) -> PrefixState:
    """State of the empty prefix: blank-only paths, nothing emitted."""
    lat = check_lattice(lattice)
    blank = lat.shape[1] - 1
    log_b = np.cumsum(lat[:, blank])
    log_nb = np.full(lat.shape[0], LOG_ZERO)
    return PrefixState(log_b=log_b, log_nb=log_nb, length=0, lattice=lat, last=None)


def prefix_extend(state: PrefixState, token: int) -> tuple[float, PrefixState]:
    """Score prefix+token as a prefix and return the extended state.

    The score is log P(complete output begins with the extended prefix).
    A repeat of the previous token requires a separating blank; when no
    alignment can fit, the score is the LOG_ZERO sentinel.
    """
    token = int(token)
    vocab = state.lattice.shape[1] - 1
    if not 0 <= token < vocab:
        raise VocabError(f"token {token} outside text vocab [0, {vocab})")
    lat = state.lattice
    T = lat.shape[0]
    x_tok = lat[:, token]
    x_blank = lat[:, vocab]

    new_b = np.full(T, LOG_ZERO)
    new_nb = np.full(T, LOG_ZERO)
    psi = LOG_ZERO
    # phi[t]: mass of paths that emitted the parent prefix within frames <= t
    # and may emit `token` next (repeat of `last` must cross a blank)
    prev_phi = 0.0 if state.length == 0 else LOG_ZERO
    prev_nb = LOG_ZERO
    prev_b = LOG_ZERO
    for t in range(T):
        new_nb[t] = logadd(prev_nb, prev_phi) + x_tok[t]
        new_b[t] = logadd(prev_b, prev_nb) + x_blank[t]
        if not is_log_zero(prev_phi):
            psi = logadd(psi, prev_phi + x_tok[t])
        if token == state.last:
            prev_phi = state.log_b[t]
        else:
            prev_phi = logadd(state.log_b[t], state.log_nb[t])
        prev_nb = new_nb[t]
        prev_b = new_b[t]

    new = PrefixState(
        log_b=new_b, log_nb=new_nb, length=state.length + 1, lattice=lat, last=token
    )
    return _clamp(psi), new


def prefix_eos_score(state: PrefixState) -> float:
    """Log-probability that the prefix is the complete output sequence."""
    T = state.frames
    return _clamp(logadd(state.log_b[T - 1], state.log_nb[T - 1]))
