"""Joint CTC/attention beam search and the attention-only baseline decoder.

The attention decoder proposes candidates at each step; extensions are
rescored by a convex combination of the CTC prefix score and the summed
attention log-probability, plus a linear length bonus. Hypotheses finish on
end-of-sequence (scored with the complete-sequence CTC probability) or when
they reach the length cap.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prefix import PrefixState, prefix_eos_score, prefix_extend, prefix_init

__all__ = [
    "DecodeConfig",
    "Hypothesis",
    "attention_beam_search",
    "hypothesis_text",
    "joint_beam_search",
    "joint_score",
    "length_bonus",
]


@dataclass(frozen=True)
class DecodeConfig:
    """Search hyperparameters (defaults: length penalty 0.6, CTC weight 0.3)."""

    beam_size: int = 5
    max_len: int = 30
    length_penalty: float = 0.6
    ctc_weight: float = 0.3
    mode: str = "joint"  # joint | attention

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam size must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc weight must be in [0, 1]")
        if self.length_penalty < 0.0:
            raise ValueError("length penalty must be >= 0")
        if self.mode not in ("joint", "attention"):
            raise ValueError(f"unknown decode mode {self.mode!r}")


@dataclass(frozen=True)
class Hypothesis:
    """Partial or finished target prefix with accumulated scores."""

    tokens: tuple[int, ...]
    att_score: float
    ctc_score: float
    bonus: float
    state: PrefixState | None
    finished: bool


def length_bonus(step: int, penalty: float) -> float:
    """Additive bonus for a hypothesis of length ``step``: penalty * step."""
    return penalty * step


def joint_score(h: Hypothesis, ctc_weight: float) -> float:
    return ctc_weight * h.ctc_score + (1.0 - ctc_weight) * h.att_score + h.bonus


def _sort_key(h: Hypothesis, w: float):
    # deterministic total order: joint score, then attention, then tokens
    return (-joint_score(h, w), -h.att_score, h.tokens)


def _top_candidates(row: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-row, kind="stable")  # ties broken by token id
    return order[: min(k, row.size)]


def joint_beam_search(decode_fn, lattice: np.ndarray, cfg: DecodeConfig,
                      eos: int) -> list[Hypothesis]:
    """Beam search ranked by the joint CTC/attention score.

    ``decode_fn(prefix) -> log-prob row over text vocab + eos``; ``lattice``
    is the text-CTC head's log-prob matrix for the same input. Returns all
    finished hypotheses, best first.
    """
    w = cfg.ctc_weight if cfg.mode == "joint" else 0.0
    live = [
        Hypothesis(tokens=(), att_score=0.0, ctc_score=0.0, bonus=0.0,
                   state=prefix_init(lattice), finished=False)
    ]
    finished: list[Hypothesis] = []
    for step in range(1, cfg.max_len + 1):
        pool: list[Hypothesis] = []
        bonus = length_bonus(step, cfg.length_penalty)
        for hyp in live:
            row = decode_fn(hyp.tokens)
            for c in _top_candidates(row, cfg.beam_size):
                c = int(c)
                att = hyp.att_score + float(row[c])
                if c == eos:
                    ctc = prefix_eos_score(hyp.state)
                    ext = Hypothesis(hyp.tokens + (c,), att, ctc, bonus, hyp.state, True)
                else:
                    ctc, state = prefix_extend(hyp.state, c)
                    done = step == cfg.max_len
                    ext = Hypothesis(hyp.tokens + (c,), att, ctc, bonus, state, done)
                pool.append(ext)
        pool.sort(key=lambda h: _sort_key(h, w))
        finished.extend(h for h in pool if h.finished)
        live = [h for h in pool if not h.finished][: cfg.beam_size]
        if not live:
            break
    assert finished, "length cap guarantees at least one finished hypothesis"
    finished.sort(key=lambda h: _sort_key(h, w))
    return finished


def attention_beam_search(decode_fn, cfg: DecodeConfig, eos: int) -> list[Hypothesis]:
    """Pure-attention beam search: same loop, no CTC term, no prefix states."""
    live = [Hypothesis(tokens=(), att_score=0.0, ctc_score=0.0, bonus=0.0,
                       state=None, finished=False)]
    finished: list[Hypothesis] = []
    for step in range(1, cfg.max_len + 1):
        pool: list[Hypothesis] = []
        bonus = length_bonus(step, cfg.length_penalty)
        for hyp in live:
            row = decode_fn(hyp.tokens)
            for c in _top_candidates(row, cfg.beam_size):
                c = int(c)
                att = hyp.att_score + float(row[c])
                done = c == eos or step == cfg.max_len
                pool.append(Hypothesis(hyp.tokens + (c,), att, 0.0, bonus, None, done))
        pool.sort(key=lambda h: _sort_key(h, 0.0))
        finished.extend(h for h in pool if h.finished)
        live = [h for h in pool if not h.finished][: cfg.beam_size]
        if not live:
            break
    assert finished, "length cap guarantees at least one finished hypothesis"
    finished.sort(key=lambda h: _sort_key(h, 0.0))
    return finished


def hypothesis_text(h: Hypothesis, eos: int) -> list[int]:
    """Content tokens of a finished hypothesis (end-of-sequence stripped)."""
    return [t for t in h.tokens if t != eos]
