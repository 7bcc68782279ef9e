"""Evaluation metrics over token-id sequences: corpus BLEU, ROUGE-L F1, WER.

Inputs are lists of integer token ids; there is no detokenization anywhere,
so "tokenized" scores are exact by construction.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from typing import Sequence

__all__ = [
    "bleu",
    "corpus_rouge_l",
    "corpus_wer",
    "edit_distance",
    "rouge_l_f1",
    "score_rows",
    "wer",
    "write_scores_csv",
    "SCORE_HEADER",
]

SCORE_HEADER = ("metric", "split", "config", "seed", "value")


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(references: Sequence[Sequence[int]], hypotheses: Sequence[Sequence[int]],
         max_n: int = 4) -> list[float]:
    """Corpus-level B@1..B@max_n in percent, geometric mean of modified
    n-gram precisions with brevity penalty and no smoothing."""
    if len(references) != len(hypotheses):
        raise ValueError("reference and hypothesis lists differ in length")
    if not references:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    ref_len = 0
    hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_n + 1):
            hyp_grams = _ngrams(hyp, n)
            ref_grams = _ngrams(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            matches[n - 1] += sum(
                min(c, ref_grams[g]) for g, c in hyp_grams.items()
            )
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    scores = []
    for k in range(1, max_n + 1):
        if any(matches[n] == 0 or totals[n] == 0 for n in range(k)):
            scores.append(0.0)
            continue
        log_mean = sum(math.log(matches[n] / totals[n]) for n in range(k)) / k
        scores.append(100.0 * bp * math.exp(log_mean))
    return scores


def _lcs(a: Sequence[int], b: Sequence[int]) -> int:
    dp = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, start=1):
            cur = dp[j]
            dp[j] = prev + 1 if x == y else max(dp[j], dp[j - 1])
            prev = cur
    return dp[len(b)]


def rouge_l_f1(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    """LCS-based F1 with beta=1, as a fraction in [0, 1]."""
    if not reference:
        raise ValueError("empty reference")
    if not hypothesis:
        return 0.0
    lcs = _lcs(reference, hypothesis)
    if lcs == 0:
        return 0.0
    p = lcs / len(hypothesis)
    r = lcs / len(reference)
    return 2.0 * p * r / (p + r)


def corpus_rouge_l(references, hypotheses) -> float:
    """Mean pairwise ROUGE-L F1 over the corpus, as a fraction."""
    if len(references) != len(hypotheses):
        raise ValueError("reference and hypothesis lists differ in length")
    if not references:
        raise ValueError("empty corpus")
    return sum(rouge_l_f1(r, h) for r, h in zip(references, hypotheses)) / len(references)


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    dp = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        prev = dp[0]
        dp[0] = i
        for j, y in enumerate(b, start=1):
            cur = dp[j]
            dp[j] = min(dp[j] + 1, dp[j - 1] + 1, prev + (x != y))
            prev = cur
    return dp[len(b)]


def wer(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    """Word error rate: edit distance over reference length (may exceed 1)."""
    if not reference:
        raise ValueError("empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def corpus_wer(references, hypotheses) -> float:
    """Total edits over total reference length."""
    if len(references) != len(hypotheses):
        raise ValueError("reference and hypothesis lists differ in length")
    total_ref = sum(len(r) for r in references)
    if total_ref == 0:
        raise ValueError("empty references")
    edits = sum(edit_distance(r, h) for r, h in zip(references, hypotheses))
    return edits / total_ref


def score_rows(split: str, config: str, seed: int,
               references, hypotheses,
               gloss_refs=None, gloss_hyps=None) -> list[tuple]:
    """Rows for the fixed-schema score CSV. All values in percent."""
    rows = []
    bs = bleu(references, hypotheses, max_n=4)
    for k, v in enumerate(bs, start=1):
        rows.append((f"b{k}", split, config, seed, v))
    rows.append(("rouge_l", split, config, seed, 100.0 * corpus_rouge_l(references, hypotheses)))
    if gloss_refs is not None and gloss_hyps is not None:
        rows.append(("wer", split, config, seed, 100.0 * corpus_wer(gloss_refs, gloss_hyps)))
    return rows


def write_scores_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_HEADER)
        for metric, split, config, seed, value in rows:
            writer.writerow([metric, split, config, seed, f"{value:.6f}"])
