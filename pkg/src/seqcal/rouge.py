"""Token-level ROUGE-1, ROUGE-2, and ROUGE-L over integer id sequences.

The corpus is synthetic, so there is no stemming, casing, or stopword
handling anywhere: scores are deterministic functions of the id sequences.
N-gram variants use clipped counts; the L variant uses the longest common
subsequence.  F1 is the harmonic mean of precision and recall, defined as
0 when both are 0, and is the headline number.  Scores live in [0, 1];
`score_quality` scales to the percentage convention used in reports.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .errors import ConfigurationError


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(hypothesis, reference, n: int) -> RougeScore:
    """Clipped n-gram overlap score; order n must be 1 or 2."""
    if n not in (1, 2):
        raise ConfigurationError(f"rouge_n order must be 1 or 2, got {n}")
    hyp = tuple(hypothesis)
    ref = tuple(reference)
    hyp_counts = _ngram_counts(hyp, n)
    ref_counts = _ngram_counts(ref, n)
    overlap = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    total_hyp = sum(hyp_counts.values())
    total_ref = sum(ref_counts.values())
    precision = overlap / total_hyp if total_hyp else 0.0
    recall = overlap / total_ref if total_ref else 0.0
    return RougeScore(precision, recall, _f1(precision, recall))


def lcs_length(a, b) -> int:
    """Length of the longest common subsequence, O(len(a) * len(b))."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[len(b)]


def rouge_l(hypothesis, reference) -> RougeScore:
    """Longest-common-subsequence score."""
    hyp = tuple(hypothesis)
    ref = tuple(reference)
    if not hyp or not ref:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = lcs_length(hyp, ref)
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return RougeScore(precision, recall, _f1(precision, recall))


def score_quality(hypothesis, reference) -> dict[str, float]:
    """F1 percentages keyed the way prediction records store them."""
    return {
        "rouge1": 100.0 * rouge_n(hypothesis, reference, 1).f1,
        "rouge2": 100.0 * rouge_n(hypothesis, reference, 2).f1,
        "rougeL": 100.0 * rouge_l(hypothesis, reference).f1,
    }
