"""Text-generation and classification metrics.

BLEU here is the sentence-level variant pinned for this pipeline: modified
n-gram precisions for n=1..4 with clipping against the single reference,
add-one smoothing applied only to zero counts at n >= 2 (unigram precision
is never smoothed), p_n = 1.0 when the candidate is shorter than n, and the
standard brevity penalty. A candidate identical to its reference scores
exactly 1.0, and under the unsmoothed path only an identical candidate does.

Rouge-L is the F1 of longest-common-subsequence precision and recall.

Classification reads generated text: the first whitespace-delimited word,
case-insensitively, is the prediction; "yes" is the positive class. Text
whose first word is neither "yes" nor "no" never counts as a prediction of
either class, so with a positive label it is a miss (fn) and with a negative
label it contributes to no count at all; accuracy still divides by the full
record count, so garbage always hurts accuracy.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import DataError


@dataclass
class MetricReport:
    bleu: float = 0.0
    rouge_l: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    accuracy: float = 0.0
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(candidate: Sequence, reference: Sequence, max_n: int = 4, smooth: bool = True) -> float:
    """Sentence BLEU of a candidate against one reference (token sequences).

    Empty candidate scores 0.0. With smooth=False, zero clipped counts at
    any order zero the whole score, so bleu == 1.0 iff candidate == reference.
    """
    if len(candidate) == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        total = len(candidate) - n + 1
        if total <= 0:
            # candidate shorter than n: order contributes a neutral factor
            continue
        cand_counts = _ngrams(candidate, n)
        ref_counts = _ngrams(reference, n)
        clipped = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        if clipped == 0:
            # add-one applies only to zero counts, and never to unigrams,
            # so exact matches keep exact precisions
            if smooth and n >= 2:
                p = 1.0 / (total + 1)
            else:
                return 0.0
        else:
            p = clipped / total
        log_sum += math.log(p) / max_n
    c, r = len(candidate), len(reference)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Dynamic-programming longest common subsequence length."""
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


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """LCS-based F1. Both empty -> 1.0; exactly one empty -> 0.0."""
    if len(candidate) == 0 and len(reference) == 0:
        return 1.0
    if len(candidate) == 0 or len(reference) == 0:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2.0 * p * r / (p + r)


def parse_yes_no(text: str) -> str | None:
    """First whitespace-delimited word, lowercased, if it is yes/no."""
    words = text.split()
    if not words:
        return None
    w = words[0].lower()
    return w if w in ("yes", "no") else None


def classification_metrics(predictions: list[str], labels: list[str]) -> MetricReport:
    """Score generated yes/no answers against gold labels.

    Unparsable predictions never count toward tp/fp/tn; a missed positive is
    still a fn. Precision/recall/F1 use 0.0 when their denominator is zero.
    """
    if len(predictions) != len(labels):
        raise DataError(
            f"predictions ({len(predictions)}) and labels ({len(labels)}) differ in length"
        )
    if not labels:
        raise DataError("no records to score")
    rep = MetricReport()
    for pred_text, label in zip(predictions, labels):
        gold = label.strip().lower()
        if gold not in ("yes", "no"):
            raise DataError(f"label must be yes/no, got {label!r}")
        pred = parse_yes_no(pred_text)
        if gold == "yes":
            if pred == "yes":
                rep.tp += 1
            else:
                rep.fn += 1  # wrong answer or garbage: the positive was missed
        else:
            if pred == "yes":
                rep.fp += 1
            elif pred == "no":
                rep.tn += 1
            # garbage on a negative: no prediction of either class
    rep.precision = rep.tp / (rep.tp + rep.fp) if rep.tp + rep.fp else 0.0
    rep.recall = rep.tp / (rep.tp + rep.fn) if rep.tp + rep.fn else 0.0
    rep.f1 = (
        2 * rep.precision * rep.recall / (rep.precision + rep.recall)
        if rep.precision + rep.recall
        else 0.0
    )
    rep.accuracy = (rep.tp + rep.tn) / len(labels)
    return rep


def generation_metrics(candidate_text: str, reference_text: str) -> MetricReport:
    """BLEU and Rouge-L over whitespace tokens of generated vs reference text."""
    cand = candidate_text.split()
    ref = reference_text.split()
    return MetricReport(bleu=bleu(cand, ref), rouge_l=rouge_l(cand, ref))
