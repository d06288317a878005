"""Surface-overlap report metrics: BLEU, ROUGE-1/2/L and keyword coverage.

Single reference, no stemming. Scores are only comparable with other scores
produced by this module.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BLEU_EPS = 1e-9
_TOKEN = re.compile(r"[a-z0-9]+")


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def normalize_text(text: str) -> str:
    return " ".join(tokenize(text))


def _tokens(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Sentence BLEU with uniform weights and a brevity penalty.

    Orders for which the candidate has no n-grams are left out of the
    geometric mean; zero clipped precisions are smoothed to ``BLEU_EPS``.
    """
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand:
        logger.warning("empty candidate; BLEU set to 0")
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        cn = ngrams(cand, n)
        total = sum(cn.values())
        if total == 0:
            break
        rn = ngrams(ref, n)
        clipped = sum(min(c, rn[g]) for g, c in cn.items())
        logs.append(math.log(clipped / total if clipped else BLEU_EPS))
    bp = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(sum(logs) / len(logs))


def rouge_n(candidate, reference, n: int = 1) -> PRF:
    cand, ref = _tokens(candidate), _tokens(reference)
    cn, rn = ngrams(cand, n), ngrams(ref, n)
    overlap = sum((cn & rn).values())
    p = overlap / sum(cn.values()) if cn else 0.0
    r = overlap / sum(rn.values()) if rn else 0.0
    return PRF(p, r, 2 * p * r / (p + r) if p + r else 0.0)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> PRF:
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        logger.warning("empty text; ROUGE-L set to 0")
        return PRF(0.0, 0.0, 0.0)
    lcs = lcs_length(cand, ref)
    p, r = lcs / len(cand), lcs / len(ref)
    return PRF(p, r, 2 * p * r / (p + r) if lcs else 0.0)


def keyword_overlap(candidate: str, required_terms: Sequence[str]) -> float:
    """Fraction of ``required_terms`` found in the candidate (normalized substring)."""
    if not required_terms:
        raise ValueError("required_terms must be non-empty")
    text = normalize_text(candidate)
    hits = sum(1 for t in required_terms if normalize_text(t) in text)
    return hits / len(required_terms)


def score_report(candidate: str, reference: str,
                 required_terms: Sequence[str] | None = None) -> dict:
    out = {f"bleu{n}": bleu(candidate, reference, max_n=n) for n in range(1, 5)}
    out["rouge1"] = rouge_n(candidate, reference, 1).recall
    out["rouge2"] = rouge_n(candidate, reference, 2).recall
    rl = rouge_l(candidate, reference)
    out.update(rougeL_p=rl.precision, rougeL_r=rl.recall, rougeL_f1=rl.f1)
    out["rouge"] = rl.f1
    if required_terms:
        out["keyword_overlap"] = keyword_overlap(candidate, required_terms)
    return out


def aggregate_scores(rows: Iterable[dict]) -> dict:
    rows = list(rows)
    keys = sorted({k for r in rows for k in r})
    out = {"n": len(rows)}
    for k in keys:
        vals = np.array([r[k] for r in rows if k in r], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
