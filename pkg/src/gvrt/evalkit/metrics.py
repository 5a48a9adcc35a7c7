"""Corpus-level caption metrics on whitespace-tokenised sentences."""

from __future__ import annotations

import math
from collections import Counter
from typing import List, Sequence, Union

Sentence = Union[str, Sequence[str]]


def _toks(s: Sentence) -> List[str]:
    return s.lower().split() if isinstance(s, str) else list(s)


def _refs(r) -> List[List[str]]:
    # a string is one reference; a list holds several (strings or token lists)
    if isinstance(r, str):
        return [_toks(r)]
    return [_toks(x) for x in r]


def _ngrams(toks, n):
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def _check(hypotheses, references):
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")


def bleu4(hypotheses: Sequence[Sentence], references: Sequence, max_n: int = 4) -> float:
    """Corpus BLEU: clipped n-gram precisions (n=1..4), geometric mean, brevity penalty; x100.

    No smoothing, so a corpus without any matching 4-gram scores 0. The reference
    length for the brevity penalty is the closest reference length (shorter on ties).
    """
    _check(hypotheses, references)
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for h, rs in zip(hypotheses, references):
        h = _toks(h)
        rs = _refs(rs)
        hyp_len += len(h)
        ref_len += min((len(r) for r in rs), key=lambda L: (abs(L - len(h)), L))
        for n in range(1, max_n + 1):
            hc = _ngrams(h, n)
            best = Counter()
            for r in rs:
                best |= _ngrams(r, n)
            matched[n - 1] += sum(min(c, best[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or any(t == 0 or m == 0 for m, t in zip(matched, total)):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypotheses: Sequence[Sentence], references: Sequence, beta: float = 1.0) -> float:
    """Mean LCS F-measure x100; with several references, precision and recall each take their max.

    ``beta=1`` gives ``2PR/(P+R)``; larger values weight recall (1.2 is the COCO setting).
    """
    _check(hypotheses, references)
    if not hypotheses:
        return 0.0
    scores = []
    for h, rs in zip(hypotheses, references):
        h = _toks(h)
        rs = _refs(rs)
        if not h or not any(rs):
            scores.append(0.0)
            continue
        lcs = [lcs_length(h, r) for r in rs]
        p = max(l / len(h) for l in lcs)
        rec = max(l / len(r) for l, r in zip(lcs, rs) if r)
        if p == 0 or rec == 0:
            scores.append(0.0)
        else:
            scores.append((1 + beta ** 2) * p * rec / (rec + beta ** 2 * p))
    return 100.0 * sum(scores) / len(scores)
