import math
import warnings

import pytest

from gvrt.evalkit.metrics import bleu4, lcs_length, rouge_l

# 10 hand-built corpus pairs: (hypotheses, references per hypothesis)
CORPORA = [
    (["the red circle has a striped fill"], [["the red circle has a dotted fill"]]),
    (["a small green square with a solid fill in the center",
      "this triangle is large and blue"],
     [["a small green square with a solid fill in the center"],
      ["this triangle is large and blue with a dotted fill"]]),
    (["this is a yellow cross with a dotted fill", "the cat sat on the mat"],
     [["this is a yellow cross with a striped fill", "a yellow cross with dots"],
      ["the cat is on the mat", "there is a cat on the mat"]]),
    (["one two three four five six", "two three four five"],
     [["one two three four five six seven"], ["one two three four five"]]),
    (["a b c d e f g h"], [["a b c d x f g h", "a b c d e f"]]),
    (["red red red red red"], [["red circle red square red"]]),
    (["this is a blue diamond with a solid fill in the top left",
      "this is a blue diamond with a solid fill"],
     [["a large blue diamond with a solid fill in the top left"],
      ["this diamond is small and blue with a solid fill"]]),
    (["the quick brown fox jumps over the lazy dog"],
     [["the quick brown fox jumped over the lazy dog", "a quick brown dog jumps over the lazy fox"]]),
    (["x y z w v u", "p q r s t", "a b c d e"],
     [["x y z w v u"], ["p q r s t u"], ["e d c b a"]]),
    (["green circle with a striped fill in the bottom right corner of the image"],
     [["a green circle with a striped fill in the bottom right", "green circle striped"]]),
]


def _nltk_bleu(hyps, refs):
    from nltk.translate.bleu_score import corpus_bleu

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return 100.0 * corpus_bleu([[r.split() for r in rs] for rs in refs], [h.split() for h in hyps])


@pytest.mark.parametrize("hyps,refs", CORPORA)
def test_bleu_matches_nltk(hyps, refs):
    assert abs(bleu4(hyps, refs) - _nltk_bleu(hyps, refs)) < 1e-6


def _rouge_score_f(h, r):
    from rouge_score import rouge_scorer

    return rouge_scorer.RougeScorer(["rougeL"]).score(r, h)["rougeL"].fmeasure


def test_rouge_matches_rouge_score_single_reference():
    n = 0
    for hyps, refs in CORPORA:
        single = [[rs[0]] for rs in refs]
        expected = 100.0 * sum(_rouge_score_f(h, rs[0]) for h, rs in zip(hyps, single)) / len(hyps)
        assert abs(rouge_l(hyps, single) - expected) < 1e-6
        n += 1
    assert n == 10


def test_rouge_multi_reference_takes_max_p_and_max_r():
    h = "a b c d"
    refs = ["a b", "a x c d e f g h"]
    # lcs: 2 with both; P = max(2/4, 3/4), R = max(2/2, 3/8)
    p, r = 3 / 4, 1.0
    assert abs(rouge_l([h], [refs]) - 100 * 2 * p * r / (p + r)) < 1e-9


def test_identity_corpora_score_100():
    hyps = ["this is a red circle with a dotted fill", "a large green square in the center"]
    assert bleu4(hyps, [[h] for h in hyps]) == 100.0
    assert rouge_l(hyps, [[h] for h in hyps]) == 100.0
    assert bleu4(hyps, hyps) == 100.0


def test_bleu_by_hand_short_hypothesis():
    # "the cat" vs "the cat sat": p1 = p2 = 1, no 3-grams in the hypothesis
    assert bleu4(["the cat"], [["the cat sat"]]) == 0.0
    # bigram BLEU by hand: precisions 1 and 1, brevity penalty exp(1 - 3/2)
    assert abs(bleu4(["the cat"], [["the cat sat"]], max_n=2) - 100 * math.exp(1 - 3 / 2)) < 1e-12


def test_bleu_by_hand_clipping():
    # hyp 8 tokens, ref 7 tokens: p1 = 2/8 (clipped "the"), p2 = 0 -> 0
    assert bleu4(["the the the the the the the the"], [["the cat is on the mat ok"]]) == 0.0
    s = bleu4(["the the the the"], [["the cat the mat"]], max_n=1)
    assert abs(s - 100 * 2 / 4) < 1e-12


def test_rouge_by_hand_lcs():
    assert lcs_length("a b c".split(), "a c".split()) == 2
    p, r = 2 / 3, 2 / 2
    assert abs(rouge_l(["a b c"], [["a c"]]) - 100 * 2 * p * r / (p + r)) < 1e-12
    assert rouge_l(["a b"], [["c d"]]) == 0.0
    assert rouge_l([], []) == 0.0


def test_rouge_beta_weights_recall():
    # P = 2/3, R = 1: a large beta moves F toward R
    assert rouge_l(["a b c"], [["a c"]], beta=10.0) > rouge_l(["a b c"], [["a c"]])


def test_empty_hypothesis_contributes_nothing():
    assert bleu4([""], [["a b c d"]]) == 0.0
    assert 0.0 <= bleu4(["a b c d", ""], [["a b c d"], ["x"]]) <= 100.0
    with pytest.raises(ValueError):
        bleu4(["a"], [])


def test_scores_in_range():
    for hyps, refs in CORPORA:
        assert 0.0 <= bleu4(hyps, refs) <= 100.0
        assert 0.0 <= rouge_l(hyps, refs) <= 100.0
