"""Hand-computed metric values.

Each entry: candidate, reference, (BLEU-1..4), ROUGE-L (beta 1.2),
meteor_lite. Derivations are in the trailing comments; ``_f`` is the ROUGE-L
F-measure and ``_fm`` the recall-weighted METEOR mean.
"""
import math

B2 = 1.2 ** 2


def _f(p, r):
    return (1 + B2) * p * r / (r + B2 * p)


def _fm(p, r):
    return 10 * p * r / (r + 9 * p)


def _pen(chunks, m):
    return 1 - 0.5 * (chunks / m) ** 3


FIXTURES = [
    # p1=5/6 p2=3/5 p3=1/4 p4=0; LCS=5; exact alignment has 2 chunks
    ("the cat sat on the mat", "the cat is on the mat",
     (5 / 6, math.sqrt(0.5), 0.5, 0.0), 5 / 6, 5 / 6 * _pen(2, 5)),
    # identical, 4 tokens
    ("a b c d", "a b c d", (1.0, 1.0, 1.0, 1.0), 1.0, 1 - 0.5 / 64),
    # clipping: "the" counted once; no bigram match; c=3 > r=2 so no brevity penalty
    ("the the the", "the cat", (1 / 3, 0.0, 0.0, 0.0), _f(1 / 3, 1 / 2), _fm(1 / 3, 1 / 2) * _pen(1, 1)),
    # disjoint
    ("x y z", "a b c", (0.0, 0.0, 0.0, 0.0), 0.0, 0.0),
    # brevity penalty exp(1 - 4/2); no trigrams in a 2-token candidate
    ("a b", "a b c d", (math.exp(-1), math.exp(-1), 0.0, 0.0), _f(1.0, 0.5), _fm(1.0, 0.5) * _pen(1, 2)),
    # swapped pair: unigrams all match, bigram none; crossing alignment gives 2 chunks
    ("b a", "a b", (1.0, 0.0, 0.0, 0.0), 0.5, 0.5),
    # one extra token: p = 4/5, 3/4, 2/3, 1/2
    ("a b c d e", "a b c d",
     (0.8, math.sqrt(0.6), 0.4 ** (1 / 3), 0.2 ** 0.25), _f(0.8, 1.0), _fm(0.8, 1.0) * _pen(1, 4)),
    # one token short: all precisions 1, brevity penalty exp(1 - 5/4)
    ("a b c d", "a b c d e", (math.exp(-0.25),) * 4, _f(1.0, 0.8), _fm(1.0, 0.8) * _pen(1, 4)),
    # p2 = 1/3 (only "a b" clipped to 1), LCS=3, alignment (0,0)(1,2)(2,1)(3,3) -> 4 chunks
    ("a a b b", "a b a b", (1.0, math.sqrt(1 / 3), 0.0, 0.0), 0.75, 0.5),
    # tokenization folds case and splits punctuation: identical 5-token sequences
    ("Invasive Ductal, carcinoma.", "invasive ductal , carcinoma .", (1.0, 1.0, 1.0, 1.0), 1.0, 1 - 0.5 / 125),
    # empty candidate
    ("", "a b", (0.0, 0.0, 0.0, 0.0), 0.0, 0.0),
    # inserted token: p = 4/5, 2/4, 1/3, 0; alignment breaks once -> 2 chunks
    ("a b c x d", "a b c d",
     (0.8, math.sqrt(0.4), (0.4 / 3) ** (1 / 3), 0.0), _f(0.8, 1.0), _fm(0.8, 1.0) * _pen(2, 4)),
    # deletion example: LCS=3, P=3/4, R=1; p1=3/4, p2=1/3
    ("a b c d", "a c d", (0.75, 0.5, 0.0, 0.0), _f(0.75, 1.0), _fm(0.75, 1.0) * _pen(2, 3)),
]
