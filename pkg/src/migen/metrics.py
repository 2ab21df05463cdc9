"""Caption metrics, template slot scoring, and keyword-based class extraction.

All text metrics tokenize with :func:`migen.vocab.tokenize`, so case and
punctuation spacing do not matter. Scores are sentence-level and lie in
[0, 1]; an empty candidate scores 0.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from typing import Optional, Sequence

import numpy as np

from .data import DEFAULT_TEMPLATE
from .errors import ConfigError, InputError
from .vocab import tokenize

ROUGE_BETA = 1.2
# METEOR constants (Banerjee & Lavie 2005)
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def bleu_n(candidate: str, references, n: int = 4) -> float:
    """Sentence BLEU with clipped n-gram precision, no smoothing."""
    if not 1 <= n <= 4:
        raise InputError(f"BLEU order must be in [1, 4], got {n}")
    if isinstance(references, str):
        references = [references]
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not cand or not refs:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        counts = _ngrams(cand, k)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        max_ref = Counter()
        for r in refs:
            for g, c in _ngrams(r, k).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c = len(cand)
    r = _closest_ref_len(c, [len(x) for x in refs])
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, beta: float = ROUGE_BETA) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def _align_exact(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    # each candidate word takes the first unused identical reference word
    used = [False] * len(ref)
    pairs = []
    for i, w in enumerate(cand):
        for j, v in enumerate(ref):
            if not used[j] and v == w:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def _chunks(pairs: list[tuple[int, int]]) -> int:
    if not pairs:
        return 0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return chunks


def meteor_lite(candidate: str, reference: str) -> float:
    """METEOR restricted to exact unigram matches (no stemming or synonyms)."""
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    pairs = _align_exact(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (_chunks(pairs) / m) ** METEOR_BETA
    return fmean * (1.0 - penalty)


# ----------------------------------------------------------------------------
# slots and semantic extraction
# ----------------------------------------------------------------------------

SLOTS = ("subtype", "diameter", "quadrant")


def _slot_patterns(template: str) -> dict[str, re.Pattern]:
    """Per-slot regex anchored on the template words either side of the slot."""
    parts = re.split(r"(\{\w+\})", template)
    words: list[str] = []
    for part in parts:
        if part.startswith("{") and part.endswith("}"):
            words.append(part)
        else:
            words.extend(tokenize(part))
    patterns = {}
    for i, w in enumerate(words):
        if not (w.startswith("{") and w.endswith("}")):
            continue
        before = re.escape(words[i - 1]) + " " if i > 0 else "^"
        after = " " + re.escape(words[i + 1]) if i + 1 < len(words) else "$"
        lead = r"(?:^| )" if i > 0 else ""
        patterns[w[1:-1]] = re.compile(lead + before + r"(\S+)" + after + r"(?: |$)")
    return patterns


def parse_slots(text: str, templates: Sequence[str] = (DEFAULT_TEMPLATE,)) -> dict[str, Optional[str]]:
    norm = " ".join(tokenize(text))
    found: dict[str, Optional[str]] = {s: None for s in SLOTS}
    for template in templates:
        for slot, pat in _slot_patterns(template).items():
            if found.get(slot) is None:
                m = pat.search(norm)
                if m:
                    found[slot] = m.group(1)
    return found


def slot_accuracy(generated: str, blob: dict, templates: Sequence[str] = (DEFAULT_TEMPLATE,)) -> dict[str, bool]:
    """Whether each templated slot in ``generated`` matches the planted blob."""
    found = parse_slots(generated, templates)
    truth = {"subtype": str(blob["subtype"]), "diameter": str(blob["diameter"]), "quadrant": str(blob["quadrant"])}
    return {s: found[s] is not None and found[s] == truth[s] for s in SLOTS}


def check_keyword_map(keyword_map: dict) -> None:
    owner: dict[tuple, object] = {}
    for label, words in keyword_map.items():
        for w in words:
            key = tuple(tokenize(w))
            if not key:
                raise ConfigError(f"empty keyword for class {label!r}")
            if key in owner and owner[key] != label:
                raise ConfigError(f"keyword {w!r} is listed for both {owner[key]!r} and {label!r}")
            owner[key] = label


def semantic_extract(report: str, keyword_map: dict):
    """Class whose keyword occurs earliest in ``report``; None to abstain."""
    check_keyword_map(keyword_map)
    tokens = tokenize(report)
    keys = [(label, tuple(tokenize(w))) for label, words in keyword_map.items() for w in words]
    for pos in range(len(tokens)):
        hits = {label for label, key in keys if tuple(tokens[pos:pos + len(key)]) == key}
        if len(hits) == 1:
            return hits.pop()
        if len(hits) > 1:
            return None
    return None


def classification_scores(predicted: Sequence, truth: Sequence, n_classes: int) -> dict:
    """Accuracy and macro F1; ``None`` predictions (abstentions) count as errors."""
    if len(predicted) != len(truth):
        raise InputError("prediction and label lists differ in length")
    if not truth:
        return {"accuracy": 0.0, "macro_f1": 0.0, "abstentions": 0, "n": 0}
    correct = sum(p is not None and p == t for p, t in zip(predicted, truth))
    f1s = []
    for c in range(n_classes):
        tp = sum(p == c and t == c for p, t in zip(predicted, truth))
        fp = sum(p == c and t != c for p, t in zip(predicted, truth))
        fn = sum(p != c and t == c for p, t in zip(predicted, truth))
        if tp + fp + fn == 0:
            continue
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return {
        "accuracy": correct / len(truth),
        "macro_f1": float(np.mean(f1s)) if f1s else 0.0,
        "abstentions": sum(p is None for p in predicted),
        "n": len(truth),
    }


def text_scores(candidate: str, reference: str) -> dict[str, float]:
    scores = {f"bleu_{n}": bleu_n(candidate, [reference], n) for n in range(1, 5)}
    scores["rouge_l"] = rouge_l(candidate, reference)
    scores["meteor_lite"] = meteor_lite(candidate, reference)
    return scores
