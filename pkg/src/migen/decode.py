"""Greedy and beam-search report generation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import MIGenModel
from .tensor import no_grad
from .vocab import BOS, EOS, PAD

DEFAULT_BANNED = (PAD, BOS)


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 3
    max_len: int = 32
    length_penalty_alpha: float = 0.0

    def validate(self, model: Optional[MIGenModel] = None) -> "BeamConfig":
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")
        if model is not None and self.max_len > model.config.max_report_len:
            raise ConfigError(f"max_len={self.max_len} exceeds the model's max_report_len={model.config.max_report_len}")
        return self


@dataclass
class Hypothesis:
    tokens: list = field(default_factory=lambda: [BOS])
    logprob: float = 0.0
    finished: bool = False

    @property
    def generated(self) -> int:
        return len(self.tokens) - 1

    def score(self, alpha: float) -> float:
        if alpha == 0.0:
            return self.logprob
        return self.logprob / max(self.generated, 1) ** alpha


def _next_logprobs(model: MIGenModel, H, prefixes: np.ndarray, banned: Sequence[int]) -> np.ndarray:
    logits = model.decode_logits(H, prefixes)
    lp = T.log_softmax(T.take_rows(logits.transpose(1, 0, 2), -1), axis=-1).data
    if banned:
        lp = lp.copy()
        lp[:, list(banned)] = -np.inf
    return lp


def _greedy(model: MIGenModel, H, max_len: int, banned: Sequence[int]) -> Hypothesis:
    seq, total = [BOS], 0.0
    for _ in range(max_len):
        lp = _next_logprobs(model, H, np.array([seq]), banned)[0]
        tok = int(np.argmax(lp))
        seq.append(tok)
        total += float(lp[tok])
        if tok == EOS:
            break
    return Hypothesis(seq, total, True)


def greedy_decode(model: MIGenModel, embeddings, max_len: int, banned: Sequence[int] = DEFAULT_BANNED,
                  H=None) -> list[int]:
    """Argmax decoding from BOS; ties resolve to the lowest id."""
    with no_grad():
        if H is None:
            H = model.encode(embeddings)
        return _greedy(model, H, max_len, banned).tokens


def _rank_key(score: float, tokens: list) -> tuple:
    return (-score, tuple(tokens))


def beam_search_hypotheses(model: MIGenModel, embeddings, cfg: BeamConfig,
                           banned: Sequence[int] = DEFAULT_BANNED, H=None) -> list[Hypothesis]:
    """All retired hypotheses, best first."""
    cfg.validate()
    alpha = cfg.length_penalty_alpha
    with no_grad():
        if H is None:
            H = model.encode(embeddings)
        alive = [Hypothesis()]
        finished: list[Hypothesis] = []
        for _ in range(cfg.max_len):
            prefixes = np.array([h.tokens for h in alive])
            lp = _next_logprobs(model, H, prefixes, banned)
            candidates = []
            for b, hyp in enumerate(alive):
                for tok in np.nonzero(np.isfinite(lp[b]))[0]:
                    candidates.append((hyp.logprob + float(lp[b, tok]), hyp.tokens + [int(tok)]))
            candidates.sort(key=lambda c: _rank_key(c[0], c[1]))
            alive = []
            for score, tokens in candidates[:cfg.beam_size]:
                hyp = Hypothesis(tokens, score, tokens[-1] == EOS or len(tokens) - 1 >= cfg.max_len)
                (finished if hyp.finished else alive).append(hyp)
            if not alive:
                break
            if alpha == 0.0 and finished:
                # log-probs only decrease, so no live beam can overtake the best retired one
                if max(h.logprob for h in finished) >= max(h.logprob for h in alive):
                    break
        finished.extend(Hypothesis(h.tokens, h.logprob, True) for h in alive)
        if cfg.beam_size > 1:
            # pruning can drop the greedy path, so it joins the pool and the result never scores below it
            g = _greedy(model, H, cfg.max_len, banned)
            if all(h.tokens != g.tokens for h in finished):
                finished.append(g)
    finished.sort(key=lambda h: _rank_key(h.score(alpha), h.tokens))
    return finished


def beam_search(model: MIGenModel, embeddings, cfg: BeamConfig, banned: Sequence[int] = DEFAULT_BANNED,
                H=None) -> list[int]:
    return beam_search_hypotheses(model, embeddings, cfg, banned, H)[0].tokens


def generate(model: MIGenModel, embeddings, beam_size: int, max_len: int, alpha: float = 0.0) -> list[int]:
    if beam_size == 1:
        return greedy_decode(model, embeddings, max_len)
    return beam_search(model, embeddings, BeamConfig(beam_size, max_len, alpha))


def sequence_logprob(model: MIGenModel, embeddings, tokens: Sequence[int], H=None) -> float:
    """Sum of log-probabilities of ``tokens[1:]`` given the prefix, under no banning."""
    with no_grad():
        if H is None:
            H = model.encode(embeddings)
        logits = model.decode_logits(H, np.array([tokens[:-1]]))
        lp = T.log_softmax(logits, axis=-1).data[0]
    return float(sum(lp[t, tok] for t, tok in enumerate(tokens[1:])))
