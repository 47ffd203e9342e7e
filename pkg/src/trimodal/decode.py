"""Greedy and beam-search decoding restricted to the target modality's tokens."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .seq2seq import ModelConfig, Params, decode_logits, encode
from .tokencore import BOS, EOS, PAD, Modality, TokenSequence, Vocabulary
from .tokenizers import TokenizerSet


class NoFinishError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Hypothesis:
    tokens: list[int]          # starts with BOS
    logprob: float = 0.0
    finished: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    def score(self, alpha: float = 0.0) -> float:
        return self.logprob / (self.length ** alpha) if alpha else self.logprob

    def to_sequence(self, modality: Modality) -> TokenSequence:
        body = self.tokens[1:]
        if body and body[-1] == EOS:
            body = body[:-1]
        return TokenSequence(modality, tuple(body))


@dataclass
class DecodeConfig:
    beam_width: int = 5
    image_len: int = 32
    speech_max: int = 384
    text_max: int = 128
    length_norm_alpha: float = 0.0

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")

    def max_len(self, m: Modality) -> int:
        """Upper bound on generated tokens, EOS included."""
        return {Modality.IMAGE: self.image_len, Modality.SPEECH: self.speech_max,
                Modality.TEXT: self.text_max}[m] + 1


@dataclass
class Model:
    cfg: ModelConfig
    params: Params
    vocab: Vocabulary

    def __post_init__(self):
        if self.cfg.vocab_total != self.vocab.total:
            raise ConfigError(f"model vocabulary {self.cfg.vocab_total} != tokenizer vocabulary {self.vocab.total}")

    def scorer(self, source: TokenSequence) -> Callable[[torch.Tensor], torch.Tensor]:
        """Closure mapping (B, T) prefixes to next-token log-probabilities."""
        if not source.tokens:
            raise ValueError("empty source sequence")
        if max(source.tokens) >= self.vocab.total:
            raise ConfigError("source token outside the model vocabulary")
        src = torch.tensor([source.tokens], dtype=torch.long)
        with torch.no_grad():
            ctx = encode(self.params, self.cfg, src, int(source.modality))
        keep = src != PAD

        def step(prefixes: torch.Tensor, tgt: Modality) -> torch.Tensor:
            b = prefixes.shape[0]
            with torch.no_grad():
                logits = decode_logits(self.params, self.cfg, ctx.expand(b, -1, -1),
                                       keep.expand(b, -1), prefixes, int(tgt))
            return logits[:, -1].to(torch.float64)

        return step

    def full_logits(self, source: TokenSequence, tokens: list[int], tgt: Modality) -> torch.Tensor:
        """Teacher-forced logits for every position of ``tokens`` in one pass."""
        src = torch.tensor([source.tokens], dtype=torch.long)
        with torch.no_grad():
            ctx = encode(self.params, self.cfg, src, int(source.modality))
            return decode_logits(self.params, self.cfg, ctx, src != PAD,
                                 torch.tensor([tokens[:-1]], dtype=torch.long), int(tgt))[0].to(torch.float64)


def allowed_mask(vocab: Vocabulary, tgt: Modality, position: int, cfg: DecodeConfig) -> torch.Tensor:
    """Tokens admissible as the ``position``-th generated token (0-based)."""
    mask = torch.zeros(vocab.total, dtype=torch.bool)
    r = vocab.range(tgt)
    if tgt == Modality.IMAGE:
        # image sequences are fixed length: patches first, then EOS
        if position < cfg.image_len:
            mask[r.start:r.stop] = True
        else:
            mask[EOS] = True
        return mask
    mask[r.start:r.stop] = True
    mask[EOS] = True
    return mask


def masked_logprobs(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


StepFn = Callable[[torch.Tensor, Modality], torch.Tensor]


def greedy_decode(step: StepFn, vocab: Vocabulary, tgt: Modality, cfg: DecodeConfig) -> Hypothesis:
    hyp = Hypothesis([BOS])
    for pos in range(cfg.max_len(tgt)):
        lp = masked_logprobs(step(torch.tensor([hyp.tokens]), tgt)[0], allowed_mask(vocab, tgt, pos, cfg))
        tok = int(torch.argmax(lp))
        hyp.tokens.append(tok)
        hyp.logprob += float(lp[tok])
        if tok == EOS:
            hyp.finished = True
            break
    return hyp


def beam_search(step: StepFn, vocab: Vocabulary, tgt: Modality, cfg: DecodeConfig) -> list[Hypothesis]:
    """Finished hypotheses, best first; empty if none reaches EOS within max_len.

    Each round ranks every admissible one-token extension of the live beams by
    (logprob desc, beam index, token id). Extensions ending in EOS are set aside
    as finished; the rest refill the live beams. Search stops once no live
    beam can still beat the ``beam_width``-th finished score: log-probabilities
    only fall as a hypothesis grows, so its score is bounded by its current
    logprob over the longest allowed length.
    """
    width = cfg.beam_width
    limit = cfg.max_len(tgt)
    alive = [Hypothesis([BOS])]
    finished: list[Hypothesis] = []
    alpha = cfg.length_norm_alpha
    for pos in range(limit):
        if not alive:
            break
        if len(finished) >= width:
            kth = sorted((h.score(alpha) for h in finished), reverse=True)[width - 1]
            if max(h.logprob for h in alive) / (limit + 1) ** alpha <= kth:
                break
        logits = step(torch.tensor([h.tokens for h in alive]), tgt)
        lp = masked_logprobs(logits, allowed_mask(vocab, tgt, pos, cfg)[None])
        total = lp + torch.tensor([h.logprob for h in alive], dtype=torch.float64)[:, None]
        flat = total.reshape(-1)
        order = torch.sort(flat, descending=True, stable=True).indices
        new_alive: list[Hypothesis] = []
        for idx in order.tolist():
            score = float(flat[idx])
            if score == float("-inf") or len(new_alive) >= width:
                break
            b, tok = divmod(idx, flat.numel() // len(alive))
            h = Hypothesis(alive[b].tokens + [tok], alive[b].logprob + float(lp[b, tok]))
            if tok == EOS:
                h.finished = True
                finished.append(h)
            else:
                new_alive.append(h)
        alive = new_alive
    finished.sort(key=lambda h: -h.score(alpha))
    return finished[:width]


def rescore(model: Model, source: TokenSequence, hyp: Hypothesis, tgt: Modality, cfg: DecodeConfig) -> float:
    """Log-probability of ``hyp`` under the masked model, from one teacher-forced pass."""
    logits = model.full_logits(source, hyp.tokens, tgt)
    total = 0.0
    for pos, tok in enumerate(hyp.tokens[1:]):
        total += float(masked_logprobs(logits[pos], allowed_mask(model.vocab, tgt, pos, cfg))[tok])
    return total


def decode(model: Model, source: TokenSequence, tgt: Modality, cfg: DecodeConfig,
           mode: str = "beam") -> Hypothesis:
    """Best hypothesis for ``source``; raises NoFinishError when nothing reaches EOS."""
    step = model.scorer(source)
    if mode == "greedy":
        hyp = greedy_decode(step, model.vocab, tgt, cfg)
        if not hyp.finished:
            raise NoFinishError(f"no EOS within {cfg.max_len(tgt)} {tgt.name} tokens")
        return hyp
    hyps = beam_search(step, model.vocab, tgt, cfg)
    if not hyps:
        raise NoFinishError(f"no beam reached EOS within {cfg.max_len(tgt)} {tgt.name} tokens")
    return hyps[0]


def translate(model: Model, toks: TokenizerSet, raw, src: Modality, tgt: Modality,
              cfg: DecodeConfig | None = None, mode: str = "beam"):
    """Raw input in one modality to raw output in another."""
    if src == tgt:
        raise ValueError(f"source and target are both {src.name}")
    if toks.vocab != model.vocab:
        raise ConfigError("tokenizer vocabulary does not match the model")
    cfg = cfg or DecodeConfig()
    seq = toks.tokenize(src, raw)
    hyp = decode(model, seq, tgt, cfg, mode)
    return toks.detokenize(hyp.to_sequence(tgt))
