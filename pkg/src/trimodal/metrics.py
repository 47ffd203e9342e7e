"""Caption and recognition metrics, plus per-direction evaluation reports."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decode import DecodeConfig, Model, NoFinishError, decode
from .synthworld import speech_frames_to_text
from .tokencore import Modality, TokenSequence, direction_name
from .tokenizers import TokenizerSet, dequantize

ROUGE_BETA = 1.2


@dataclass(frozen=True)
class ScoredPair:
    hypothesis: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError("a scored pair needs at least one reference")

    @classmethod
    def of(cls, hyp: str | Sequence[str], *refs: str | Sequence[str]) -> "ScoredPair":
        def words(x):
            return tuple(x.split()) if isinstance(x, str) else tuple(x)
        return cls(words(hyp), tuple(words(r) for r in refs))


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(pair: ScoredPair, n: int) -> tuple[int, int]:
    """Clipped n-gram matches and the hypothesis n-gram total."""
    hyp = ngrams(pair.hypothesis, n)
    max_ref: Counter = Counter()
    for ref in pair.references:
        for g, c in ngrams(ref, n).items():
            max_ref[g] = max(max_ref[g], c)
    clipped = sum(min(c, max_ref[g]) for g, c in hyp.items())
    return clipped, sum(hyp.values())


def closest_ref_length(pair: ScoredPair) -> int:
    c = len(pair.hypothesis)
    return min((abs(len(r) - c), len(r)) for r in pair.references)[1]


def bleu4(pair: ScoredPair) -> float:
    """Sentence BLEU-4 without smoothing, closest-reference brevity penalty."""
    c = len(pair.hypothesis)
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        match, total = modified_precision(pair, n)
        if match == 0:
            return 0.0
        log_p += math.log(match / total) / 4
    r = closest_ref_length(pair)
    return math.exp(min(0.0, 1 - r / c)) * math.exp(log_p)


def corpus_bleu4(pairs: Sequence[ScoredPair]) -> float:
    """Corpus BLEU-4: clipped counts and lengths summed over all pairs before combining.

    This is the figure captioning and MT toolkits report. Averaging sentence
    scores instead zeroes every hypothesis shorter than four tokens.
    """
    c = sum(len(p.hypothesis) for p in pairs)
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        match = total = 0
        for p in pairs:
            m, t = modified_precision(p, n)
            match, total = match + m, total + t
        if match == 0:
            return 0.0
        log_p += math.log(match / total) / 4
    r = sum(closest_ref_length(p) for p in pairs)
    return math.exp(min(0.0, 1 - r / c)) * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pair: ScoredPair, beta: float = ROUGE_BETA) -> float:
    if not pair.hypothesis:
        return 0.0
    best = 0.0
    for ref in pair.references:
        lcs = lcs_length(pair.hypothesis, ref)
        if lcs == 0 or not ref:
            continue
        p, r = lcs / len(pair.hypothesis), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * r * p / (r + beta ** 2 * p))
    return best


def _tfidf(counts: Counter, idf: dict, n_docs: int) -> dict:
    total = sum(counts.values())
    if not total:
        return {}
    return {g: (c / total) * idf.get(g, math.log(n_docs)) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider(corpus: Sequence[ScoredPair]) -> list[float]:
    """CIDEr (not CIDEr-D) per pair; document frequencies come from the corpus references."""
    n_docs = len(corpus)
    if n_docs == 0:
        return []
    scores = np.zeros(n_docs)
    for n in range(1, 5):
        df: Counter = Counter()
        for pair in corpus:
            seen = set()
            for ref in pair.references:
                seen.update(ngrams(ref, n))
            df.update(seen)
        idf = {g: math.log(n_docs / d) for g, d in df.items()}
        for i, pair in enumerate(corpus):
            hv = _tfidf(ngrams(pair.hypothesis, n), idf, n_docs)
            sims = [_cosine(hv, _tfidf(ngrams(ref, n), idf, n_docs)) for ref in pair.references]
            scores[i] += float(np.mean(sims)) / 4
    return [10.0 * s for s in scores]


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(pair: ScoredPair) -> float:
    if len(pair.references) != 1:
        raise ValueError("WER takes exactly one reference")
    ref = pair.references[0]
    if not ref:
        raise ValueError("WER reference is empty")
    return edit_distance(ref, pair.hypothesis) / len(ref)


# ---------------------------------------------------------------- evaluation

def transcribe_speech(toks: TokenizerSet, seq: TokenSequence) -> str:
    """Speech tokens back to characters through the zero-noise prototype inverse."""
    if not seq.tokens:
        return ""
    local = [toks.vocab.global_to_local(t)[1] for t in seq.tokens]
    return speech_frames_to_text(dequantize(toks.speech_cb, local))


def render_output(toks: TokenizerSet, seq: TokenSequence) -> str:
    """Printable form of a decoded sequence, as written to prediction dumps."""
    if seq.modality == Modality.TEXT:
        return toks.detokenize(seq)
    if seq.modality == Modality.SPEECH:
        return transcribe_speech(toks, seq)
    return " ".join(str(toks.vocab.global_to_local(t)[1]) for t in seq.tokens)


def patch_cosine(toks: TokenizerSet, hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Mean cosine between hypothesis and reference patch centers, centred at mid-gray."""
    n = len(ref)
    sims = []
    for i in range(n):
        if i >= len(hyp):
            sims.append(0.0)
            continue
        a = toks.image_cb.centers[hyp[i]] - 127.5
        b = toks.image_cb.centers[ref[i]] - 127.5
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        sims.append(float(a @ b / (na * nb)) if na and nb else 0.0)
    return float(np.mean(sims))


def token_accuracy(hyp: Sequence[int], ref: Sequence[int]) -> float:
    return sum(1 for i, r in enumerate(ref) if i < len(hyp) and hyp[i] == r) / len(ref)


@dataclass
class DirectionReport:
    direction: str
    n: int
    failed: int = 0
    scores: dict[str, float] = field(default_factory=dict)
    predictions: list[tuple[str, str]] = field(default_factory=list)

    def kv_block(self) -> str:
        lines = [f"[{self.direction}]", f"n={self.n}", f"failed={self.failed}"]
        lines += [f"{k}={v:.6f}" for k, v in self.scores.items()]
        return "\n".join(lines)


def score_outputs(target: Modality, hyps: Sequence[str], refs: Sequence[str]) -> dict[str, float]:
    """Metric columns for rendered outputs against rendered references."""
    if target == Modality.IMAGE:
        return {"token_acc": float(np.mean([token_accuracy(h.split(), r.split()) for h, r in zip(hyps, refs)]))}
    pairs = [ScoredPair.of(h, r) for h, r in zip(hyps, refs)]
    out = {
        "bleu4": corpus_bleu4(pairs),
        "rouge_l": float(np.mean([rouge_l(p) for p in pairs])),
        "cider": float(np.mean(cider(pairs))),
        "wer": float(np.mean([wer(p) for p in pairs])),
    }
    return out


def evaluate_direction(model: Model, toks: TokenizerSet, test: dict[str, dict[Modality, TokenSequence]],
                       direction, cfg: DecodeConfig | None = None, mode: str = "beam") -> DirectionReport:
    """Decode every test example in one direction and score the outputs.

    Failed decodes (no EOS) are scored as empty outputs and counted.
    """
    src_m, tgt_m = direction
    if src_m == tgt_m:
        raise ValueError(f"invalid direction {direction_name(src_m, tgt_m)}")
    cfg = cfg or DecodeConfig()
    name = direction_name(src_m, tgt_m)
    report = DirectionReport(name, 0)
    hyps, refs, cos = [], [], []
    for ex_id, views in test.items():
        if src_m not in views or tgt_m not in views:
            continue
        report.n += 1
        try:
            out = decode(model, views[src_m], tgt_m, cfg, mode).to_sequence(tgt_m)
        except NoFinishError:
            report.failed += 1
            out = TokenSequence(tgt_m, ())
        hyp_s, ref_s = render_output(toks, out), render_output(toks, views[tgt_m])
        hyps.append(hyp_s)
        refs.append(ref_s)
        report.predictions.append((ex_id, hyp_s))
        if tgt_m == Modality.IMAGE:
            cos.append(patch_cosine(toks, [toks.vocab.global_to_local(t)[1] for t in out.tokens],
                                    [toks.vocab.global_to_local(t)[1] for t in views[tgt_m].tokens]))
    if report.n:
        report.scores = score_outputs(tgt_m, hyps, refs)
        if tgt_m == Modality.IMAGE:
            report.scores["patch_cos"] = float(np.mean(cos))
    return report


COLUMNS = ("bleu4", "rouge_l", "cider", "wer", "token_acc", "patch_cos")
HEADERS = {"bleu4": "BLEU-4", "rouge_l": "ROUGE-L", "cider": "CIDEr", "wer": "WER",
           "token_acc": "TokAcc", "patch_cos": "PatchCos*"}


def _cell(scores: dict, key: str) -> str:
    if key not in scores:
        return "-"
    if key == "cider":
        return f"{scores[key]:.3f} ({100 * scores[key]:.1f})"
    return f"{scores[key]:.4f}"


def format_table(rows: Sequence[tuple[str, str, dict]], first: str = "Direction", second: str = "Method") -> str:
    header = [first, second] + [HEADERS[c] for c in COLUMNS]
    body = [[a, b] + [_cell(s, c) for c in COLUMNS] for a, b, s in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
    return "\n".join(lines)


FOOTNOTE = ("CIDEr shown raw with x100 in parentheses. *PatchCos is a codebook patch-embedding "
            "cosine, a stand-in for CLIP score and not comparable to it.")


def format_report(reports: Sequence[DirectionReport], method: str = "unified") -> str:
    rows = [(r.direction, method, r.scores) for r in reports]
    parts = [format_table(rows), "", FOOTNOTE, ""]
    parts += [r.kv_block() + "\n" for r in reports]
    return "\n".join(parts)


def format_comparison(single: Sequence[DirectionReport], unified: Sequence[DirectionReport]) -> str:
    """Single-task versus unified rows per direction."""
    by_dir = {r.direction: r for r in single}
    rows = []
    for u in unified:
        if u.direction in by_dir:
            rows.append((u.direction, "single", by_dir[u.direction].scores))
        rows.append((u.direction, "unified", u.scores))
    blocks = []
    for tag, reps in (("single", single), ("unified", unified)):
        for r in reps:
            blocks.append(r.kv_block().replace("[", f"[{tag}.", 1))
    return "\n".join([format_table(rows), "", FOOTNOTE, ""] + [b + "\n" for b in blocks])


def write_predictions(path, reports: Sequence[DirectionReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            for ex_id, out in r.predictions:
                fh.write(f"{ex_id}\t{r.direction}\t{out}\n")


def read_predictions(path) -> dict[str, list[tuple[str, str]]]:
    out: dict[str, list[tuple[str, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            ex_id, direction, text = line.rstrip("\n").split("\t")
            out.setdefault(direction, []).append((ex_id, text))
    return out
