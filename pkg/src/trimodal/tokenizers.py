"""Trainable quantizers (speech frames, image patches) and a BPE text tokenizer."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tokencore import (UNK, Modality, TokenSequence, Vocabulary, build_vocabulary,
                        dedup_runs)

DEFAULT_SPEECH_CAP = 384


class InsufficientDataError(ValueError):
    pass


class SequenceTooLongError(ValueError):
    pass


# ---------------------------------------------------------------- codebooks

@dataclass(frozen=True)
class Codebook:
    centers: np.ndarray  # (k, dim) float64

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError(f"codebook centers must be (k>=1, dim), got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("codebook centers must be finite")
        object.__setattr__(self, "centers", c)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        lines = [f"TMTCB {self.dim} {self.k}"]
        lines += [" ".join(repr(float(x)) for x in row) for row in self.centers]
        path.write_text("\n".join(lines) + "\n", encoding="ascii")

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        path = Path(path)
        rows = path.read_text(encoding="ascii").splitlines()
        head = rows[0].split()
        if len(head) != 3 or head[0] != "TMTCB":
            raise ValueError(f"{path}: not a codebook file")
        dim, k = int(head[1]), int(head[2])
        centers = np.array([[float(x) for x in r.split()] for r in rows[1:1 + k]], dtype=np.float64)
        if centers.shape != (k, dim):
            raise ValueError(f"{path}: expected {k}x{dim} centers, read {centers.shape}")
        return cls(centers)


def _nearest(centers: np.ndarray, x: np.ndarray, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Index of, and squared distance to, the nearest center (first index on ties)."""
    ids = np.empty(len(x), dtype=np.int64)
    d2 = np.empty(len(x), dtype=np.float64)
    for lo in range(0, len(x), chunk):
        diff = x[lo:lo + chunk, None, :] - centers[None, :, :]
        dist = np.einsum("nkd,nkd->nk", diff, diff)
        ids[lo:lo + chunk] = dist.argmin(axis=1)
        d2[lo:lo + chunk] = dist[np.arange(len(dist)), ids[lo:lo + chunk]]
    return ids, d2


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(x), p=d2 / total)
        else:
            # every point already coincides with a center
            idx = rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers, dtype=np.float64)


def train_codebook(vectors, k: int, iters: int = 50, seed: int = 0,
                   history: list[float] | None = None) -> Codebook:
    """Lloyd's k-means with k-means++ seeding.

    If ``history`` is given, the quantization objective (sum of squared
    distances) after each assignment step is appended to it.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(x) < k:
        raise InsufficientDataError(f"need at least k={k} vectors, got {len(x)}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    assign, d2 = _nearest(centers, x)
    if history is not None:
        history.append(float(d2.sum()))
    for _ in range(iters):
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        counts = np.bincount(assign, minlength=k)
        filled = counts > 0
        centers = centers.copy()
        centers[filled] = sums[filled] / counts[filled, None]
        new_assign, d2 = _nearest(centers, x)
        if history is not None:
            history.append(float(d2.sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return Codebook(centers)


def quantize(cb: Codebook, vectors) -> list[int]:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1 and cb.dim == 1:
        x = x[:, None]
    if x.size == 0:
        return []
    if x.ndim != 2 or x.shape[1] != cb.dim:
        raise ValueError(f"frames of dim {x.shape[-1]} do not match codebook dim {cb.dim}")
    return _nearest(cb.centers, x)[0].tolist()


def dequantize(cb: Codebook, ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cb.k):
        raise IndexError(f"ids must lie in [0, {cb.k})")
    return cb.centers[ids].reshape(len(ids), cb.dim)


# ---------------------------------------------------------------- images

@dataclass(frozen=True)
class PatchGrid:
    rows: int = 4
    cols: int = 8
    patch_h: int = 8
    patch_w: int = 4

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    @property
    def height(self) -> int:
        return self.rows * self.patch_h

    @property
    def width(self) -> int:
        return self.cols * self.patch_w

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * 3

    @classmethod
    def for_image(cls, height: int, width: int, rows: int = 4, cols: int = 8) -> "PatchGrid":
        if height % rows or width % cols:
            raise ValueError(f"{height}x{width} image is not divisible into a {rows}x{cols} grid")
        return cls(rows, cols, height // rows, width // cols)


def image_patches(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Row-major patches, each flattened pixel by pixel with RGB kept together."""
    img = np.asarray(image)
    if img.shape != (grid.height, grid.width, 3):
        raise ValueError(f"image shape {img.shape} does not match grid {grid.height}x{grid.width}x3")
    p = img.reshape(grid.rows, grid.patch_h, grid.cols, grid.patch_w, 3)
    return p.transpose(0, 2, 1, 3, 4).reshape(grid.cells, grid.patch_dim).astype(np.float64)


def patches_to_image(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    p = np.clip(np.rint(patches), 0, 255).astype(np.uint8)
    p = p.reshape(grid.rows, grid.cols, grid.patch_h, grid.patch_w, 3).transpose(0, 2, 1, 3, 4)
    return p.reshape(grid.height, grid.width, 3)


# ---------------------------------------------------------------- BPE

_CHUNK = re.compile(r" ?[^ ]+| +")


def _chunks(text: str) -> list[str]:
    return _CHUNK.findall(text)


@dataclass
class BpeModel:
    base_symbols: list[str]
    merges: list[tuple[str, str]]
    vocab: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.vocab = {s: i for i, s in enumerate(self.base_symbols)}
        for left, right in self.merges:
            sym = left + right
            if sym in self.vocab:
                raise ValueError(f"merge {left!r}+{right!r} does not produce a new symbol")
            if left not in self.vocab or right not in self.vocab:
                raise ValueError(f"merge {left!r}+{right!r} uses an unknown symbol")
            self.vocab[sym] = len(self.vocab)
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._symbols = list(self.vocab)

    @property
    def size(self) -> int:
        return len(self.vocab)

    def symbol(self, local_id: int) -> str:
        return self._symbols[local_id]

    def segment(self, text: str) -> list[str]:
        out: list[str] = []
        for chunk in _chunks(text):
            out.extend(self._apply_merges(list(chunk)))
        return out

    def _apply_merges(self, syms: list[str]) -> list[str]:
        while len(syms) > 1:
            ranked = [(self._ranks.get((a, b)), i) for i, (a, b) in enumerate(zip(syms, syms[1:]))]
            ranked = [r for r in ranked if r[0] is not None]
            if not ranked:
                break
            rank = min(ranked)[0]
            pair = self.merges[rank]
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                    merged.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            syms = merged
        return syms

    def save(self, path: str | Path) -> None:
        lines = [f"TMTBPE {len(self.base_symbols)} {len(self.merges)}"]
        lines += [_escape(s) for s in self.base_symbols]
        lines += [f"{_escape(a)} {_escape(b)}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        rows = Path(path).read_text(encoding="utf-8").split("\n")
        head = rows[0].split()
        if len(head) != 3 or head[0] != "TMTBPE":
            raise ValueError(f"{path}: not a BPE file")
        nb, nm = int(head[1]), int(head[2])
        base = [_unescape(r) for r in rows[1:1 + nb]]
        merges = []
        for r in rows[1 + nb:1 + nb + nm]:
            a, b = r.split(" ")
            merges.append((_unescape(a), _unescape(b)))
        return cls(base, merges)


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace(" ", "\\s").replace("\n", "\\n").replace("\t", "\\t")


def _unescape(s: str) -> str:
    out, i = [], 0
    table = {"\\": "\\", "s": " ", "n": "\n", "t": "\t"}
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s):
            out.append(table[s[i + 1]])
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def train_bpe(corpus: Sequence[str], target_vocab: int) -> BpeModel:
    """Greedy pair merging over space-delimited chunks.

    The most frequent adjacent pair is merged each round, ties going to the
    lexicographically smallest pair; training stops at ``target_vocab`` or when
    no pair occurs twice.
    """
    if not corpus:
        raise ValueError("BPE corpus is empty")
    base = sorted({ch for text in corpus for ch in text})
    if target_vocab < len(base):
        raise ValueError(f"target vocab {target_vocab} is below the {len(base)}-character inventory")
    words = Counter(tuple(c) for text in corpus for c in _chunks(text))
    merges: list[tuple[str, str]] = []
    known = set(base)
    while len(base) + len(merges) < target_vocab:
        pairs: Counter = Counter()
        for word, freq in words.items():
            for pair in zip(word, word[1:]):
                pairs[pair] += freq
        candidates = [(-n, p) for p, n in pairs.items() if n >= 2 and p[0] + p[1] not in known]
        if not candidates:
            break
        _, best = min(candidates)
        merges.append(best)
        known.add(best[0] + best[1])
        new_words: Counter = Counter()
        for word, freq in words.items():
            merged, i = [], 0
            while i < len(word):
                if i + 1 < len(word) and (word[i], word[i + 1]) == best:
                    merged.append(word[i] + word[i + 1])
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            new_words[tuple(merged)] += freq
        words = new_words
    return BpeModel(base, merges)


REPLACEMENT = "\ufffd"


def encode_text(model: BpeModel, text: str, vocab: Vocabulary) -> TokenSequence:
    toks = []
    for sym in model.segment(text):
        local = model.vocab.get(sym)
        toks.append(UNK if local is None else vocab.local_to_global(Modality.TEXT, local))
    return TokenSequence(Modality.TEXT, tuple(toks))


def decode_text(model: BpeModel, seq: TokenSequence, vocab: Vocabulary) -> str:
    if seq.modality != Modality.TEXT:
        raise ValueError(f"cannot decode a {seq.modality.name} sequence as text")
    out = []
    for tok in seq.tokens:
        if tok == UNK:
            out.append(REPLACEMENT)
        elif tok < vocab.special_count:
            continue
        else:
            out.append(model.symbol(vocab.global_to_local(tok)[1]))
    return "".join(out)


# ---------------------------------------------------------------- modality pipelines

def tokenize_speech(cb: Codebook, features, vocab: Vocabulary,
                    cap: int = DEFAULT_SPEECH_CAP) -> TokenSequence:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 1:
        raise ValueError("speech features must be a non-empty frames x dim array")
    ids = quantize(cb, feats)
    seq = dedup_runs(TokenSequence(Modality.SPEECH, tuple(ids)))
    if len(seq) > cap:
        raise SequenceTooLongError(f"speech sequence has {len(seq)} tokens after dedup, cap is {cap}")
    return TokenSequence(Modality.SPEECH,
                         tuple(vocab.local_to_global(Modality.SPEECH, t) for t in seq.tokens))


def detokenize_speech(cb: Codebook, seq: TokenSequence, vocab: Vocabulary) -> np.ndarray:
    """One feature frame per token; durations are not recoverable after dedup."""
    if seq.modality != Modality.SPEECH:
        raise ValueError(f"expected a SPEECH sequence, got {seq.modality.name}")
    return dequantize(cb, [vocab.global_to_local(t)[1] for t in seq.tokens])


def tokenize_image(cb: Codebook, image, grid: PatchGrid, vocab: Vocabulary) -> TokenSequence:
    ids = quantize(cb, image_patches(image, grid))
    return TokenSequence(Modality.IMAGE, tuple(vocab.local_to_global(Modality.IMAGE, t) for t in ids))


def detokenize_image(cb: Codebook, seq: TokenSequence, grid: PatchGrid, vocab: Vocabulary) -> np.ndarray:
    if seq.modality != Modality.IMAGE or len(seq) != grid.cells:
        raise ValueError(f"need {grid.cells} IMAGE tokens, got {len(seq)} {seq.modality.name} tokens")
    return patches_to_image(dequantize(cb, [vocab.global_to_local(t)[1] for t in seq.tokens]), grid)


@dataclass
class TokenizerSet:
    """The three trained tokenizers plus the vocabulary they jointly define."""

    image_cb: Codebook
    speech_cb: Codebook
    bpe: BpeModel
    grid: PatchGrid = field(default_factory=PatchGrid)
    speech_cap: int = DEFAULT_SPEECH_CAP

    def __post_init__(self):
        if self.image_cb.dim != self.grid.patch_dim:
            raise ValueError(f"image codebook dim {self.image_cb.dim} != patch dim {self.grid.patch_dim}")
        self.vocab = build_vocabulary(self.image_cb.k, self.speech_cb.k, self.bpe.size)

    def tokenize(self, modality: Modality, raw) -> TokenSequence:
        if modality == Modality.IMAGE:
            return tokenize_image(self.image_cb, raw, self.grid, self.vocab)
        if modality == Modality.SPEECH:
            return tokenize_speech(self.speech_cb, raw, self.vocab, self.speech_cap)
        return encode_text(self.bpe, raw, self.vocab)

    def detokenize(self, seq: TokenSequence):
        if seq.modality == Modality.IMAGE:
            return detokenize_image(self.image_cb, seq, self.grid, self.vocab)
        if seq.modality == Modality.SPEECH:
            return detokenize_speech(self.speech_cb, seq, self.vocab)
        return decode_text(self.bpe, seq, self.vocab)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.image_cb.save(d / "image.cb")
        self.speech_cb.save(d / "speech.cb")
        self.bpe.save(d / "text.bpe")
        g = self.grid
        (d / "tokenizers.cfg").write_text(
            f"grid_rows={g.rows}\ngrid_cols={g.cols}\npatch_h={g.patch_h}\npatch_w={g.patch_w}\n"
            f"speech_cap={self.speech_cap}\n", encoding="ascii")

    @classmethod
    def load(cls, directory: str | Path) -> "TokenizerSet":
        d = Path(directory)
        cfg = dict(line.split("=", 1) for line in (d / "tokenizers.cfg").read_text().split())
        grid = PatchGrid(int(cfg["grid_rows"]), int(cfg["grid_cols"]), int(cfg["patch_h"]), int(cfg["patch_w"]))
        return cls(Codebook.load(d / "image.cb"), Codebook.load(d / "speech.cb"),
                   BpeModel.load(d / "text.bpe"), grid, int(cfg["speech_cap"]))
