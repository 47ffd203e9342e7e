"""Tokenized corpora and per-direction pair pools."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .seeding import derive_seed
from .synthworld import TriModalExample
from .tokencore import (MODALITIES, Modality, TokenSequence, Vocabulary, all_directions)
from .tokenizers import (PatchGrid, TokenizerSet, image_patches, train_bpe, train_codebook)

Record = tuple[str, TokenSequence]


def train_tokenizers(examples: Sequence[TriModalExample], image_vocab: int = 256,
                     speech_vocab: int = 200, text_vocab: int = 200, seed: int = 0,
                     iters: int = 25, grid: PatchGrid | None = None,
                     speech_cap: int = 384) -> TokenizerSet:
    if not examples:
        raise ValueError("no examples to train tokenizers on")
    grid = grid or PatchGrid.for_image(*examples[0].image.shape[:2])
    patches = np.concatenate([image_patches(ex.image, grid) for ex in examples])
    frames = np.concatenate([ex.speech_features for ex in examples]).astype(np.float64)
    image_cb = train_codebook(patches, image_vocab, iters, derive_seed(seed, "image-codebook"))
    speech_cb = train_codebook(frames, speech_vocab, iters, derive_seed(seed, "speech-codebook"))
    bpe = train_bpe([ex.text for ex in examples], text_vocab)
    return TokenizerSet(image_cb, speech_cb, bpe, grid, speech_cap)


def tokenize_examples(toks: TokenizerSet, examples: Iterable[TriModalExample]) -> list[Record]:
    """Three records (image, speech, text) per example, in corpus-file order."""
    out: list[Record] = []
    for ex in examples:
        out.append((ex.id, toks.tokenize(Modality.IMAGE, ex.image)))
        out.append((ex.id, toks.tokenize(Modality.SPEECH, ex.speech_features)))
        out.append((ex.id, toks.tokenize(Modality.TEXT, ex.text)))
    return out


def check_records(records: Iterable[Record], vocab: Vocabulary) -> None:
    for ex_id, seq in records:
        try:
            seq.validate(vocab)
        except ValueError as exc:
            raise VocabularyMismatchError(f"{ex_id}: {exc}") from None


class VocabularyMismatchError(ValueError):
    pass


@dataclass
class PairPool:
    """(source, target) pairs available to each translation direction."""

    pairs: dict[tuple[Modality, Modality], list[tuple[str, TokenSequence, TokenSequence]]] = field(
        default_factory=lambda: {d: [] for d in all_directions()})

    @classmethod
    def from_records(cls, records: Sequence[Record]) -> "PairPool":
        """Aligned examples feed all six directions; ``bt-`` examples only feed
        pseudo-source -> real-target (their first line is the pseudo source)."""
        pool = cls()
        pool.add_records(records)
        return pool

    def add_records(self, records: Sequence[Record]) -> None:
        ordered: dict[str, list[TokenSequence]] = {}
        for ex_id, seq in records:
            ordered.setdefault(ex_id, []).append(seq)
        for ex_id, seqs in ordered.items():
            if ex_id.startswith("bt-"):
                if len(seqs) != 2:
                    raise ValueError(f"back-translated example {ex_id} needs exactly two lines")
                src, tgt = seqs
                self.pairs[(src.modality, tgt.modality)].append((ex_id, src, tgt))
                continue
            by_mod = {s.modality: s for s in seqs}
            for k, m in all_directions():
                if k in by_mod and m in by_mod:
                    self.pairs[(k, m)].append((ex_id, by_mod[k], by_mod[m]))

    def merged(self, other: "PairPool") -> "PairPool":
        out = PairPool()
        for d in all_directions():
            out.pairs[d] = list(self.pairs[d]) + list(other.pairs[d])
        return out

    def __len__(self):
        return sum(len(v) for v in self.pairs.values())

    def sizes(self) -> dict[tuple[Modality, Modality], int]:
        return {d: len(v) for d, v in self.pairs.items()}


def target_only(records: Sequence[Record], modality: Modality) -> list[Record]:
    return [(i, s) for i, s in records if s.modality == modality]


__all__ = ["PairPool", "Record", "train_tokenizers", "tokenize_examples", "check_records",
           "VocabularyMismatchError", "target_only", "MODALITIES"]
