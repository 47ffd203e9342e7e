"""Unified token space shared by the image, speech and text modalities."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_COUNT = 4
SPECIAL_NAMES = ("<pad>", "<bos>", "<eos>", "<unk>")


class Modality(enum.IntEnum):
    IMAGE = 0
    SPEECH = 1
    TEXT = 2

    @property
    def letter(self) -> str:
        return "ist"[self.value]

    @classmethod
    def from_letter(cls, letter: str) -> "Modality":
        try:
            return cls("ist".index(letter))
        except ValueError:
            raise ValueError(f"unknown modality letter {letter!r}") from None


MODALITIES = (Modality.IMAGE, Modality.SPEECH, Modality.TEXT)


def all_directions() -> list[tuple[Modality, Modality]]:
    """The six ordered (source, target) pairs with source != target."""
    return [(k, m) for k in MODALITIES for m in MODALITIES if k != m]


def direction_name(src: Modality, tgt: Modality) -> str:
    return f"{src.letter}2{tgt.letter}"


def parse_direction(name: str) -> tuple[Modality, Modality]:
    if len(name) != 3 or name[1] != "2":
        raise ValueError(f"bad direction {name!r}, expected e.g. 's2t'")
    src, tgt = Modality.from_letter(name[0]), Modality.from_letter(name[2])
    if src == tgt:
        raise ValueError(f"direction {name!r} maps a modality onto itself")
    return src, tgt


@dataclass(frozen=True)
class Vocabulary:
    sizes: tuple[int, int, int]
    special_count: int = SPECIAL_COUNT

    def __post_init__(self):
        if len(self.sizes) != 3 or any(int(s) < 1 for s in self.sizes):
            raise ValueError(f"every modality vocabulary needs size >= 1, got {self.sizes}")

    @property
    def offsets(self) -> tuple[int, int, int]:
        vi, vs, _ = self.sizes
        o = self.special_count
        return (o, o + vi, o + vi + vs)

    @property
    def total(self) -> int:
        return self.special_count + sum(self.sizes)

    def size(self, m: Modality) -> int:
        return self.sizes[m]

    def range(self, m: Modality) -> range:
        start = self.offsets[m]
        return range(start, start + self.sizes[m])

    def local_to_global(self, m: Modality, local_id: int) -> int:
        if not 0 <= local_id < self.sizes[m]:
            raise IndexError(f"local id {local_id} outside {m.name} vocabulary of size {self.sizes[m]}")
        return self.offsets[m] + local_id

    def global_to_local(self, global_id: int) -> tuple[Modality, int]:
        if 0 <= global_id < self.special_count:
            raise ValueError(f"id {global_id} is a special token, not owned by a modality")
        for m in reversed(MODALITIES):
            if global_id >= self.offsets[m]:
                if global_id - self.offsets[m] >= self.sizes[m]:
                    break
                return m, global_id - self.offsets[m]
        raise ValueError(f"id {global_id} outside vocabulary of size {self.total}")

    def modality_of(self, global_id: int) -> Modality | None:
        if global_id < self.special_count:
            return None
        return self.global_to_local(global_id)[0]


def build_vocabulary(v_image: int, v_speech: int, v_text: int) -> Vocabulary:
    return Vocabulary((int(v_image), int(v_speech), int(v_text)))


@dataclass(frozen=True)
class TokenSequence:
    modality: Modality
    tokens: tuple[int, ...]

    def __len__(self):
        return len(self.tokens)

    def validate(self, vocab: Vocabulary) -> None:
        rng = vocab.range(self.modality)
        last = len(self.tokens) - 1
        for pos, tok in enumerate(self.tokens):
            if tok in rng:
                continue
            if tok < vocab.special_count and pos in (0, last):
                continue
            if tok == UNK and self.modality == Modality.TEXT:
                continue
            raise ValueError(f"token {tok} at position {pos} is outside the {self.modality.name} range")


def dedup_runs(seq: TokenSequence) -> TokenSequence:
    out: list[int] = []
    for tok in seq.tokens:
        if not out or out[-1] != tok:
            out.append(tok)
    return TokenSequence(seq.modality, tuple(out))


@dataclass(frozen=True)
class BitsReport:
    audio_raw_bits: int
    speech_token_bits: float
    speech_ratio_pct: float | None
    image_raw_bits: int
    image_token_bits: int
    image_ratio_pct: float
    speech_bits_per_token: int
    image_bits_per_token: int

    def lines(self) -> list[str]:
        sr = "undefined" if self.speech_ratio_pct is None else f"{self.speech_ratio_pct:.5f}%"
        return [
            f"speech raw_bits={self.audio_raw_bits} token_bits={self.speech_token_bits:g} "
            f"bits_per_token={self.speech_bits_per_token} ratio={sr}",
            f"image raw_bits={self.image_raw_bits} token_bits={self.image_token_bits} "
            f"bits_per_token={self.image_bits_per_token} ratio={self.image_ratio_pct:.5f}%",
        ]


def token_bit_width(vocab_size: int) -> int:
    return max(1, math.ceil(math.log2(vocab_size)))


def bits_report(audio_seconds: float, token_rate: float, speech_vocab: int,
                image_hw: tuple[int, int], image_tokens: int, image_vocab: int,
                sample_rate: int = 16000, sample_bits: int = 16) -> BitsReport:
    """Storage cost of raw signals versus their token sequences.

    Raw audio is ``sample_rate * seconds * sample_bits``; a raw RGB image is
    ``H * W * 3 * 8``. Each token costs ``ceil(log2(vocab))`` bits.
    """
    sb = token_bit_width(speech_vocab)
    ib = token_bit_width(image_vocab)
    audio_raw = int(round(sample_rate * audio_seconds * sample_bits))
    speech_tok = token_rate * audio_seconds * sb
    speech_pct = 100.0 * speech_tok / audio_raw if audio_raw > 0 else None
    h, w = image_hw
    image_raw = h * w * 3 * 8
    image_tok = image_tokens * ib
    return BitsReport(audio_raw, speech_tok, speech_pct, image_raw, image_tok,
                      100.0 * image_tok / image_raw, sb, ib)


# token corpus file: "<id>\t<i|s|t>\t<ids...>"

def write_token_corpus(path: str | Path, records: Iterable[tuple[str, TokenSequence]]) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            for ex_id, seq in records:
                fh.write(f"{ex_id}\t{seq.modality.letter}\t{' '.join(map(str, seq.tokens))}\n")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_token_corpus(path: str | Path) -> list[tuple[str, TokenSequence]]:
    path = Path(path)
    out = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            toks = tuple(int(t) for t in parts[2].split())
            out.append((parts[0], TokenSequence(Modality.from_letter(parts[1]), toks)))
    return out


def group_examples(records: Sequence[tuple[str, TokenSequence]]) -> dict[str, dict[Modality, TokenSequence]]:
    """Collect corpus lines into {id: {modality: sequence}}, keeping file order."""
    grouped: dict[str, dict[Modality, TokenSequence]] = {}
    for ex_id, seq in records:
        grouped.setdefault(ex_id, {})[seq.modality] = seq
    return grouped
