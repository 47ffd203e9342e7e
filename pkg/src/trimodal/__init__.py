"""Translate between image, speech and text by treating each as a token language."""

from .tokencore import (BOS, EOS, PAD, UNK, Modality, TokenSequence, Vocabulary,
                        all_directions, bits_report, build_vocabulary, dedup_runs)

__all__ = ["BOS", "EOS", "PAD", "UNK", "Modality", "TokenSequence", "Vocabulary",
           "all_directions", "bits_report", "build_vocabulary", "dedup_runs"]
__version__ = "0.1.0"
