"""Thresholded caption vocabulary with start/end/unknown conventions.

Token ids: ``<start>`` = 0, ``<end>`` = 1, ``<unk>`` = 2, corpus words from
3 upward in first-appearance order.  A word enters the vocabulary when its
raw token count over the whole corpus reaches the threshold.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import DataError

START_TOKEN = "<start>"
END_TOKEN = "<end>"
UNK_TOKEN = "<unk>"
START_INDEX = 0
END_INDEX = 1
UNK_INDEX = 2

# Punctuation split off word boundaries as standalone tokens.
_PUNCT = set(".,!?;:'\"()")


def tokenize_words(text: str) -> list[str]:
    """Lowercase and split into word/punctuation tokens.

    Leading and trailing punctuation characters become their own tokens
    ("music." -> ["music", "."]); interior punctuation is left alone
    ("don't" stays one token).
    """
    words: list[str] = []
    for piece in text.lower().split():
        lead: list[str] = []
        trail: list[str] = []
        while piece and piece[0] in _PUNCT:
            lead.append(piece[0])
            piece = piece[1:]
        while piece and piece[-1] in _PUNCT:
            trail.insert(0, piece[-1])
            piece = piece[:-1]
        words.extend(lead)
        if piece:
            words.append(piece)
        words.extend(trail)
    return words


class Vocabulary:
    """Bidirectional word <-> index mapping, immutable after build."""

    def __init__(self, words: list[str], threshold: int):
        specials = [START_TOKEN, END_TOKEN, UNK_TOKEN]
        self.index_to_word: list[str] = specials + list(words)
        self.word_to_index: dict[str, int] = {w: i for i, w in enumerate(self.index_to_word)}
        self.threshold = threshold
        if len(self.word_to_index) != len(self.index_to_word):
            raise DataError("vocabulary contains duplicate words")

    def __len__(self) -> int:
        return len(self.index_to_word)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_index

    @classmethod
    def build(cls, captions: list[str], threshold: int = 4) -> "Vocabulary":
        """Count tokens over the corpus and keep words with count >= threshold."""
        if threshold < 1:
            raise DataError(f"vocab threshold must be >= 1, got {threshold}")
        if not captions:
            raise DataError("cannot build a vocabulary from an empty corpus")
        counts: dict[str, int] = {}
        order: list[str] = []
        for caption in captions:
            for word in tokenize_words(caption):
                if word not in counts:
                    counts[word] = 0
                    order.append(word)
                counts[word] += 1
        kept = [w for w in order if counts[w] >= threshold]
        return cls(kept, threshold)

    def tokenize(self, caption: str) -> list[int]:
        """Encode a caption as [0, ids..., 1]; unknown words map to <unk>."""
        ids = [self.word_to_index.get(w, UNK_INDEX) for w in tokenize_words(caption)]
        return [START_INDEX] + ids + [END_INDEX]

    def detokenize(self, tokens: list[int]) -> str:
        """Render token ids back to text, omitting start/end markers."""
        words = []
        for t in tokens:
            t = int(t)
            if t < 0 or t >= len(self.index_to_word):
                raise DataError(f"token index {t} out of range for vocabulary of size {len(self)}")
            if t in (START_INDEX, END_INDEX):
                continue
            words.append(self.index_to_word[t])
        return " ".join(words)

    def words_of(self, tokens: list[int]) -> list[str]:
        """Word list for metric computation (start/end markers dropped)."""
        rendered = self.detokenize(tokens)
        return rendered.split() if rendered else []

    def serialize(self) -> str:
        lines = [f"threshold\t{self.threshold}"]
        lines += [f"{i}\t{w}" for i, w in enumerate(self.index_to_word)]
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"vocabulary file not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("threshold\t"):
            raise DataError(f"{path}: missing threshold header line")
        try:
            threshold = int(lines[0].split("\t", 1)[1])
        except ValueError:
            raise DataError(f"{path}: bad threshold header") from None
        entries: list[str] = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'index\\tword'")
            idx, word = int(parts[0]), parts[1]
            if idx != len(entries):
                raise DataError(f"{path}:{lineno}: non-contiguous index {idx}")
            entries.append(word)
        if entries[:3] != [START_TOKEN, END_TOKEN, UNK_TOKEN]:
            raise DataError(f"{path}: special tokens corrupted: {entries[:3]}")
        vocab = cls(entries[3:], threshold)
        # Inverse-mapping invariant: every listed word maps back to its line.
        for i, w in enumerate(entries):
            if vocab.word_to_index.get(w) != i:
                raise DataError(f"{path}: word {w!r} does not round-trip (duplicate entry?)")
        return vocab
