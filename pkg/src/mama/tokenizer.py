"""Word-level hashing tokenizer with reserved CLS/SEP/PAD ids."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

import numpy as np

from .captions import Caption

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
NUM_RESERVED = 3

_WORD = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*|[^\sa-z0-9]")


@dataclass(frozen=True)
class TokenizedText:
    ids: tuple[int, ...]
    n_sentences: int


class HashTokenizer:
    """Maps lowercase words to ``vocab_size`` buckets via CRC32.

    Every sentence is terminated by a SEP token; the sequence opens with CLS.
    Sentences that would overflow ``max_tokens`` are dropped whole, so the
    SEP count always equals the number of sentences kept.
    """

    def __init__(self, vocab_size: int = 4096, max_tokens: int = 128):
        if vocab_size <= NUM_RESERVED:
            raise ValueError("vocab_size must exceed the reserved ids")
        if max_tokens < 3:
            raise ValueError("max_tokens must be at least 3")
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens

    def word_id(self, word: str) -> int:
        return NUM_RESERVED + zlib.crc32(word.encode("utf-8")) % (self.vocab_size - NUM_RESERVED)

    def words(self, sentence: str) -> list[str]:
        sentence = sentence.strip()
        if sentence and sentence[-1] in ".!?":
            sentence = sentence[:-1]
        return _WORD.findall(sentence.lower())

    def encode_sentences(self, sentences) -> TokenizedText:
        ids = [CLS_ID]
        kept = 0
        for sent in sentences:
            words = [self.word_id(w) for w in self.words(sent)]
            if len(ids) + len(words) + 1 > self.max_tokens:
                if kept == 0:
                    words = words[: self.max_tokens - 2]
                else:
                    break
            ids.extend(words)
            ids.append(SEP_ID)
            kept += 1
        return TokenizedText(tuple(ids), kept)

    def encode(self, caption: Caption | str) -> TokenizedText:
        if isinstance(caption, Caption):
            return self.encode_sentences(caption.sentences)
        from .captions import split_sentences
        return self.encode_sentences([caption[a:b] for a, b in split_sentences(caption)])

    def batch(self, captions) -> tuple[np.ndarray, np.ndarray]:
        """Right-padded id matrix and per-row sentence counts."""
        encoded = [self.encode(c) for c in captions]
        width = max(len(e.ids) for e in encoded)
        ids = np.full((len(encoded), width), PAD_ID, dtype=np.int64)
        for i, e in enumerate(encoded):
            ids[i, : len(e.ids)] = e.ids
        return ids, np.array([e.n_sentences for e in encoded], dtype=np.int64)
