"""Tokenization and sentence splitting shared by news filtering and featurization.

A single tokenizer is used everywhere phrases, aliases, and news text meet,
so that gazetteer matching and feature hashing agree on token boundaries.
"""

from __future__ import annotations

import re

# Unicode alphanumeric runs; underscores and hyphens split ("t-mobile" -> t, mobile).
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

# Sentence terminator: run of ./!/? followed by whitespace or end of text.
_SENTENCE_RE = re.compile(r"[.!?]+(?:\s+|$)")


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric tokens in text order.

    >>> tokenize("T-Mobile's CEO")
    ['t', 'mobile', 's', 'ceo']
    """
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    """Split on sentence terminators, dropping empty segments.

    Text without any terminator is returned whole as a single segment.
    """
    segments = [seg.strip() for seg in _SENTENCE_RE.split(text)]
    return [seg for seg in segments if seg]


def contains_phrase(tokens: list[str] | tuple[str, ...], phrase: tuple[str, ...]) -> bool:
    """True when ``phrase`` occurs as a contiguous subsequence of ``tokens``."""
    n = len(phrase)
    if n == 0 or n > len(tokens):
        return False
    return any(tuple(tokens[i : i + n]) == phrase for i in range(len(tokens) - n + 1))
