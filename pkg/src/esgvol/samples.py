"""Access to the packaged sample vocabulary, lexicon, and ticker dictionary."""

from __future__ import annotations

from importlib import resources

from .features import SentimentLexicon, load_lexicon
from .newsflow import EsgVocabulary, TickerDictionary, load_ticker_dictionary, load_vocabulary


def _read(name: str) -> str:
    return (resources.files("esgvol") / "data" / name).read_text(encoding="utf-8")


def vocabulary_csv() -> str:
    return _read("esg_vocabulary.csv")


def lexicon_csv() -> str:
    return _read("sentiment_lexicon.csv")


def ticker_dictionary_csv() -> str:
    return _read("ticker_dictionary.csv")


def sample_vocabulary() -> EsgVocabulary:
    return load_vocabulary(vocabulary_csv())


def sample_lexicon() -> SentimentLexicon:
    return load_lexicon(lexicon_csv())


def sample_ticker_dictionary() -> TickerDictionary:
    return load_ticker_dictionary(ticker_dictionary_csv())
