import io
import json
from datetime import datetime, timezone

import numpy as np
import pytest

from esgvol.newsflow import (
    EsgNewsItem,
    NewsItem,
    esg_filter,
    link_tickers,
    load_ticker_dictionary,
    load_vocabulary,
    parse_news_stream,
    parse_timestamp,
    read_filtered,
    topic_histogram,
    with_tickers,
    write_filtered,
)
from esgvol.text import tokenize

VOCAB = load_vocabulary(
    "phrase,topic,pillar\n"
    "co2 emissions,Emissions,E\n"
    "child labor,Labor Practices,S\n"
    "labor strike,Labor Relations,S\n"
    "insider trading,Business Ethics,G\n"
)

TICKERS = load_ticker_dictionary(
    "ticker,alias,market\n"
    "TMUS,t-mobile,US\n"
    "TMUS,t mobile us,US\n"
    "AAPL,apple,US\n"
)


def ts(text: str) -> datetime:
    return parse_timestamp(text)


def item(id: str, text: str, stamp: str = "2020-04-06T09:00:00Z", tickers=None) -> NewsItem:
    return NewsItem(id=id, timestamp=ts(stamp), text=text, vendor_tickers=tickers)


class TestParseNewsStream:
    def test_single_wellformed_line(self):
        line = '{"id":"a1","timestamp":"2020-04-06T09:00:00Z","text":"CO2 emissions rise"}'
        items, errors = parse_news_stream([line])
        assert len(items) == 1 and not errors
        assert items[0].id == "a1"
        assert items[0].timestamp == datetime(2020, 4, 6, 9, 0, 0, tzinfo=timezone.utc)

    def test_empty_stream(self):
        assert parse_news_stream([]) == ([], [])

    def test_missing_text_line_collected(self):
        lines = [
            '{"id":"a","timestamp":"2020-04-06T09:00:00Z","text":"one"}',
            '{"id":"b","timestamp":"2020-04-06T09:01:00Z"}',
            '{"id":"c","timestamp":"2020-04-06T09:02:00Z","text":"three"}',
        ]
        items, errors = parse_news_stream(lines)
        assert [i.id for i in items] == ["a", "c"]
        assert len(errors) == 1 and errors[0].line == 2

    def test_strict_mode_raises(self):
        lines = ['not json at all']
        with pytest.raises(ValueError, match="line 1"):
            parse_news_stream(lines, strict=True)

    def test_duplicate_id_always_raises(self):
        lines = [
            '{"id":"x","timestamp":"2020-04-06T09:00:00Z","text":"a"}',
            '{"id":"x","timestamp":"2020-04-06T10:00:00Z","text":"b"}',
        ]
        with pytest.raises(ValueError, match="duplicate news id"):
            parse_news_stream(lines, strict=False)

    def test_bad_timestamp_is_error(self):
        items, errors = parse_news_stream(['{"id":"a","timestamp":"yesterday","text":"t"}'])
        assert not items and len(errors) == 1

    def test_naive_timestamp_rejected(self):
        items, errors = parse_news_stream(
            ['{"id":"a","timestamp":"2020-04-06T09:00:00","text":"t"}']
        )
        assert not items and "offset" in errors[0].cause

    def test_counts_partition_nonempty_lines(self):
        rng = np.random.default_rng(5)
        lines, nonempty = [], 0
        for i in range(60):
            kind = rng.integers(4)
            if kind == 0:
                lines.append("")
            elif kind == 1:
                lines.append(f'{{"id":"g{i}","timestamp":"2020-04-06T09:00:00Z","text":"ok"}}')
                nonempty += 1
            elif kind == 2:
                lines.append("{broken")
                nonempty += 1
            else:
                lines.append(f'{{"id":"m{i}","timestamp":"2020-04-06T09:00:00Z"}}')
                nonempty += 1
        items, errors = parse_news_stream(lines)
        assert len(items) + len(errors) == nonempty

    def test_accepts_bytes(self):
        payload = b'{"id":"a1","timestamp":"2020-04-06T09:00:00Z","text":"CO2 emissions"}\n'
        items, errors = parse_news_stream(io.BytesIO(payload))
        assert len(items) == 1 and not errors


class TestVocabulary:
    def test_single_row(self):
        vocab = load_vocabulary("phrase,topic,pillar\nco2 emissions,Emissions,E\n")
        assert len(vocab) == 1
        assert vocab.entries[0].phrase == ("co2", "emissions")

    def test_bad_pillar_names_row_and_value(self):
        with pytest.raises(ValueError, match=r"row 2.*'X'"):
            load_vocabulary("phrase,topic,pillar\nco2 emissions,Emissions,X\n")

    def test_duplicate_phrase_rejected(self):
        text = "phrase,topic,pillar\noil spill,Pollution,E\noil spill,Other,E\n"
        with pytest.raises(ValueError, match="duplicate phrase"):
            load_vocabulary(text)

    def test_empty_file_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            load_vocabulary("phrase,topic,pillar\n")


class TestEsgFilter:
    def test_direct_match(self):
        out = esg_filter(item("a", "CO2 emissions rise sharply"), VOCAB)
        assert out is not None
        assert [m.topic for m in out.topics] == ["Emissions"]

    def test_no_match_returns_none(self):
        assert esg_filter(item("a", "quarterly earnings beat estimates"), VOCAB) is None

    def test_two_phrases_both_reported_once(self):
        out = esg_filter(item("a", "Child labor probe; labor strike looms"), VOCAB)
        assert out is not None
        assert sorted(m.topic for m in out.topics) == ["Labor Practices", "Labor Relations"]

    def test_case_insensitive_matching(self):
        lower = esg_filter(item("a", "co2 emissions data"), VOCAB)
        upper = esg_filter(item("b", "CO2 EMISSIONS DATA"), VOCAB)
        assert lower is not None and upper is not None
        assert [m.topic for m in lower.topics] == [m.topic for m in upper.topics]

    def test_phrase_is_contiguous_subsequence_of_text_tokens(self):
        rng = np.random.default_rng(11)
        pool = ["alpha", "co2", "emissions", "labor", "child", "strike", "beta"]
        for _ in range(100):
            words = [pool[i] for i in rng.integers(0, len(pool), size=8)]
            text = " ".join(words)
            out = esg_filter(item("r", text), VOCAB)
            if out is None:
                continue
            tokens = tokenize(text)
            for m in out.topics:
                n = len(m.phrase)
                assert any(
                    tuple(tokens[i : i + n]) == m.phrase for i in range(len(tokens) - n + 1)
                )

    def test_filter_is_per_item_pure(self):
        items = [item(f"i{k}", t) for k, t in enumerate(
            ["CO2 emissions up", "nothing here", "labor strike again"]
        )]
        forward = [esg_filter(i, VOCAB) for i in items]
        backward = [esg_filter(i, VOCAB) for i in reversed(items)]
        assert [f.item.id for f in forward if f] == ["i0", "i2"]
        assert [b.item.id for b in backward if b] == ["i2", "i0"]


class TestLinkTickers:
    def test_vendor_passthrough(self):
        assert link_tickers(item("a", "text", tickers=("TMUS",)), TICKERS) == ["TMUS"]

    def test_vendor_intersected_with_dictionary(self):
        assert link_tickers(item("a", "text", tickers=("TMUS", "ZZZZ")), TICKERS) == ["TMUS"]

    def test_alias_match(self):
        got = link_tickers(item("a", "T-Mobile announces new plan"), TICKERS)
        assert got == ["TMUS"]

    def test_no_alias_no_vendor(self):
        assert link_tickers(item("a", "nothing relevant"), TICKERS) == []

    def test_sorted_deduplicated(self):
        got = link_tickers(item("a", "Apple and t-mobile and t mobile us teamed"), TICKERS)
        assert got == ["AAPL", "TMUS"]


class TestTopicHistogram:
    def wrap(self, news_item, topics):
        entry = esg_filter(news_item, VOCAB)
        assert entry is not None
        return entry

    def test_direct_count(self):
        entry = self.wrap(item("a", "CO2 emissions and child labor"), None)
        hist = topic_histogram(
            [entry], (ts("2020-04-06T00:00:00Z"), ts("2020-04-07T00:00:00Z")), k=15
        )
        assert hist.counts == {"Emissions": 1, "Labor Practices": 1}

    def test_outside_window_empty(self):
        entry = self.wrap(item("a", "CO2 emissions"), None)
        hist = topic_histogram(
            [entry], (ts("2021-01-01T00:00:00Z"), ts("2021-01-02T00:00:00Z")), k=15
        )
        assert hist.counts == {}

    def test_topk_alphabetical_tiebreak(self):
        window = (ts("2020-04-06T00:00:00Z"), ts("2020-04-07T00:00:00Z"))
        entries = []
        for i in range(3):
            entries.append(self.wrap(item(f"a{i}", "co2 emissions note"), None))
            entries.append(self.wrap(item(f"b{i}", "child labor note"), None))
        entries.append(self.wrap(item("c", "insider trading note"), None))
        hist = topic_histogram(entries, window, k=2)
        # counts {Emissions:3, Labor Practices:3, Business Ethics:1}; ties keep
        # the alphabetically first two
        assert hist.counts == {"Emissions": 3, "Labor Practices": 3}
        brute = {}
        for e in entries:
            if window[0] <= e.item.timestamp < window[1]:
                for topic in {m.topic for m in e.topics}:
                    brute[topic] = brute.get(topic, 0) + 1
        expect = dict(sorted(brute.items(), key=lambda kv: (-kv[1], kv[0]))[:2])
        assert hist.counts == expect

    def test_bad_window_rejected(self):
        stamp = ts("2020-04-06T00:00:00Z")
        with pytest.raises(ValueError):
            topic_histogram([], (stamp, stamp), k=5)


class TestFilteredRoundTrip:
    def test_round_trip(self):
        entries = []
        for i, text in enumerate(["CO2 emissions rise", "child labor probe"]):
            entry = esg_filter(item(f"n{i}", text, stamp=f"2020-04-06T0{i}:00:00Z"), VOCAB)
            entries.append(with_tickers(entry, ["AAPL"]))
        sink = io.StringIO()
        write_filtered(entries, sink)
        back = read_filtered(io.StringIO(sink.getvalue()))
        assert back == entries

    def test_output_mirrors_input_fields(self):
        entry = esg_filter(item("n0", "CO2 emissions rise"), VOCAB)
        sink = io.StringIO()
        write_filtered([entry], sink)
        record = json.loads(sink.getvalue())
        assert record["id"] == "n0"
        assert record["text"] == "CO2 emissions rise"
        assert record["topics"] == [
            {"phrase": "co2 emissions", "topic": "Emissions", "pillar": "E"}
        ]
        assert record["tickers"] == []
