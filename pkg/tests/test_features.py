import io
from datetime import datetime, timezone

import numpy as np
import pytest

from esgvol.features import (
    ExternalEmbeddings,
    HashedEmbedder,
    PooledFeatures,
    S_FRAC_NEG,
    S_FRAC_POS,
    S_MAX,
    S_MEAN,
    S_MIN,
    S_STD,
    SentimentLexicon,
    embed,
    group_windows,
    load_external_embeddings,
    load_lexicon,
    pool,
    sentiment_vector,
    transform_window,
    write_external_embeddings,
)
from esgvol.newsflow import EsgNewsItem, MatchedTopic, NewsItem

LEX = SentimentLexicon(scores={"good": 1.0, "bad": -1.0})


def utc(*args) -> datetime:
    return datetime(*args, tzinfo=timezone.utc)


def esg_item(news_id: str, text: str, stamp: datetime, ticker: str = "AAA") -> EsgNewsItem:
    return EsgNewsItem(
        item=NewsItem(id=news_id, timestamp=stamp, text=text),
        topics=(MatchedTopic(phrase=("x",), topic="T", pillar="E"),),
        tickers=(ticker,),
    )


class TestSentimentVector:
    def test_two_sentence_example(self):
        got = sentiment_vector("Good plant. Bad spill.", LEX)
        # sentence scores {+1, -1}: mean 0, population std 1, min -1, max +1,
        # half positive, half negative
        np.testing.assert_allclose(got, [0.0, 1.0, -1.0, 1.0, 0.5, 0.5], atol=1e-15)

    def test_no_lexicon_tokens(self):
        np.testing.assert_array_equal(
            sentiment_vector("nothing matches here", LEX), np.zeros(6)
        )

    def test_single_sentence_token_mean(self):
        got = sentiment_vector("good good", LEX)
        np.testing.assert_allclose(got, [1.0, 0.0, 1.0, 1.0, 1.0, 0.0], atol=1e-15)

    def test_empty_text(self):
        np.testing.assert_array_equal(sentiment_vector("", LEX), np.zeros(6))

    def test_sentence_reordering_invariance(self):
        a = sentiment_vector("Good day. Bad spill. Nothing here.", LEX)
        b = sentiment_vector("Nothing here. Good day. Bad spill.", LEX)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_slot_order_invariants(self):
        rng = np.random.default_rng(3)
        words = ["good", "bad", "plant", "spill", "day"]
        for _ in range(100):
            n = int(rng.integers(1, 6))
            text = ". ".join(
                " ".join(words[i] for i in rng.integers(0, len(words), size=3))
                for _ in range(n)
            )
            vec = sentiment_vector(text, LEX)
            assert vec[S_MIN] <= vec[S_MEAN] <= vec[S_MAX]
            assert 0.0 <= vec[S_FRAC_POS] <= 1.0
            assert 0.0 <= vec[S_FRAC_NEG] <= 1.0
            assert vec[S_FRAC_POS] + vec[S_FRAC_NEG] <= 1.0 + 1e-12
            assert vec[S_STD] >= 0.0

    def test_lexicon_loader_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            load_lexicon("token,score\ngood,1.5\n")

    def test_lexicon_loader_rejects_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            load_lexicon("token,score\ngood,0.5\ngood,0.4\n")


class TestHashedEmbedder:
    def test_empty_text_zero_vector(self):
        provider = HashedEmbedder(dim=32, seed=0)
        np.testing.assert_array_equal(embed("", provider), np.zeros(32))

    def test_unit_norm(self):
        provider = HashedEmbedder(dim=64, seed=1)
        rng = np.random.default_rng(0)
        words = ["alpha", "beta", "gamma", "delta", "co2", "spill"]
        for _ in range(50):
            text = " ".join(words[i] for i in rng.integers(0, len(words), size=6))
            vec = embed(text, provider)
            assert abs(np.linalg.norm(vec) - 1.0) < 1e-9

    def test_determinism_same_seed(self):
        a = HashedEmbedder(dim=128, seed=7)
        b = HashedEmbedder(dim=128, seed=7)
        text = "carbon footprint reduction plan"
        np.testing.assert_array_equal(a.embed_text(text), b.embed_text(text))

    def test_different_seeds_differ(self):
        a = HashedEmbedder(dim=128, seed=7).embed_text("carbon footprint plan")
        b = HashedEmbedder(dim=128, seed=8).embed_text("carbon footprint plan")
        assert not np.array_equal(a, b)

    def test_matches_by_hand_accumulation(self):
        # oracle: accumulate unigram/bigram signs straight from hash_index_sign
        from esgvol.hashing import hash_index_sign

        dim, seed = 16, 3
        text = "Oil spill risk"
        tokens = ["oil", "spill", "risk"]
        expect = np.zeros(dim)
        for ngram in tokens + ["oil spill", "spill risk"]:
            idx, sign = hash_index_sign(ngram.encode(), seed, dim)
            expect[idx] += sign
        expect /= np.linalg.norm(expect)
        got = HashedEmbedder(dim=dim, seed=seed).embed_text(text)
        np.testing.assert_allclose(got, expect, atol=1e-15)


class TestPool:
    def test_direct_mean(self):
        np.testing.assert_array_equal(
            pool([np.array([1.0, 3.0]), np.array([3.0, 5.0])]), np.array([2.0, 4.0])
        )

    def test_single_vector_identity(self):
        v = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(pool([v]), v)

    def test_hundred_random_vectors_vs_sum_count_oracle(self):
        rng = np.random.default_rng(42)
        vecs = [rng.normal(size=6) for _ in range(100)]
        total = np.zeros(6)
        for v in vecs:
            total = total + v
        np.testing.assert_allclose(pool(vecs), total / len(vecs), rtol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pool([])

    def test_ragged_rejected(self):
        with pytest.raises(ValueError):
            pool([np.zeros(3), np.zeros(4)])

    def test_permutation_invariant_and_idempotent(self):
        rng = np.random.default_rng(9)
        vecs = [rng.normal(size=4) for _ in range(7)]
        perm = [vecs[i] for i in rng.permutation(7)]
        np.testing.assert_allclose(pool(vecs), pool(perm), atol=1e-12)
        v = rng.normal(size=4)
        np.testing.assert_allclose(pool([v] * 5), v, atol=1e-15)


class TestTransformWindow:
    provider = HashedEmbedder(dim=32, seed=5)

    def test_single_item_identity(self):
        entry = esg_item("n1", "Good plant. Bad spill.", utc(2020, 1, 6, 10))
        out = transform_window([entry], "AAA", 3, LEX, self.provider)
        np.testing.assert_allclose(
            out.s_pooled, sentiment_vector(entry.item.text, LEX), atol=1e-15
        )
        np.testing.assert_allclose(
            out.e_pooled, self.provider.embed_text(entry.item.text), atol=1e-15
        )
        assert out.m == 1 and out.ticker == "AAA" and out.t == 3
        assert out.latest_news_ts == entry.item.timestamp

    def test_two_item_mean(self):
        e1 = esg_item("n1", "good news", utc(2020, 1, 6, 9))
        e2 = esg_item("n2", "bad day spill", utc(2020, 1, 6, 11))
        out = transform_window([e1, e2], "AAA", 1, LEX, self.provider)
        u = self.provider.embed_text(e1.item.text)
        v = self.provider.embed_text(e2.item.text)
        np.testing.assert_allclose(out.e_pooled, (u + v) / 2, atol=1e-15)

    def test_five_item_window_vs_independent_oracle(self):
        rng = np.random.default_rng(12)
        words = ["good", "bad", "plant", "update", "spill", "award"]
        entries = []
        for i in range(5):
            text = ". ".join(
                " ".join(words[j] for j in rng.integers(0, len(words), size=4))
                for _ in range(2)
            )
            entries.append(esg_item(f"n{i}", text, utc(2020, 1, 6, 9 + i)))
        out = transform_window(entries, "AAA", 2, LEX, self.provider)
        s_sum = np.zeros(6)
        e_sum = np.zeros(32)
        for entry in entries:
            s_sum += sentiment_vector(entry.item.text, LEX)
            e_sum += self.provider.embed_text(entry.item.text)
        np.testing.assert_allclose(out.s_pooled, s_sum / 5, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(out.e_pooled, e_sum / 5, rtol=1e-12, atol=1e-15)

    def test_window_linearity_count_weighted(self):
        e1 = esg_item("n1", "good outlook", utc(2020, 1, 6, 9))
        e2 = esg_item("n2", "bad spill", utc(2020, 1, 6, 10))
        e3 = esg_item("n3", "plant update", utc(2020, 1, 6, 11))
        whole = transform_window([e1, e2, e3], "AAA", 1, LEX, self.provider)
        singles = [transform_window([e], "AAA", 1, LEX, self.provider) for e in (e1, e2, e3)]
        recombined = sum(s.s_pooled for s in singles) / 3
        np.testing.assert_allclose(whole.s_pooled, recombined, atol=1e-14)

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            transform_window([], "AAA", 1, LEX, self.provider)


class TestGroupWindows:
    def boundaries(self):
        return [utc(2020, 1, 10, 23, 59, 59), utc(2020, 1, 17, 23, 59, 59), utc(2020, 1, 24, 23, 59, 59)]

    def test_assigns_to_following_boundary(self):
        entry = esg_item("n1", "x", utc(2020, 1, 13, 9))  # between b0 and b1
        grouped = group_windows([entry], self.boundaries(), w=1)
        assert list(grouped) == [("AAA", 1)]

    def test_before_grid_dropped(self):
        entry = esg_item("n1", "x", utc(2020, 1, 2, 9))
        assert group_windows([entry], self.boundaries(), w=1) == {}

    def test_multi_ticker_contributes_to_all(self):
        entry = EsgNewsItem(
            item=NewsItem(id="n1", timestamp=utc(2020, 1, 13, 9), text="x"),
            topics=(MatchedTopic(phrase=("x",), topic="T", pillar="E"),),
            tickers=("AAA", "BBB"),
        )
        grouped = group_windows([entry], self.boundaries(), w=1)
        assert set(grouped) == {("AAA", 1), ("BBB", 1)}

    def test_wider_window_spans_multiple_periods(self):
        entry = esg_item("n1", "x", utc(2020, 1, 13, 9))
        grouped = group_windows([entry], self.boundaries(), w=2)
        assert set(grouped) == {("AAA", 2)} | {("AAA", 1)} - {("AAA", 0)}


class TestExternalEmbeddings:
    def test_round_trip(self):
        vectors = {"a": np.arange(4, dtype=float), "b": np.ones(4)}
        sink = io.BytesIO()
        write_external_embeddings(vectors, sink)
        back = load_external_embeddings(io.BytesIO(sink.getvalue()))
        assert set(back) == {"a", "b"}
        np.testing.assert_array_equal(back["a"], vectors["a"])

    def test_mixed_dimensions_rejected_at_write(self):
        with pytest.raises(ValueError, match="inconsistent"):
            write_external_embeddings({"a": np.zeros(4), "b": np.zeros(8)}, io.BytesIO())

    def test_empty_file_empty_map(self):
        sink = io.BytesIO()
        write_external_embeddings({}, sink)
        assert load_external_embeddings(io.BytesIO(sink.getvalue())) == {}

    def test_truncated_payload_rejected(self):
        sink = io.BytesIO()
        write_external_embeddings({"a": np.zeros(4)}, sink)
        raw = sink.getvalue()
        with pytest.raises(ValueError, match="truncated"):
            load_external_embeddings(io.BytesIO(raw[:-8]))

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="magic"):
            load_external_embeddings(io.BytesIO(b"NOPE" + b"\x00" * 16))

    def test_lookup_unknown_id_fails(self):
        provider = ExternalEmbeddings({"a": np.zeros(3)})
        with pytest.raises(ValueError, match="no external embedding"):
            provider.embedding_for("missing", "text ignored")
