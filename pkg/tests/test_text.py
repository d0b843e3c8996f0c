from esgvol.text import contains_phrase, split_sentences, tokenize


class TestTokenize:
    def test_basic(self):
        assert tokenize("CO2 Emissions rise") == ["co2", "emissions", "rise"]

    def test_empty(self):
        assert tokenize("") == []

    def test_hyphen_apostrophe_split(self):
        assert tokenize("T-Mobile's CEO") == ["t", "mobile", "s", "ceo"]

    def test_underscore_splits(self):
        assert tokenize("foo_bar") == ["foo", "bar"]

    def test_case_insensitive(self):
        assert tokenize("Oil SPILL") == tokenize("oil spill")


class TestSplitSentences:
    def test_two_terminators(self):
        assert split_sentences("Good plant. Bad spill.") == ["Good plant", "Bad spill"]

    def test_no_terminator_whole_text(self):
        assert split_sentences("no terminator here") == ["no terminator here"]

    def test_repeated_terminators(self):
        assert split_sentences("A.. B") == ["A", "B"]

    def test_empty(self):
        assert split_sentences("") == []

    def test_exclamation_question(self):
        assert split_sentences("Really? Yes! Fine.") == ["Really", "Yes", "Fine"]

    def test_dot_without_space_kept_together(self):
        assert split_sentences("v1.2 released") == ["v1.2 released"]


class TestContainsPhrase:
    def test_contiguous_match(self):
        assert contains_phrase(["co2", "emissions", "rise"], ("co2", "emissions"))

    def test_gap_is_not_a_match(self):
        assert not contains_phrase(["co2", "bad", "emissions"], ("co2", "emissions"))

    def test_no_partial_token_match(self):
        # "art" must not match inside "party"
        assert not contains_phrase(["party", "time"], ("art",))

    def test_empty_phrase(self):
        assert not contains_phrase(["a"], ())
