"""Tokenizer, tagger, chunker and vocabulary."""

import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mia import textpipe
from mia.textpipe import (NounPhrase, Token, build_vocab, chunk_noun_phrases,
                          default_lexicon, extract_phrases, load_lexicon,
                          numericalize, pos_tag, tokenize, TAGS, Vocabulary)

FORBIDDEN_INSIDE = {"IN", "CC", "VB", "PRP"}


def phrase_invariants_hold(caption, lexicon=None):
    tokens = tokenize(caption)
    tagged = pos_tag(tokens, lexicon=lexicon)
    tag_at = {tok.position: tag for tok, tag in tagged}
    phrases = chunk_noun_phrases(tagged)
    prev_end = -1
    for p in phrases:
        positions = [t.position for t in p.tokens]
        assert positions, "empty phrase"
        # contiguous span, in sentence order, non-overlapping
        assert positions == list(range(positions[0], positions[-1] + 1))
        assert positions[0] > prev_end
        prev_end = positions[-1]
        # final token is the noun head
        assert tag_at[positions[-1]] == "NN"
        assert p.head_index == positions[-1]
        # no forbidden tags inside, and the leading determiner is stripped
        assert all(tag_at[q] not in FORBIDDEN_INSIDE for q in positions)
        assert tag_at[positions[0]] != "DT"
    return phrases


# -- tokenize -----------------------------------------------------------------

def test_tokenize_sentence():
    assert [t.surface for t in tokenize("A man walks.")] == ["a", "man", "walks"]


def test_tokenize_empty():
    assert tokenize("") == []


def test_tokenize_hyphen_splits():
    assert [t.surface for t in tokenize("red-shirt")] == ["red", "shirt"]


def test_token_positions_strictly_increasing():
    toks = tokenize("one two, three-four five!")
    assert [t.position for t in toks] == list(range(len(toks)))


def test_token_rejects_empty_surface():
    with pytest.raises(ValueError):
        Token("", 0)


# -- pos_tag ------------------------------------------------------------------

def test_tag_lexicon_lookup():
    tags = [tag for _, tag in pos_tag(tokenize("a yellow shirt"))]
    assert tags == ["DT", "JJ", "NN"]


def test_tag_closed_class_and_ing():
    tags = [tag for _, tag in pos_tag(tokenize("she is carrying"))]
    assert tags == ["PRP", "VB", "VBG"]


def test_tag_unknown_falls_back_to_noun():
    assert pos_tag(tokenize("qzx"))[0][1] == "NN"


def test_tag_digits():
    assert pos_tag(tokenize("3 shirts"))[0][1] == "CD"


def test_tag_plural_of_known_noun_is_noun():
    # "-s" plurals of nouns land on NN either via the lexicon or the fallback
    assert pos_tag(tokenize("sneakers"))[0][1] == "NN"


def test_lexicon_ships_and_is_well_formed():
    lex = load_lexicon()
    assert len(lex) > 500
    assert set(lex.values()) <= TAGS
    assert lex["yellow"] == "JJ" and lex["shirt"] == "NN"


# -- chunker ------------------------------------------------------------------

def test_chunk_adjective_stack():
    phrases = extract_phrases("a yellow short sleeve shirt")
    assert [p.text for p in phrases] == ["yellow short sleeve shirt"]


def test_chunk_conjunction_splits():
    phrases = extract_phrases("the man wears black pants and white shoes")
    assert [p.text for p in phrases] == ["man", "black pants", "white shoes"]


def test_chunk_empty():
    assert extract_phrases("") == []


def test_chunk_no_noun_no_phrase():
    assert extract_phrases("walking in and out") == []


def test_chunk_invariants_on_samples():
    for caption in ("a woman wearing a red hat, blue trousers and green shoes",
                    "the person is carrying a large brown guitar",
                    "someone in a striped top walking 2 dogs",
                    "red red red", "and and and", "a the shirt"):
        phrase_invariants_hold(caption)


WORDS = (list(default_lexicon())[:200]
         + "a the and with is wearing she qzx 7 shoes".split())


@settings(deadline=None, max_examples=200)
@given(st.lists(st.sampled_from(WORDS), min_size=0, max_size=12))
def test_chunk_invariants_word_soup(words):
    phrase_invariants_hold(" ".join(words))


@settings(deadline=None, max_examples=100)
@given(st.text(alphabet=string.ascii_lowercase + string.digits + " .-,",
               max_size=60))
def test_chunk_invariants_random_text(text):
    phrase_invariants_hold(text)


# -- vocabulary ---------------------------------------------------------------

def test_vocab_min_count():
    vocab = build_vocab(["a a b"], min_count=2)
    assert "a" in vocab and "b" not in vocab
    assert numericalize(tokenize("a b"), vocab) == [vocab.lookup("a"), 0]


def test_vocab_empty_corpus():
    vocab = build_vocab([])
    assert len(vocab) == 1  # only <unk>
    assert numericalize(tokenize("anything here"), vocab) == [0, 0]


def test_vocab_min_count_one_keeps_all():
    vocab = build_vocab(["x y"], min_count=1)
    assert "x" in vocab and "y" in vocab


def test_vocab_stable_ordering():
    v1 = Vocabulary(["pants", "red", "hat"])
    v2 = Vocabulary(["hat", "red", "pants", "red"])
    assert v1.index == v2.index
    assert min(v1.index.values()) == 1  # 0 is reserved for <unk>


def test_vocab_min_count_validation():
    with pytest.raises(ValueError):
        build_vocab(["a"], min_count=0)


def test_load_lexicon_rejects_bad_tag(tmp_path):
    bad = tmp_path / "lex.tsv"
    bad.write_text("word\tBOGUS\n")
    with pytest.raises(ValueError):
        load_lexicon(bad)
