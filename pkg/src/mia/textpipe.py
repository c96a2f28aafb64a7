"""Rule-based caption processing: tokenizer, POS tagger, noun-phrase chunker.

The tagger uses three layers: a built-in closed-class lexicon, a shipped
content-word lexicon (clothing / colors / body words, tab-separated file),
and suffix fallbacks. Everything is deterministic and pure.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources as importlib_resources
from pathlib import Path

TAGS = {"DT", "JJ", "CD", "NN", "VBG", "VB", "IN", "CC", "PRP", "OTHER"}

# tags a noun phrase may contain (besides the optional leading DT)
_NP_BODY = {"JJ", "CD", "VBG", "NN"}

_CLOSED_CLASS = {
    **dict.fromkeys("a an the this that these those some any each every no".split(), "DT"),
    **dict.fromkeys(("in on at by with without over under above below near beside "
                     "behind before after across through into onto from of to "
                     "towards toward against along around between beyond inside "
                     "outside out up down off past").split(), "IN"),
    **dict.fromkeys("and or but nor so yet".split(), "CC"),
    **dict.fromkeys(("he she it they them him her his hers its their theirs we us "
                     "our i you your yours me my mine who whom somebody someone "
                     "anybody anyone everybody everyone nobody").split(), "PRP"),
    **dict.fromkeys(("is are was were be been am has have had do does did can "
                     "could will would shall should may might must wears wear "
                     "carries carry holds hold walks walk runs run stands stand "
                     "sits sit looks look appears appear seems seem faces "
                     "dressed paired matched seen").split(), "VB"),
}

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_DIGIT_RE = re.compile(r"^\d+$")


@dataclass(frozen=True)
class Token:
    surface: str
    position: int

    def __post_init__(self):
        if not self.surface:
            raise ValueError("empty token surface")


@dataclass(frozen=True)
class NounPhrase:
    tokens: tuple            # contiguous Token span, leading determiner stripped
    head_index: int          # sentence position of the final noun

    @property
    def text(self) -> str:
        return " ".join(t.surface for t in self.tokens)


def load_lexicon(path=None) -> dict:
    """Load `word<TAB>TAG` lines; defaults to the shipped lexicon."""
    if path is None:
        text = (importlib_resources.files("mia") / "resources/lexicon.tsv") \
            .read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lex = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        word, tag = line.split("\t")
        if tag not in TAGS:
            raise ValueError(f"unknown tag {tag!r} for word {word!r}")
        lex[word] = tag
    return lex


_DEFAULT_LEXICON = None


def default_lexicon() -> dict:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = load_lexicon()
    return _DEFAULT_LEXICON


def tokenize(caption: str) -> list:
    """Lowercase and split on whitespace/punctuation; punctuation is dropped."""
    return [Token(surface, i)
            for i, surface in enumerate(_TOKEN_RE.findall(caption.lower()))]


def pos_tag(tokens, lexicon=None) -> list:
    """Tag each token. Unknown words always get a tag (NN fallback)."""
    lexicon = lexicon if lexicon is not None else default_lexicon()
    tagged = []
    for tok in tokens:
        w = tok.surface
        if w in _CLOSED_CLASS:
            tag = _CLOSED_CLASS[w]
        elif w in lexicon:
            tag = lexicon[w]
        elif _DIGIT_RE.match(w):
            tag = "CD"
        elif w.endswith("ing") and len(w) > 4:
            tag = "VBG"
        else:
            # covers the "-s after known noun" rule too: plural of a known
            # noun lands here and is tagged NN like any unknown word
            tag = "NN"
        tagged.append((tok, tag))
    return tagged


def chunk_noun_phrases(tagged) -> list:
    """Greedy left-to-right maximal matches of  NP := DT? (JJ|CD|VBG|NN)* NN.

    The leading determiner is stripped from the emitted phrase. Emitted
    phrases never overlap and appear in sentence order.
    """
    phrases = []
    i = 0
    n = len(tagged)
    while i < n:
        tok, tag = tagged[i]
        if tag != "DT" and tag not in _NP_BODY:
            i += 1
            continue
        start = i
        j = i + 1 if tag == "DT" else i
        # extend over the contiguous run of allowed body tags
        end = j
        while end < n and tagged[end][1] in _NP_BODY:
            end += 1
        # maximal match must finish on the last noun inside the run
        last_nn = None
        for k in range(j, end):
            if tagged[k][1] == "NN":
                last_nn = k
        if last_nn is None:
            i = end if end > start else start + 1
            continue
        span = tuple(t for t, _ in tagged[j:last_nn + 1])
        phrases.append(NounPhrase(tokens=span, head_index=tagged[last_nn][0].position))
        i = last_nn + 1
    return phrases


def extract_phrases(caption: str, lexicon=None) -> list:
    return chunk_noun_phrases(pos_tag(tokenize(caption), lexicon=lexicon))


class Vocabulary:
    """word -> index map; index 0 is reserved for <unk>."""

    UNK = 0

    def __init__(self, words):
        self.index = {w: i + 1 for i, w in enumerate(sorted(set(words)))}

    def __len__(self):
        # including <unk>
        return len(self.index) + 1

    def __contains__(self, word):
        return word in self.index

    def lookup(self, word: str) -> int:
        return self.index.get(word, self.UNK)

    def words(self):
        return sorted(self.index)


def build_vocab(captions, min_count: int = 1) -> Vocabulary:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = {}
    for caption in captions:
        for tok in tokenize(caption):
            counts[tok.surface] = counts.get(tok.surface, 0) + 1
    return Vocabulary(w for w, c in counts.items() if c >= min_count)


def numericalize(tokens, vocab: Vocabulary) -> list:
    return [vocab.lookup(t.surface) for t in tokens]
