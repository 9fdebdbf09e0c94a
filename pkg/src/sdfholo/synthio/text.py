"""Report text: tokenizer, vocabulary, anatomical lexicon and mention spans."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .. import anatomy

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

_WORD_RE = re.compile(r"\w+|[^\w\s]")

ORGAN_TEMPLATES = {
    "en": "the {term} shows {level} uptake .",
    "zh": "{term} 代谢 {level} 。",
}
LESION_TEMPLATES = {
    "en": "a hypermetabolic lesion is noted in the {term} .",
    "zh": "{term} 可见 高代谢 病灶 。",
}
LEVELS = {
    "en": {"normal": "normal", "elevated": "elevated"},
    "zh": {"normal": "正常", "elevated": "增高"},
}
LANGUAGES = tuple(ORGAN_TEMPLATES)


def words(text: str) -> list:
    """Lowercased split on whitespace, punctuation kept as separate tokens."""
    return _WORD_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(words(text))


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        for s in SPECIALS:
            if s not in tokens:
                raise ValueError(f"vocabulary lacks special token {s!r}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    @property
    def unk(self) -> int:
        return self.index[UNK]

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @classmethod
    def from_words(cls, vocab_words) -> "Vocabulary":
        rest = sorted(set(vocab_words) - set(SPECIALS))
        return cls(list(SPECIALS) + rest)


def tokenize(text: str, vocab: Vocabulary) -> list:
    return [vocab.bos] + [vocab.index.get(w, vocab.unk) for w in words(text)] + [vocab.eos]


def detokenize(ids, vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        tok = vocab.tokens[int(i)]
        if tok == EOS:
            break
        if tok in (BOS, PAD):
            continue
        out.append(tok)
    return " ".join(out)


@dataclass
class Lexicon:
    """Many-to-one map from term word tuples to canonical class ids."""

    terms: dict = field(default_factory=dict)  # tuple(words) -> class id
    by_class: dict = field(default_factory=dict)  # (class id, language) -> [term strings]

    def add(self, cid: int, term: str, language: str):
        key = tuple(words(term))
        owner = self.terms.get(key)
        if owner is not None and owner != cid:
            raise ValueError(f"term {term!r} already maps to class {owner}")
        self.terms[key] = cid
        self.by_class.setdefault((cid, language), [])
        if term not in self.by_class[(cid, language)]:
            self.by_class[(cid, language)].append(term)

    def lookup(self, term: str):
        return self.terms.get(tuple(words(term)))

    def terms_for(self, cid: int, language: str = "en") -> list:
        return list(self.by_class.get((cid, language), []))

    def primary_term(self, cid: int, language: str = "en") -> str:
        terms = self.terms_for(cid, language)
        if not terms:
            raise KeyError(f"no {language} term for class {cid} ({anatomy.class_name(cid)})")
        return terms[0]

    @property
    def max_term_len(self) -> int:
        return max((len(k) for k in self.terms), default=0)

    @classmethod
    def default(cls) -> "Lexicon":
        lex = cls()
        for name, cid in anatomy.CLASS_IDS.items():
            for term in anatomy.english_terms(name):
                lex.add(cid, term, "en")
            for term in anatomy.ZH_TERMS.get(name, []):
                lex.add(cid, term, "zh")
        return lex


_DEFAULT_LEXICON = None
_DEFAULT_VOCAB = None


def default_lexicon() -> Lexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = Lexicon.default()
    return _DEFAULT_LEXICON


def default_vocabulary() -> Vocabulary:
    """Specials, template words and every lexicon term word."""
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        vocab_words = set()
        for lang in LANGUAGES:
            for tpl in (ORGAN_TEMPLATES[lang], LESION_TEMPLATES[lang]):
                vocab_words.update(w for w in words(tpl.replace("{term}", " ").replace("{level}", " ")))
            vocab_words.update(LEVELS[lang].values())
        for key in default_lexicon().terms:
            vocab_words.update(key)
        _DEFAULT_VOCAB = Vocabulary.from_words(vocab_words)
    return _DEFAULT_VOCAB


def mention_spans(token_words, lexicon: Lexicon, offset: int = 0) -> dict:
    """Longest-match lexicon scan; returns class id -> [(start, end)] half-open ranges."""
    spans: dict = {}
    n, i = len(token_words), 0
    longest = lexicon.max_term_len
    while i < n:
        for length in range(min(longest, n - i), 0, -1):
            cid = lexicon.terms.get(tuple(token_words[i:i + length]))
            if cid is not None:
                spans.setdefault(cid, []).append((i + offset, i + length + offset))
                i += length
                break
        else:
            i += 1
    return spans


def organ_sentence(term: str, elevated: bool, language: str) -> str:
    level = LEVELS[language]["elevated" if elevated else "normal"]
    return ORGAN_TEMPLATES[language].format(term=term, level=level)


def lesion_sentence(term: str, language: str) -> str:
    return LESION_TEMPLATES[language].format(term=term)
