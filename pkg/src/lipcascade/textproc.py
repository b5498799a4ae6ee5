"""Pinyin/tone decomposition, vocabularies, token codecs, curriculum buckets."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import AlignmentError, ParseError, VocabError

SOS, EOS, PAD = "[sos]", "[eos]", "[pad]"
SPECIALS = (SOS, EOS, PAD)
SOS_ID, EOS_ID, PAD_ID = 0, 1, 2

# Standard Mandarin initials, ordered so longest-prefix matching works.
INITIALS = (
    "zh", "ch", "sh",
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h",
    "j", "q", "x", "r", "z", "c", "s", "y", "w",
)

_SYLLABLE_RE = re.compile(r"[a-z]+$")


@dataclass(frozen=True)
class Syllable:
    """Toneless pinyin syllable; lowercase ASCII, 'v' stands in for u-umlaut."""

    text: str

    def __post_init__(self):
        if not _SYLLABLE_RE.match(self.text):
            raise ParseError(f"invalid syllable text {self.text!r}")


def parse_toned_pinyin(token: str) -> tuple[Syllable, int]:
    """Split 'rang4' into (Syllable('rang'), 4). A missing digit means neutral (0)."""
    if not token:
        raise ParseError("empty pinyin token")
    for pos, ch in enumerate(token):
        if ch.isdigit():
            if pos != len(token) - 1:
                raise ParseError(
                    f"unexpected digit at position {pos} in pinyin token {token!r}"
                )
            letters, tone = token[:pos], int(ch)
            if not letters:
                raise ParseError(f"pinyin token {token!r} has no letters")
            if tone > 4:
                raise ParseError(f"tone digit {tone} out of range in {token!r}")
            return Syllable(letters), tone
        if not ("a" <= ch <= "z"):
            raise ParseError(f"invalid character {ch!r} at position {pos} in {token!r}")
    return Syllable(token), 0


def split_initial_final(s: Syllable) -> tuple[str, str]:
    """Longest-prefix split into (initial, final); zero-initial gives ''."""
    for initial in INITIALS:
        if s.text.startswith(initial):
            final = s.text[len(initial):]
            if not final:
                raise ParseError(f"syllable {s.text!r} has an empty final")
            return initial, final
    return "", s.text


@dataclass
class Vocab:
    tokens: list[str]
    min_count: int
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        assert self.tokens[:3] == list(SPECIALS)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabError(f"token {token!r} not in vocabulary") from None

    def token(self, i: int) -> str:
        return self.tokens[i]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        """Map tokens to ids and append [eos]."""
        return [self.id(t) for t in tokens] + [EOS_ID]

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Map ids back to tokens, dropping the special markers."""
        return [self.tokens[i] for i in ids if i not in (SOS_ID, EOS_ID, PAD_ID)]


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 20) -> Vocab:
    """Keep tokens seen strictly more than `min_count` times.

    Ordering is (count desc, token asc) so the id assignment is a pure
    function of the corpus contents, independent of iteration order.
    """
    counts = Counter()
    for seq in corpus:
        counts.update(seq)
    kept = sorted(
        (tok for tok, c in counts.items() if c > min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocab(tokens=list(SPECIALS) + kept, min_count=min_count)


@dataclass
class SentenceAnnotation:
    """Aligned per-character token rows: characters, syllables, tones."""

    chars: list[str]
    pinyin: list[Syllable]
    tones: list[int]

    def __post_init__(self):
        if not (len(self.chars) == len(self.pinyin) == len(self.tones)):
            raise AlignmentError(
                f"annotation rows disagree: {len(self.chars)} chars, "
                f"{len(self.pinyin)} syllables, {len(self.tones)} tones"
            )
        for t in self.tones:
            if not 0 <= t <= 4:
                raise ParseError(f"tone id {t} out of range 0-4")

    def __len__(self) -> int:
        return len(self.chars)


BUCKET_BOUNDS = (11, 17, 23)  # <=11 | 12-17 | 18-23 | >=24 characters


def bucket_index(length: int) -> int:
    for i, hi in enumerate(BUCKET_BOUNDS):
        if length <= hi:
            return i
    return 3


def bucket_by_length(sentences: Sequence[SentenceAnnotation]) -> list[list[SentenceAnnotation]]:
    buckets: list[list[SentenceAnnotation]] = [[], [], [], []]
    for s in sentences:
        buckets[bucket_index(len(s))].append(s)
    return buckets


def parse_corpus_line(line: str, lineno: int = 0) -> SentenceAnnotation:
    """One sentence per line: chars TAB toned-pinyin [TAB tones], tokens space-separated."""
    fields = line.rstrip("\n").split("\t")
    if len(fields) < 2:
        raise ParseError(f"line {lineno}: expected at least 2 tab-separated fields")
    chars = fields[0].split()
    toned = fields[1].split()
    syllables, tones = [], []
    for tok in toned:
        s, t = parse_toned_pinyin(tok)
        syllables.append(s)
        tones.append(t)
    if len(fields) >= 3 and fields[2].strip():
        tones = []
        for tok in fields[2].split():
            if not tok.isdigit() or int(tok) > 4:
                raise ParseError(f"line {lineno}: bad tone token {tok!r}")
            tones.append(int(tok))
    if not (len(chars) == len(syllables) == len(tones)):
        raise AlignmentError(
            f"line {lineno}: {len(chars)} chars vs {len(syllables)} pinyin "
            f"vs {len(tones)} tones"
        )
    return SentenceAnnotation(chars=chars, pinyin=syllables, tones=tones)


def read_corpus(path) -> list[SentenceAnnotation]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                out.append(parse_corpus_line(line, lineno))
    return out
