"""Deterministic viseme-ambiguous synthetic corpora.

Characters map onto fewer viseme classes than characters, so at least
one pair of characters shares its mouth-shape class while differing in
tone. Frames are feature vectors: a viseme one-hot block, a tone one-hot
block scaled by a configurable amplitude, and Gaussian noise. With zero
amplitude and zero noise, members of a homoviseme pair render
bit-identical frames, so no model can tell them apart from video alone;
sentence-level bigram structure and the tone channel can each be
switched on independently to supply disambiguating signal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, SpecError
from .rng import substream
from .textproc import SentenceAnnotation, Syllable

N_TONES = 5  # four tones plus neutral

_SYL_INITIALS = ("b", "d", "g", "m", "n", "l", "s", "zh", "sh", "k", "t", "p", "f", "h")
_SYL_FINALS = ("a", "i", "u", "e", "o", "ang", "ong", "ai", "ei", "ao", "an", "en")


@dataclass
class SynthSpec:
    n_chars: int = 10
    n_visemes: int = 5
    frame_dim: int = 12
    frames_per_syllable: int = 5
    tone_channel_amplitude: float = 0.5
    noise_sigma: float = 0.1
    bigram_temperature: float = 1.0  # 0 = context-free (unigram) chain
    len_min: int = 3
    len_max: int = 6
    image_mode: bool = False
    image_h: int = 64
    image_w: int = 128
    allow_unambiguous: bool = False

    def validate(self) -> None:
        if self.n_visemes < 1 or self.n_chars < self.n_visemes:
            raise SpecError(
                f"need n_chars >= n_visemes >= 1, got {self.n_chars}/{self.n_visemes}"
            )
        if self.frames_per_syllable < 5:
            raise SpecError("frames_per_syllable must be at least 5 (feature window)")
        if self.tone_channel_amplitude < 0:
            raise SpecError("tone_channel_amplitude must be >= 0")
        if self.len_min < 1 or self.len_max < self.len_min:
            raise SpecError(f"bad sentence length range {self.len_min}-{self.len_max}")
        if not self.image_mode and self.frame_dim < self.n_visemes + N_TONES:
            raise SpecError(
                f"frame_dim {self.frame_dim} too small: needs viseme block "
                f"({self.n_visemes}) plus tone block ({N_TONES})"
            )
        if self.n_visemes > len(_SYL_INITIALS) * len(_SYL_FINALS):
            raise SpecError("too many viseme classes for distinct syllable labels")


@dataclass
class VideoFrames:
    """A sentence's frame sequence: [T x dim] vectors, or flattened images."""

    data: np.ndarray  # float64 [T x dim]
    image_shape: tuple[int, int] | None = None


@dataclass
class LexiconEntry:
    char: str
    viseme: int
    tone: int
    syllable: Syllable


@dataclass
class Lexicon:
    entries: list[LexiconEntry]
    by_char: dict[str, LexiconEntry] = field(init=False)

    def __post_init__(self):
        self.by_char = {e.char: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def homoviseme_partners(self, char: str) -> list[str]:
        e = self.by_char[char]
        return [
            o.char for o in self.entries if o.viseme == e.viseme and o.char != char
        ]

    def homoviseme_pairs(self) -> list[tuple[str, str]]:
        pairs = []
        for i, a in enumerate(self.entries):
            for b in self.entries[i + 1 :]:
                if a.viseme == b.viseme:
                    pairs.append((a.char, b.char))
        return pairs


def _class_syllable(viseme: int) -> Syllable:
    ini = _SYL_INITIALS[viseme % len(_SYL_INITIALS)]
    fin = _SYL_FINALS[(viseme // len(_SYL_INITIALS)) % len(_SYL_FINALS)]
    return Syllable(ini + fin)


def make_lexicon(spec: SynthSpec, seed: int) -> Lexicon:
    """Round-robin characters over viseme classes; same-class characters
    receive distinct tones (ordering shuffled deterministically by seed)."""
    spec.validate()
    per_class = -(-spec.n_chars // spec.n_visemes)  # ceil
    if per_class > N_TONES:
        raise SpecError(
            f"{per_class} characters share a viseme class but only "
            f"{N_TONES} distinct tones exist"
        )
    if spec.n_chars == spec.n_visemes and not spec.allow_unambiguous:
        raise SpecError(
            "n_chars == n_visemes leaves no homoviseme ambiguity "
            "(set allow_unambiguous to permit)"
        )
    rng = substream(seed, "lexicon")
    entries = []
    tone_orders = [rng.permutation(N_TONES) for _ in range(spec.n_visemes)]
    for k in range(spec.n_chars):
        viseme = k % spec.n_visemes
        rank = k // spec.n_visemes
        entries.append(
            LexiconEntry(
                char=chr(0x4E00 + k),
                viseme=viseme,
                tone=int(tone_orders[viseme][rank]),
                syllable=_class_syllable(viseme),
            )
        )
    return Lexicon(entries)


@dataclass
class BigramTable:
    initial: np.ndarray  # [n]
    transitions: np.ndarray  # [n x n], rows normalized

    def validate(self) -> None:
        if not np.allclose(self.initial.sum(), 1.0) or not np.allclose(
            self.transitions.sum(axis=1), 1.0
        ):
            raise SpecError("bigram rows must be normalized")


def make_bigram_table(spec: SynthSpec, seed: int) -> BigramTable:
    """Random sentence chain; temperature 0 gives exactly uniform
    (context-free) rows, larger values give sharper structure."""
    rng = substream(seed, "bigram")
    n = spec.n_chars
    z_init = rng.normal(size=n) * spec.bigram_temperature
    z_trans = rng.normal(size=(n, n)) * spec.bigram_temperature
    initial = np.exp(z_init - z_init.max())
    initial /= initial.sum()
    rows = np.exp(z_trans - z_trans.max(axis=1, keepdims=True))
    rows /= rows.sum(axis=1, keepdims=True)
    return BigramTable(initial=initial, transitions=rows)


def sample_sentence(
    lexicon: Lexicon, table: BigramTable, len_min: int, len_max: int,
    rng: np.random.Generator,
) -> SentenceAnnotation:
    table.validate()
    n = len(lexicon)
    length = int(rng.integers(len_min, len_max + 1))
    ids = [int(rng.choice(n, p=table.initial))]
    while len(ids) < length:
        ids.append(int(rng.choice(n, p=table.transitions[ids[-1]])))
    entries = [lexicon.entries[i] for i in ids]
    return SentenceAnnotation(
        chars=[e.char for e in entries],
        pinyin=[e.syllable for e in entries],
        tones=[e.tone for e in entries],
    )


def _viseme_patch(viseme: int, tone: int, amplitude: float, h: int, w: int) -> np.ndarray:
    """Deterministic grayscale pattern per viseme class: a horizontal bar
    whose vertical position encodes the class; tone shifts brightness."""
    img = np.zeros((h, w))
    band = max(1, h // 8)
    top = (viseme * band) % max(1, h - band + 1)
    img[top : top + band, :] = 1.0
    img += amplitude * (tone / (N_TONES - 1.0)) * 0.5
    return img


def render_frames(
    annotation: SentenceAnnotation, lexicon: Lexicon, spec: SynthSpec,
    rng: np.random.Generator,
) -> VideoFrames:
    """frames_per_syllable vectors per character: viseme one-hot block +
    amplitude-scaled tone one-hot block + Gaussian noise."""
    spec.validate()
    fps = spec.frames_per_syllable
    if spec.image_mode:
        h, w = spec.image_h, spec.image_w
        rows = np.zeros((len(annotation) * fps, h * w))
        for i, ch in enumerate(annotation.chars):
            e = lexicon.by_char[ch]
            patch = _viseme_patch(
                e.viseme, e.tone, spec.tone_channel_amplitude, h, w
            ).reshape(-1)
            rows[i * fps : (i + 1) * fps] = patch
        if spec.noise_sigma > 0:
            rows = rows + rng.normal(0.0, spec.noise_sigma, size=rows.shape)
        return VideoFrames(data=rows, image_shape=(h, w))
    rows = np.zeros((len(annotation) * fps, spec.frame_dim))
    for i, ch in enumerate(annotation.chars):
        e = lexicon.by_char[ch]
        base = np.zeros(spec.frame_dim)
        base[e.viseme] = 1.0
        base[spec.n_visemes + e.tone] = spec.tone_channel_amplitude
        rows[i * fps : (i + 1) * fps] = base
    if spec.noise_sigma > 0:
        rows = rows + rng.normal(0.0, spec.noise_sigma, size=rows.shape)
    return VideoFrames(data=rows)


# ------------------------------------------------------------------ file I/O

_FRAME_MAGIC = struct.Struct("<II")


def write_frame_file(path, frames: VideoFrames) -> None:
    """Little-endian header (u32 T, u32 dim) then float32 rows."""
    t, dim = frames.data.shape
    with open(path, "wb") as f:
        f.write(_FRAME_MAGIC.pack(t, dim))
        f.write(frames.data.astype("<f4").tobytes())


def read_frame_file(path, image_shape: tuple[int, int] | None = None) -> VideoFrames:
    with open(path, "rb") as f:
        header = f.read(_FRAME_MAGIC.size)
        if len(header) != _FRAME_MAGIC.size:
            raise FormatError(f"{path}: truncated frame file header")
        t, dim = _FRAME_MAGIC.unpack(header)
        payload = f.read()
    expected = t * dim * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, dim)
    if image_shape is not None and image_shape[0] * image_shape[1] != dim:
        raise FormatError(f"{path}: dim {dim} does not match image shape {image_shape}")
    return VideoFrames(data=data, image_shape=image_shape)


def _toned_token(syllable: Syllable, tone: int) -> str:
    return f"{syllable.text}{tone}"


def _manifest_line(frames_path: str, ann: SentenceAnnotation) -> str:
    chars = " ".join(ann.chars)
    pinyin = " ".join(_toned_token(s, t) for s, t in zip(ann.pinyin, ann.tones))
    tones = " ".join(str(t) for t in ann.tones)
    return f"{frames_path}\t{chars}\t{pinyin}\t{tones}\n"


SPLITS = ("train", "val", "test")


def generate_dataset(
    spec: SynthSpec, n_train: int, n_val: int, n_test: int, seed: int, out_dir,
    threads: int = 1,
) -> dict[str, Path]:
    """Write frame files plus one manifest per split; fully reproducible
    from `seed`. Splits draw from independent substreams, so resizing one
    split leaves the others' contents unchanged."""
    spec.validate()
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 1:
        raise SpecError("every split needs at least one sample")
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    lexicon = make_lexicon(spec, seed)
    table = make_bigram_table(spec, seed)
    manifests = {}

    def build_sample(split: str, i: int):
        srng = substream(seed, "sample", split, i)
        ann = sample_sentence(lexicon, table, spec.len_min, spec.len_max, srng)
        frames = render_frames(ann, lexicon, spec, srng)
        return ann, frames

    for split in SPLITS:
        lines = []
        indices = range(counts[split])
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                built = list(pool.map(lambda i: build_sample(split, i), indices))
        else:
            built = [build_sample(split, i) for i in indices]
        for i, (ann, frames) in zip(indices, built):
            rel = f"frames/{split}_{i:05d}.bin"
            write_frame_file(out / rel, frames)
            lines.append(_manifest_line(rel, ann))
        manifest = out / f"{split}.manifest.tsv"
        manifest.write_text("".join(lines), encoding="utf-8")
        manifests[split] = manifest
    return manifests


def load_split(data_dir, split: str, image_shape=None):
    """Read a split's manifest, returning (frames, annotation) pairs."""
    from .textproc import parse_corpus_line

    data_dir = Path(data_dir)
    manifest = data_dir / f"{split}.manifest.tsv"
    samples = []
    with open(manifest, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            path, rest = line.split("\t", 1)
            ann = parse_corpus_line(rest, lineno)
            frames = read_frame_file(data_dir / path, image_shape)
            samples.append((frames, ann))
    return samples
