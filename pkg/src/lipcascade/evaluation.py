"""Edit-distance error rates, per-stage evaluation reports, attention export."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cascade as cs
from . import layers as ly
from . import numerics as nm
from .errors import UndefinedRateError


@dataclass
class EditOps:
    S: int
    D: int
    I: int
    N: int

    @property
    def total(self) -> int:
        return self.S + self.D + self.I

    @property
    def rate(self) -> float:
        if self.N == 0:
            raise UndefinedRateError("error rate over an empty reference")
        return self.total / self.N


def edit_distance(ref: Sequence, hyp: Sequence) -> EditOps:
    """Minimal (substitutions, deletions, insertions) from ref to hyp.

    Backtrace ties prefer substitution over insertion over deletion; the
    total distance is tie-invariant.
    """
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(sub, dist[i, j - 1] + 1, dist[i - 1, j] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                s += 1
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return EditOps(S=s, D=d, I=ins, N=n)


def error_rate(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    """Corpus-pooled rate: sum of edit operations over sum of reference lengths."""
    if not pairs:
        raise UndefinedRateError("error rate over an empty pair list")
    ops = [edit_distance(ref, hyp) for ref, hyp in pairs]
    total_n = sum(o.N for o in ops)
    if total_n == 0:
        raise UndefinedRateError("error rate over empty references")
    return sum(o.total for o in ops) / total_n


@dataclass
class EvalReport:
    """Per-stage rows (teacher-forced upstream inputs) plus overall
    greedy-cascade rates. Baseline models fill only overall_cer."""

    overall_cer: float
    overall_per: float | None = None
    overall_ter: float | None = None
    v2p_per: float | None = None
    vp2t_ter: float | None = None
    vpt2c_cer: float | None = None

    def to_text(self) -> str:
        fields = [
            ("overall.cer", self.overall_cer),
            ("overall.per", self.overall_per),
            ("overall.ter", self.overall_ter),
            ("v2p.per", self.v2p_per),
            ("vp2t.ter", self.vp2t_ter),
            ("vpt2c.cer", self.vpt2c_cer),
        ]
        return "".join(f"{k}={v!r}\n" for k, v in fields if v is not None)


def _tokens(vocab, ids):
    return vocab.decode(ids)


def evaluate(model, dataset: cs.Dataset, max_len: int) -> EvalReport:
    """Greedy decoding over a dataset.

    Overall rates come from the full cascade decode. The per-stage rows
    mirror a separately-measured-sub-network table: V2P decodes pinyin
    from frames alone, VP2T decodes tones given ground-truth pinyin,
    VPT2C decodes characters given ground-truth pinyin and tones.
    """
    if len(dataset) == 0:
        raise UndefinedRateError("cannot evaluate an empty dataset")
    char_pairs, pinyin_pairs, tone_pairs = [], [], []
    v2p_pairs, vp2t_pairs, vpt2c_pairs = [], [], []
    baseline = isinstance(model, cs.BaselineModel)
    for sample in dataset.samples:
        ann = sample.annotation
        ref_chars = ann.chars
        ref_pinyin = [s.text for s in ann.pinyin]
        ref_tones = [str(t) for t in ann.tones]
        if baseline:
            out = cs.baseline_decode(model, sample.frames, max_len)
            char_pairs.append((ref_chars, _tokens(dataset.char_vocab, out.content)))
            continue
        res = cs.greedy_decode(model, sample.frames, max_len)
        char_pairs.append((ref_chars, _tokens(dataset.char_vocab, res.char.content)))
        pinyin_pairs.append((ref_pinyin, _tokens(dataset.pinyin_vocab, res.pinyin.content)))
        tone_pairs.append((ref_tones, _tokens(dataset.tone_vocab, res.tone.content)))
        v2p_pairs.append(pinyin_pairs[-1])
        with nm.no_grad():
            feats = ly.frame_features(model.feat, sample.frames)
            video_enc = ly.encoder_forward(model.video_enc, feats)
            gold_pinyin_feed = nm.gather_rows(model.emb_pinyin, sample.pinyin_ids[1:])
            tone_stage, pinyin_enc = cs.decode_tone(
                model, video_enc, gold_pinyin_feed, max_len
            )
            gold_tone_feed = nm.gather_rows(model.emb_tone, sample.tone_ids[1:])
            char_stage, _ = cs.decode_char(
                model, video_enc, pinyin_enc, gold_tone_feed, max_len
            )
        vp2t_pairs.append((ref_tones, _tokens(dataset.tone_vocab, tone_stage.content)))
        vpt2c_pairs.append((ref_chars, _tokens(dataset.char_vocab, char_stage.content)))
    if baseline:
        return EvalReport(overall_cer=error_rate(char_pairs))
    return EvalReport(
        overall_cer=error_rate(char_pairs),
        overall_per=error_rate(pinyin_pairs),
        overall_ter=error_rate(tone_pairs),
        v2p_per=error_rate(v2p_pairs),
        vp2t_ter=error_rate(vp2t_pairs),
        vpt2c_cer=error_rate(vpt2c_pairs),
    )


def _encoder_labels(
    name: str, width: int, decoded: cs.DecodeResult | None, vocabs
) -> list[str]:
    source = name.split(".")[1]
    if source == "video" or decoded is None:
        return [f"window_{j}" for j in range(width)]
    pinyin_vocab, tone_vocab, _ = vocabs
    stage, vocab = (
        (decoded.pinyin, pinyin_vocab) if source == "pinyin"
        else (decoded.tone, tone_vocab)
    )
    labels = [f"step_{j}" for j in range(width)]
    for j, tok in enumerate(stage.ids[:width]):
        labels[j] = vocab.token(tok)
    return labels


def _write_pgm(path: Path, matrix: np.ndarray) -> None:
    levels = np.clip(np.rint(matrix * 255), 0, 255).astype(int)
    lines = [f"P2\n{matrix.shape[1]} {matrix.shape[0]}\n255\n"]
    for row in levels:
        lines.append(" ".join(str(v) for v in row) + "\n")
    path.write_text("".join(lines))


def dump_attention(
    model, sample: cs.EncodedSample, vocabs, out_dir, max_len: int = 40,
    write_pgm: bool = False,
) -> list[Path]:
    """Decode one sample and write each attention matrix as comma-separated
    text (one decoder step per line) plus a JSON sidecar with row/column
    token labels; optionally a portable graymap (weight 1 -> white)."""
    pinyin_vocab, tone_vocab, char_vocab = vocabs
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if isinstance(model, cs.BaselineModel):
        stage = cs.baseline_decode(model, sample.frames, max_len)
        maps = stage.attention
        row_tokens = {"char": [char_vocab.token(i) for i in stage.ids]}
        decoded = None
    else:
        decoded = cs.greedy_decode(model, sample.frames, max_len)
        maps = decoded.attention
        row_tokens = {
            "pinyin": [pinyin_vocab.token(i) for i in decoded.pinyin.ids],
            "tone": [tone_vocab.token(i) for i in decoded.tone.ids],
            "char": [char_vocab.token(i) for i in decoded.char.ids],
        }
    for name, matrix in sorted(maps.items()):
        base = name.replace(".", "_")
        csv_path = out / f"{base}.csv"
        with open(csv_path, "w", encoding="utf-8") as f:
            for row in matrix:
                f.write(",".join(repr(float(v)) for v in row) + "\n")
        meta = {
            "attention": name,
            "rows": row_tokens[name.split(".")[0]],
            "cols": _encoder_labels(name, matrix.shape[1], decoded, vocabs),
        }
        meta_path = out / f"{base}.meta.json"
        meta_path.write_text(json.dumps(meta, ensure_ascii=False, indent=1))
        written.extend([csv_path, meta_path])
        if write_pgm:
            pgm_path = out / f"{base}.pgm"
            _write_pgm(pgm_path, matrix)
            written.append(pgm_path)
    return written
