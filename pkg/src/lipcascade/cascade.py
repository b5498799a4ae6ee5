"""The cascaded model: video -> pinyin -> tone -> characters.

Three attention seq2seq sub-networks share one video encoder. The tone
decoder attends over both video and pinyin encoders (dual attention);
the character decoder attends over video, pinyin and tone encoders
(triplet attention). In joint mode the pinyin/tone encoders consume the
downstream-differentiable pre-softmax head hiddens of the previous
stage; in separate mode they consume ground-truth token embeddings.
Greedy decoding always uses the hidden-vector feeding, matching joint
training.

The `no_video` ablation removes the video attentions from the tone and
character stages (video still drives pinyin prediction). The baseline is
a single video -> character attention seq2seq.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import layers as ly
from . import numerics as nm
from .errors import AlignmentError, ConfigError, LengthError
from .numerics import Tensor
from .synthdata import VideoFrames
from .textproc import EOS_ID, PAD_ID, SOS_ID, SentenceAnnotation, Vocab


@dataclass
class ModelConfig:
    v_pinyin: int
    v_tone: int
    v_char: int
    frame_dim: int
    image_shape: tuple[int, int] | None = None
    feat_dim: int = 512
    enc_cell: int = 256
    enc_layers: int = 2
    dec_cell: int = 512
    dec_layers: int = 2
    attn_dim: int = 128
    emb_dim: int = 256  # also the head hidden size, so hiddens can replace embeddings
    conv_mid: int = 8
    mode: str = "full"  # full | no_video

    def validate(self) -> None:
        if self.mode not in ("full", "no_video"):
            raise ConfigError(f"unknown cascade mode {self.mode!r}")
        for name in ("v_pinyin", "v_tone", "v_char"):
            if getattr(self, name) < 4:
                raise ConfigError(f"{name} must cover the 3 specials plus content")


def _embed(table: Tensor, token_id: int) -> Tensor:
    return nm.reshape(nm.gather_rows(table, [token_id]), (table.shape[1],))


def _init_embedding(rng, vocab_size: int, dim: int) -> Tensor:
    return nm.tensor(rng.uniform(-0.1, 0.1, size=(vocab_size, dim)), requires_grad=True)


class CascadeModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        d_e = 2 * cfg.enc_cell
        self.feat = ly.make_frame_feature_params(
            cfg.frame_dim, cfg.feat_dim, rng, cfg.image_shape, cfg.conv_mid
        )
        self.video_enc = ly.BiGRUEncoderParams.create(
            cfg.feat_dim, cfg.enc_cell, cfg.enc_layers, rng
        )
        self.emb_pinyin = _init_embedding(rng, cfg.v_pinyin, cfg.emb_dim)
        self.emb_tone = _init_embedding(rng, cfg.v_tone, cfg.emb_dim)
        self.emb_char = _init_embedding(rng, cfg.v_char, cfg.emb_dim)

        self.pinyin_dec = ly.GRUDecoderParams.create(
            cfg.emb_dim, cfg.dec_cell, cfg.dec_layers, d_e, rng
        )
        self.attn_pinyin_video = ly.AttentionParams.create(cfg.dec_cell, d_e, cfg.attn_dim, rng)
        self.pinyin_head = ly.OutputHeadParams.create(
            cfg.dec_cell, [d_e], cfg.emb_dim, cfg.v_pinyin, rng
        )

        self.pinyin_enc = ly.BiGRUEncoderParams.create(
            cfg.emb_dim, cfg.enc_cell, cfg.enc_layers, rng
        )
        self.tone_dec = ly.GRUDecoderParams.create(
            cfg.emb_dim, cfg.dec_cell, cfg.dec_layers, d_e, rng
        )
        full = cfg.mode == "full"
        self.attn_tone_video = (
            ly.AttentionParams.create(cfg.dec_cell, d_e, cfg.attn_dim, rng) if full else None
        )
        self.attn_tone_pinyin = ly.AttentionParams.create(cfg.dec_cell, d_e, cfg.attn_dim, rng)
        self.tone_head = ly.OutputHeadParams.create(
            cfg.dec_cell, [d_e] * (2 if full else 1), cfg.emb_dim, cfg.v_tone, rng
        )

        self.tone_enc = ly.BiGRUEncoderParams.create(
            cfg.emb_dim, cfg.enc_cell, cfg.enc_layers, rng
        )
        self.char_dec = ly.GRUDecoderParams.create(
            cfg.emb_dim, cfg.dec_cell, cfg.dec_layers, d_e, rng
        )
        self.attn_char_video = (
            ly.AttentionParams.create(cfg.dec_cell, d_e, cfg.attn_dim, rng) if full else None
        )
        self.attn_char_pinyin = ly.AttentionParams.create(cfg.dec_cell, d_e, cfg.attn_dim, rng)
        self.attn_char_tone = ly.AttentionParams.create(cfg.dec_cell, d_e, cfg.attn_dim, rng)
        self.char_head = ly.OutputHeadParams.create(
            cfg.dec_cell, [d_e] * (3 if full else 2), cfg.emb_dim, cfg.v_char, rng
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.feat.named("feat"))
        out.update(self.video_enc.named("video_enc"))
        out["emb.pinyin"] = self.emb_pinyin
        out["emb.tone"] = self.emb_tone
        out["emb.char"] = self.emb_char
        out.update(self.pinyin_dec.named("pinyin_dec"))
        out.update(self.attn_pinyin_video.named("attn.pinyin_video"))
        out.update(self.pinyin_head.named("pinyin_head"))
        out.update(self.pinyin_enc.named("pinyin_enc"))
        out.update(self.tone_dec.named("tone_dec"))
        if self.attn_tone_video is not None:
            out.update(self.attn_tone_video.named("attn.tone_video"))
        out.update(self.attn_tone_pinyin.named("attn.tone_pinyin"))
        out.update(self.tone_head.named("tone_head"))
        out.update(self.tone_enc.named("tone_enc"))
        out.update(self.char_dec.named("char_dec"))
        if self.attn_char_video is not None:
            out.update(self.attn_char_video.named("attn.char_video"))
        out.update(self.attn_char_pinyin.named("attn.char_pinyin"))
        out.update(self.attn_char_tone.named("attn.char_tone"))
        out.update(self.char_head.named("char_head"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class BaselineModel:
    """Single-attention video -> character seq2seq (no intermediate stages)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        d_e = 2 * cfg.enc_cell
        self.feat = ly.make_frame_feature_params(
            cfg.frame_dim, cfg.feat_dim, rng, cfg.image_shape, cfg.conv_mid
        )
        self.video_enc = ly.BiGRUEncoderParams.create(
            cfg.feat_dim, cfg.enc_cell, cfg.enc_layers, rng
        )
        self.emb_char = _init_embedding(rng, cfg.v_char, cfg.emb_dim)
        self.char_dec = ly.GRUDecoderParams.create(
            cfg.emb_dim, cfg.dec_cell, cfg.dec_layers, d_e, rng
        )
        self.attn_char_video = ly.AttentionParams.create(cfg.dec_cell, d_e, cfg.attn_dim, rng)
        self.char_head = ly.OutputHeadParams.create(
            cfg.dec_cell, [d_e], cfg.emb_dim, cfg.v_char, rng
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.feat.named("feat"))
        out.update(self.video_enc.named("video_enc"))
        out["emb.char"] = self.emb_char
        out.update(self.char_dec.named("char_dec"))
        out.update(self.attn_char_video.named("attn.char_video"))
        out.update(self.char_head.named("char_head"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


# ------------------------------------------------------------------ datasets


@dataclass
class EncodedSample:
    frames: VideoFrames
    annotation: SentenceAnnotation
    pinyin_ids: list[int]  # [sos, p1..pn, eos]
    tone_ids: list[int]
    char_ids: list[int]


@dataclass
class Dataset:
    samples: list[EncodedSample]
    pinyin_vocab: Vocab
    tone_vocab: Vocab
    char_vocab: Vocab

    def __len__(self) -> int:
        return len(self.samples)


def encode_sample(
    frames: VideoFrames, ann: SentenceAnnotation,
    pinyin_vocab: Vocab, tone_vocab: Vocab, char_vocab: Vocab,
) -> EncodedSample:
    return EncodedSample(
        frames=frames,
        annotation=ann,
        pinyin_ids=[SOS_ID] + pinyin_vocab.encode([s.text for s in ann.pinyin]),
        tone_ids=[SOS_ID] + tone_vocab.encode([str(t) for t in ann.tones]),
        char_ids=[SOS_ID] + char_vocab.encode(ann.chars),
    )


def build_dataset(raw_samples, pinyin_vocab, tone_vocab, char_vocab) -> Dataset:
    return Dataset(
        samples=[
            encode_sample(fr, ann, pinyin_vocab, tone_vocab, char_vocab)
            for fr, ann in raw_samples
        ],
        pinyin_vocab=pinyin_vocab,
        tone_vocab=tone_vocab,
        char_vocab=char_vocab,
    )


# --------------------------------------------------------------- sub-forwards


@dataclass
class SubnetResult:
    log_probs: Tensor  # [L x V]
    hiddens: Tensor  # [L x emb_dim]
    encoder: ly.EncoderStates  # the encoder this stage introduced
    attention: dict[str, np.ndarray]


def _teacher_decode(
    dec: ly.GRUDecoderParams,
    emb: Tensor,
    head: ly.OutputHeadParams,
    attn_pairs: Sequence[tuple[str, ly.AttentionParams, ly.EncoderStates]],
    bridge_enc: ly.EncoderStates,
    targets: Sequence[int],
    sampling_rate: float,
    rng: np.random.Generator,
) -> SubnetResult:
    """Run a decoder over targets = [sos, t1.., eos], predicting targets[1:].

    At step i > 0 the input token is targets[i] with probability
    `sampling_rate`, otherwise the model's own previous argmax
    (per-timestep independent draws)."""
    if len(targets) < 2:
        raise LengthError("decoder targets need at least [sos] plus one token")
    state = ly.decoder_init_state(dec, bridge_enc.final_state)
    log_rows, hid_rows = [], []
    weights: dict[str, list] = {name: [] for name, _, _ in attn_pairs}
    prev_id = targets[0]
    for i in range(len(targets) - 1):
        if i > 0:
            use_gold = sampling_rate >= 1.0 or rng.random() < sampling_rate
            prev_id = targets[i] if use_gold else int(np.argmax(log_rows[-1].data))
        x = _embed(emb, prev_id)
        state = ly.decoder_step(dec, state, x)
        contexts = []
        for name, attn, enc in attn_pairs:
            ctx = ly.attend(attn, state.top, enc)
            weights[name].append(ctx.weights.data)
            contexts.append(ctx)
        hidden, lp = ly.output_head(head, state, contexts)
        hid_rows.append(hidden)
        log_rows.append(lp)
    return SubnetResult(
        log_probs=nm.stack_rows(log_rows),
        hiddens=nm.stack_rows(hid_rows),
        encoder=bridge_enc,
        attention={name: np.stack(ws) for name, ws in weights.items()},
    )


def pinyin_subnet_forward(
    model: CascadeModel, frames: VideoFrames, pinyin_ids: Sequence[int],
    sampling_rate: float, rng: np.random.Generator,
) -> SubnetResult:
    feats = ly.frame_features(model.feat, frames)
    video_enc = ly.encoder_forward(model.video_enc, feats)
    return _teacher_decode(
        model.pinyin_dec, model.emb_pinyin, model.pinyin_head,
        [("pinyin.video", model.attn_pinyin_video, video_enc)],
        video_enc, pinyin_ids, sampling_rate, rng,
    )


def tone_subnet_forward(
    model: CascadeModel, video_enc: ly.EncoderStates, pinyin_feed: Tensor,
    tone_ids: Sequence[int], sampling_rate: float, rng: np.random.Generator,
) -> SubnetResult:
    if pinyin_feed.shape[0] != len(tone_ids) - 1:
        raise AlignmentError(
            f"pinyin feed has {pinyin_feed.shape[0]} steps for "
            f"{len(tone_ids) - 1} tone targets"
        )
    pinyin_enc = ly.encoder_forward(model.pinyin_enc, pinyin_feed)
    pairs = []
    if model.attn_tone_video is not None:
        pairs.append(("tone.video", model.attn_tone_video, video_enc))
    pairs.append(("tone.pinyin", model.attn_tone_pinyin, pinyin_enc))
    return _teacher_decode(
        model.tone_dec, model.emb_tone, model.tone_head,
        pairs, pinyin_enc, tone_ids, sampling_rate, rng,
    )


def char_subnet_forward(
    model: CascadeModel, video_enc: ly.EncoderStates, pinyin_enc: ly.EncoderStates,
    tone_feed: Tensor, char_ids: Sequence[int], sampling_rate: float,
    rng: np.random.Generator,
) -> SubnetResult:
    if tone_feed.shape[0] != len(char_ids) - 1:
        raise AlignmentError(
            f"tone feed has {tone_feed.shape[0]} steps for "
            f"{len(char_ids) - 1} character targets"
        )
    tone_enc = ly.encoder_forward(model.tone_enc, tone_feed)
    pairs = []
    if model.attn_char_video is not None:
        pairs.append(("char.video", model.attn_char_video, video_enc))
    pairs.append(("char.pinyin", model.attn_char_pinyin, pinyin_enc))
    pairs.append(("char.tone", model.attn_char_tone, tone_enc))
    return _teacher_decode(
        model.char_dec, model.emb_char, model.char_head,
        pairs, tone_enc, char_ids, sampling_rate, rng,
    )


@dataclass
class CascadeOutput:
    pinyin_log_probs: Tensor
    tone_log_probs: Tensor
    char_log_probs: Tensor
    pinyin_hiddens: Tensor
    tone_hiddens: Tensor
    attention: dict[str, np.ndarray] = field(default_factory=dict)


def cascade_forward(
    model: CascadeModel, sample: EncodedSample, joint: bool,
    sampling_rate: float, rng: np.random.Generator,
) -> CascadeOutput:
    """Compose the three stages. joint=True feeds head hiddens downstream;
    joint=False feeds ground-truth token embeddings (separate training)."""
    if not (len(sample.pinyin_ids) == len(sample.tone_ids) == len(sample.char_ids)):
        raise AlignmentError(
            f"sample streams disagree: {len(sample.pinyin_ids)} pinyin ids, "
            f"{len(sample.tone_ids)} tone ids, {len(sample.char_ids)} char ids"
        )
    p_res = pinyin_subnet_forward(
        model, sample.frames, sample.pinyin_ids, sampling_rate, rng
    )
    pinyin_feed = (
        p_res.hiddens if joint else nm.gather_rows(model.emb_pinyin, sample.pinyin_ids[1:])
    )
    t_res = tone_subnet_forward(
        model, p_res.encoder, pinyin_feed, sample.tone_ids, sampling_rate, rng
    )
    tone_feed = (
        t_res.hiddens if joint else nm.gather_rows(model.emb_tone, sample.tone_ids[1:])
    )
    c_res = char_subnet_forward(
        model, p_res.encoder, t_res.encoder, tone_feed, sample.char_ids,
        sampling_rate, rng,
    )
    attention = {}
    for res in (p_res, t_res, c_res):
        attention.update(res.attention)
    return CascadeOutput(
        pinyin_log_probs=p_res.log_probs,
        tone_log_probs=t_res.log_probs,
        char_log_probs=c_res.log_probs,
        pinyin_hiddens=p_res.hiddens,
        tone_hiddens=t_res.hiddens,
        attention=attention,
    )


def cascade_loss(
    out: CascadeOutput, sample: EncodedSample
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Pad-masked NLL sums per stage; total is their plain sum."""
    loss_p = nm.nll_loss(out.pinyin_log_probs, sample.pinyin_ids[1:], PAD_ID)
    loss_t = nm.nll_loss(out.tone_log_probs, sample.tone_ids[1:], PAD_ID)
    loss_c = nm.nll_loss(out.char_log_probs, sample.char_ids[1:], PAD_ID)
    total = nm.add(nm.add(loss_p, loss_t), loss_c)
    return total, loss_p, loss_t, loss_c


# ------------------------------------------------------------ greedy decoding


@dataclass
class StageDecode:
    ids: list[int]  # emitted tokens, including a trailing [eos] when produced
    hiddens: Tensor  # [steps x emb_dim]
    attention: dict[str, np.ndarray]

    @property
    def content(self) -> list[int]:
        return [i for i in self.ids if i not in (SOS_ID, EOS_ID, PAD_ID)]


def _greedy_stage(
    dec, emb, head, attn_pairs, bridge_enc, max_len: int
) -> StageDecode:
    if max_len < 1:
        raise LengthError("max_len must be >= 1")
    state = ly.decoder_init_state(dec, bridge_enc.final_state)
    ids: list[int] = []
    hid_rows = []
    weights: dict[str, list] = {name: [] for name, _, _ in attn_pairs}
    prev = SOS_ID
    for _ in range(max_len):
        x = _embed(emb, prev)
        state = ly.decoder_step(dec, state, x)
        contexts = []
        for name, attn, enc in attn_pairs:
            ctx = ly.attend(attn, state.top, enc)
            weights[name].append(ctx.weights.data)
            contexts.append(ctx)
        hidden, lp = ly.output_head(head, state, contexts)
        tok = int(np.argmax(lp.data))
        ids.append(tok)
        hid_rows.append(hidden)
        if tok == EOS_ID:
            break
        prev = tok
    return StageDecode(
        ids=ids,
        hiddens=nm.stack_rows(hid_rows),
        attention={name: np.stack(ws) for name, ws in weights.items()},
    )


@dataclass
class DecodeResult:
    pinyin: StageDecode
    tone: StageDecode
    char: StageDecode

    @property
    def attention(self) -> dict[str, np.ndarray]:
        maps = {}
        for stage in (self.pinyin, self.tone, self.char):
            maps.update(stage.attention)
        return maps


def decode_pinyin(model: CascadeModel, frames: VideoFrames, max_len: int):
    feats = ly.frame_features(model.feat, frames)
    video_enc = ly.encoder_forward(model.video_enc, feats)
    stage = _greedy_stage(
        model.pinyin_dec, model.emb_pinyin, model.pinyin_head,
        [("pinyin.video", model.attn_pinyin_video, video_enc)],
        video_enc, max_len,
    )
    return stage, video_enc


def decode_tone(
    model: CascadeModel, video_enc, pinyin_feed: Tensor, max_len: int
):
    pinyin_enc = ly.encoder_forward(model.pinyin_enc, pinyin_feed)
    pairs = []
    if model.attn_tone_video is not None:
        pairs.append(("tone.video", model.attn_tone_video, video_enc))
    pairs.append(("tone.pinyin", model.attn_tone_pinyin, pinyin_enc))
    stage = _greedy_stage(
        model.tone_dec, model.emb_tone, model.tone_head, pairs, pinyin_enc, max_len
    )
    return stage, pinyin_enc


def decode_char(
    model: CascadeModel, video_enc, pinyin_enc, tone_feed: Tensor, max_len: int
):
    tone_enc = ly.encoder_forward(model.tone_enc, tone_feed)
    pairs = []
    if model.attn_char_video is not None:
        pairs.append(("char.video", model.attn_char_video, video_enc))
    pairs.append(("char.pinyin", model.attn_char_pinyin, pinyin_enc))
    pairs.append(("char.tone", model.attn_char_tone, tone_enc))
    stage = _greedy_stage(
        model.char_dec, model.emb_char, model.char_head, pairs, tone_enc, max_len
    )
    return stage, tone_enc


def greedy_decode(model: CascadeModel, frames: VideoFrames, max_len: int) -> DecodeResult:
    """Greedy cascade decoding; each stage feeds its head hiddens onward,
    exactly as in joint training. Deterministic."""
    with nm.no_grad():
        pinyin, video_enc = decode_pinyin(model, frames, max_len)
        tone, pinyin_enc = decode_tone(model, video_enc, pinyin.hiddens, max_len)
        char, _ = decode_char(model, video_enc, pinyin_enc, tone.hiddens, max_len)
    return DecodeResult(pinyin=pinyin, tone=tone, char=char)


def baseline_forward(
    model: BaselineModel, frames: VideoFrames, char_ids: Sequence[int],
    sampling_rate: float, rng: np.random.Generator,
) -> SubnetResult:
    feats = ly.frame_features(model.feat, frames)
    video_enc = ly.encoder_forward(model.video_enc, feats)
    return _teacher_decode(
        model.char_dec, model.emb_char, model.char_head,
        [("char.video", model.attn_char_video, video_enc)],
        video_enc, char_ids, sampling_rate, rng,
    )


def baseline_decode(model: BaselineModel, frames: VideoFrames, max_len: int) -> StageDecode:
    with nm.no_grad():
        feats = ly.frame_features(model.feat, frames)
        video_enc = ly.encoder_forward(model.video_enc, feats)
        return _greedy_stage(
            model.char_dec, model.emb_char, model.char_head,
            [("char.video", model.attn_char_video, video_enc)],
            video_enc, max_len,
        )
