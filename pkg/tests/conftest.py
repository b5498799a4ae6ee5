import numpy as np
import pytest

from lipcascade import cascade as cs
from lipcascade.synthdata import VideoFrames
from lipcascade.textproc import EOS_ID, SOS_ID


def tiny_config(mode="full", **kw):
    defaults = dict(
        v_pinyin=7, v_tone=8, v_char=9, frame_dim=6,
        feat_dim=5, enc_cell=3, enc_layers=2, dec_cell=4, dec_layers=2,
        attn_dim=4, emb_dim=5, mode=mode,
    )
    defaults.update(kw)
    return cs.ModelConfig(**defaults)


def tiny_model(mode="full", seed=0, **kw):
    return cs.CascadeModel(tiny_config(mode=mode, **kw), np.random.default_rng(seed))


def make_sample(n_chars=2, n_frames=9, frame_dim=6, seed=0, cfg=None):
    """Hand-built encoded sample with aligned id streams of n_chars tokens."""
    rng = np.random.default_rng(seed)
    if cfg is None:
        cfg = tiny_config()
    frames = VideoFrames(data=rng.normal(size=(n_frames, frame_dim)))

    def stream(v):
        content = [int(rng.integers(3, v)) for _ in range(n_chars)]
        return [SOS_ID] + content + [EOS_ID]

    from lipcascade.textproc import SentenceAnnotation, Syllable

    ann = SentenceAnnotation(
        chars=[f"z{i}" for i in range(n_chars)],
        pinyin=[Syllable("ma")] * n_chars,
        tones=[1] * n_chars,
    )
    return cs.EncodedSample(
        frames=frames,
        annotation=ann,
        pinyin_ids=stream(cfg.v_pinyin),
        tone_ids=stream(cfg.v_tone),
        char_ids=stream(cfg.v_char),
    )


@pytest.fixture
def rng0():
    return np.random.default_rng(0)
