"""Command-line entry point.

Subcommands: synth-gen | train | eval | decode | dump-attention | grad-check.
Exit codes: 0 success, 1 usage error, 2 data/format/config error,
3 numeric failure (non-finite values, failed gradient check).
stdout carries machine-readable results; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import cascade as cs
from . import evaluation as ev
from . import layers as ly
from . import numerics as nm
from . import synthdata as sd
from . import textproc as tp
from . import training as tr
from .config import RunConfig, parse_config
from .errors import (
    AlignmentError, ConfigError, FormatError, LengthError, NumericError,
    ParseError, ShapeError, SpecError, UndefinedRateError, VocabError,
)

USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _split_overrides(extras: list[str]) -> list[tuple[str, str]]:
    """Turn trailing `--some.key value` pairs into override tuples."""
    overrides = []
    i = 0
    while i < len(extras):
        flag = extras[i]
        if not flag.startswith("--") or i + 1 >= len(extras):
            raise UsageError(f"expected '--key value' overrides, got {extras[i:]!r}")
        overrides.append((flag[2:], extras[i + 1]))
        i += 2
    return overrides


def _load_config(args, extras) -> RunConfig:
    overrides = _split_overrides(extras)
    if getattr(args, "seed", None) is not None:
        overrides.append(("seed", str(args.seed)))
    if getattr(args, "threads", None) is not None:
        overrides.append(("threads", str(args.threads)))
    return parse_config(args.config, overrides)


def _write_echo(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.txt").write_text(cfg.to_text(), encoding="utf-8")


def _build_vocabs(cfg: RunConfig, annotations):
    min_count = cfg["data.min_count"]
    pinyin_vocab = tp.build_vocab(
        ([s.text for s in a.pinyin] for a in annotations), min_count
    )
    tone_vocab = tp.build_vocab(
        ([str(t) for t in a.tones] for a in annotations), min_count
    )
    char_vocab = tp.build_vocab((a.chars for a in annotations), min_count)
    return pinyin_vocab, tone_vocab, char_vocab


def _image_shape(cfg: RunConfig):
    if cfg["data.image_mode"]:
        return (cfg["data.image_h"], cfg["data.image_w"])
    return None


def _load_datasets(cfg: RunConfig, data_dir, splits):
    raw = {s: sd.load_split(data_dir, s, _image_shape(cfg)) for s in splits}
    train_annotations = [ann for _, ann in raw.get("train", [])]
    if not train_annotations:  # vocab always comes from the training split
        train_raw = sd.load_split(data_dir, "train", _image_shape(cfg))
        train_annotations = [ann for _, ann in train_raw]
    vocabs = _build_vocabs(cfg, train_annotations)
    return {s: cs.build_dataset(raw[s], *vocabs) for s in splits}, vocabs


def _build_model(cfg: RunConfig, vocabs, rng):
    pinyin_vocab, tone_vocab, char_vocab = vocabs
    mcfg = cfg.model_config(len(pinyin_vocab), len(tone_vocab), len(char_vocab))
    if cfg["model.mode"] == "baseline_was":
        return cs.BaselineModel(mcfg, rng)
    return cs.CascadeModel(mcfg, rng)


def cmd_synth_gen(args, extras) -> int:
    cfg = _load_config(args, extras)
    out = Path(args.out)
    _write_echo(cfg, out)
    manifests = sd.generate_dataset(
        cfg.synth_spec(),
        cfg["data.n_train"], cfg["data.n_val"], cfg["data.n_test"],
        cfg["seed"], out, threads=cfg["threads"],
    )
    for split in sd.SPLITS:
        print(f"{split}={manifests[split]}")
    return 0


def cmd_train(args, extras) -> int:
    cfg = _load_config(args, extras)
    out = Path(args.out)
    _write_echo(cfg, out)
    datasets, vocabs = _load_datasets(cfg, args.data, ("train", "val"))
    from .rng import substream

    model = _build_model(cfg, vocabs, substream(cfg["seed"], "init"))
    _log(f"training {cfg['model.mode']} model on {len(datasets['train'])} samples")
    history = tr.train(
        model, datasets["train"], datasets["val"], cfg.train_config(),
        out_dir=out, config_echo=cfg.to_text(),
    )
    for r in history.records:
        _log(f"epoch {r.epoch}: loss={r.loss:.4f} val_cer={r.val_cer:.4f} lr={r.lr:g}")
    print(f"best_epoch={history.best_epoch}")
    print(f"best_val_cer={float(history.best_val_cer)!r}")
    return 0


def cmd_eval(args, extras) -> int:
    cfg = _load_config(args, extras)
    model, _, _ = tr.load_checkpoint(args.ckpt)
    datasets, _ = _load_datasets(cfg, args.data, (args.split,))
    report = ev.evaluate(model, datasets[args.split], cfg["eval.max_len"])
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        _write_echo(cfg, out)
        (out / "eval_report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_decode(args, extras) -> int:
    cfg = _load_config(args, extras)
    model, _, _ = tr.load_checkpoint(args.ckpt)
    datasets, vocabs = _load_datasets(cfg, args.data, (args.split,))
    pinyin_vocab, tone_vocab, char_vocab = vocabs
    dataset = datasets[args.split]
    indices = [args.sample] if args.sample is not None else range(len(dataset))
    for i in indices:
        sample = dataset.samples[i]
        if isinstance(model, cs.BaselineModel):
            stage = cs.baseline_decode(model, sample.frames, cfg["eval.max_len"])
            chars = " ".join(char_vocab.decode(stage.content))
            print(f"{i}\t{chars}")
            continue
        res = cs.greedy_decode(model, sample.frames, cfg["eval.max_len"])
        chars = " ".join(char_vocab.decode(res.char.content))
        pinyin = " ".join(pinyin_vocab.decode(res.pinyin.content))
        tones = " ".join(tone_vocab.decode(res.tone.content))
        print(f"{i}\t{chars}\t{pinyin}\t{tones}")
    return 0


def cmd_dump_attention(args, extras) -> int:
    cfg = _load_config(args, extras)
    model, _, _ = tr.load_checkpoint(args.ckpt)
    datasets, vocabs = _load_datasets(cfg, args.data, (args.split,))
    out = Path(args.out)
    _write_echo(cfg, out)
    sample = datasets[args.split].samples[args.sample]
    written = ev.dump_attention(
        model, sample, vocabs, out, cfg["eval.max_len"], write_pgm=args.pgm
    )
    for path in written:
        print(path)
    return 0


def _layer_grad_checks(cfg: RunConfig):
    """Small isolated checks for each layer kind; yields (name, report)."""
    rng = np.random.default_rng(cfg["seed"])
    cell = ly.GRUCellParams.create(3, 4, rng)
    x = nm.tensor(rng.normal(size=3))
    h = nm.tensor(rng.normal(size=4))
    yield "gru_cell", nm.grad_check(
        lambda: nm.sum_all(ly.gru_cell_step(cell, x, h)), dict(cell.named("gru"))
    )
    enc = ly.BiGRUEncoderParams.create(3, 2, 2, rng)
    enc_in = nm.tensor(rng.normal(size=(4, 3)))

    def enc_loss():
        out = ly.encoder_forward(enc, enc_in)
        return nm.add(nm.sum_all(out.states), nm.sum_all(out.final_state))

    yield "encoder", nm.grad_check(enc_loss, dict(enc.named("enc")), max_coords=8)
    attn = ly.AttentionParams.create(4, 6, 5, rng)
    states = ly.EncoderStates(nm.tensor(rng.normal(size=(5, 6))), nm.tensor(rng.normal(size=6)))
    query = nm.tensor(rng.normal(size=4))
    probe = nm.tensor(rng.normal(size=6))
    yield "attention", nm.grad_check(
        lambda: nm.matmul(ly.attend(attn, query, states).values, probe),
        dict(attn.named("attn")),
    )
    head = ly.OutputHeadParams.create(4, [6, 6, 6], 5, 7, rng)
    dec_state = ly.DecoderState([nm.tensor(rng.normal(size=4))])
    ctxs = [
        ly.ContextVector(nm.tensor(rng.normal(size=6)), nm.tensor([1.0]))
        for _ in range(3)
    ]

    def head_loss():
        _, lp = ly.output_head(head, dec_state, ctxs)
        return nm.nll_loss(nm.reshape(lp, (1, 7)), [2])

    yield "output_head", nm.grad_check(head_loss, dict(head.named("head")))
    feat = ly.make_frame_feature_params(3, 4, rng)
    frames = sd.VideoFrames(data=rng.normal(size=(9, 3)))
    yield "frame_features_vector", nm.grad_check(
        lambda: nm.sum_all(nm.mul(ly.frame_features(feat, frames), ly.frame_features(feat, frames))),
        dict(feat.named("feat")),
    )
    img_feat = ly.make_frame_feature_params(0, 3, rng, image_shape=(6, 7), mid_channels=2)
    img_frames = sd.VideoFrames(data=rng.normal(size=(7, 42)), image_shape=(6, 7))
    yield "frame_features_image", nm.grad_check(
        lambda: nm.sum_all(ly.frame_features(img_feat, img_frames)),
        dict(img_feat.named("feat")), max_coords=12,
    )


def cmd_grad_check(args, extras) -> int:
    cfg = _load_config(args, extras)
    failed = False
    for name, report in _layer_grad_checks(cfg):
        status = "pass" if report.passed else "FAIL"
        print(f"{name}\t{status}\tmax_rel_error={float(report.max_rel_error)!r}")
        failed = failed or not report.passed
    # full joint cascade on a tiny configuration (scaled loss: see README)
    rng = np.random.default_rng(cfg["seed"])
    mcfg = cs.ModelConfig(
        v_pinyin=7, v_tone=8, v_char=9, frame_dim=6, feat_dim=5,
        enc_cell=3, enc_layers=2, dec_cell=4, dec_layers=2, attn_dim=4, emb_dim=5,
    )
    model = cs.CascadeModel(mcfg, rng)
    frames = sd.VideoFrames(data=rng.normal(size=(6, 6)))
    ann = tp.SentenceAnnotation(chars=["x"], pinyin=[tp.Syllable("ma")], tones=[1])
    sample = cs.EncodedSample(
        frames=frames, annotation=ann,
        pinyin_ids=[tp.SOS_ID, 3, tp.EOS_ID],
        tone_ids=[tp.SOS_ID, 4, tp.EOS_ID],
        char_ids=[tp.SOS_ID, 5, tp.EOS_ID],
    )

    def cascade_scaled_loss():
        out = cs.cascade_forward(
            model, sample, joint=True, sampling_rate=1.0, rng=np.random.default_rng(0)
        )
        return nm.scale(cs.cascade_loss(out, sample)[0], 1e-3)

    report = nm.grad_check(cascade_scaled_loss, model.named_parameters(), max_coords=2)
    status = "pass" if report.passed else "FAIL"
    print(f"full_cascade\t{status}\tmax_rel_error={float(report.max_rel_error)!r}")
    failed = failed or not report.passed
    return NUMERIC_EXIT if failed else 0


def build_parser() -> _Parser:
    parser = _Parser(prog="lipcascade", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        return p

    p = common(sub.add_parser("synth-gen", add_help=True))
    p.add_argument("--out", required=True)
    p = common(sub.add_parser("train"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p = common(sub.add_parser("eval"))
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)
    p = common(sub.add_parser("decode"))
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--sample", type=int, default=None)
    p = common(sub.add_parser("dump-attention"))
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--pgm", action="store_true")
    common(sub.add_parser("grad-check"))
    return parser


_HANDLERS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "dump-attention": cmd_dump_attention,
    "grad-check": cmd_grad_check,
}

_DATA_ERRORS = (
    ConfigError, FormatError, ParseError, AlignmentError, VocabError,
    SpecError, LengthError, UndefinedRateError, OSError, IndexError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        return _HANDLERS[args.command](args, extras)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except (NumericError, ShapeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return NUMERIC_EXIT


def run() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    run()
