"""Flat `key = value` run configuration with typed schema and overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

from .cascade import ModelConfig
from .errors import ConfigError
from .synthdata import SynthSpec
from .training import TrainConfig


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "threads": (int, 1),
    "data.n_chars": (int, 10),
    "data.n_visemes": (int, 5),
    "data.frame_dim": (int, 12),
    "data.frames_per_syllable": (int, 5),
    "data.tone_channel_amplitude": (float, 0.5),
    "data.noise_sigma": (float, 0.1),
    "data.bigram_temperature": (float, 1.0),
    "data.len_min": (int, 3),
    "data.len_max": (int, 6),
    "data.n_train": (int, 70),
    "data.n_val": (int, 10),
    "data.n_test": (int, 20),
    "data.image_mode": (bool, False),
    "data.image_h": (int, 64),
    "data.image_w": (int, 128),
    "data.min_count": (int, 0),
    "data.allow_unambiguous": (bool, False),
    "model.mode": (str, "full"),
    "model.enc_cell": (int, 256),
    "model.enc_layers": (int, 2),
    "model.dec_cell": (int, 512),
    "model.dec_layers": (int, 2),
    "model.attn_dim": (int, 128),
    "model.feat_dim": (int, 512),
    "model.emb_dim": (int, 256),
    "model.conv_mid": (int, 8),
    "train.lr": (float, 1e-4),
    "train.plateau_patience": (int, 4),
    "train.lr_factor": (float, 0.5),
    "train.sampling_start": (float, 0.7),
    "train.sampling_end": (float, 1.0),
    "train.sample_model_output": (bool, False),
    "train.batch_size": (int, 8),
    "train.epochs": (int, 20),
    "train.curriculum": (bool, True),
    "train.joint": (bool, True),
    "train.grad_clip": (float, 5.0),
    "train.optimizer": (str, "adam"),
    "eval.max_len": (int, 40),
}

MODEL_MODES = ("full", "no_video", "baseline_was")


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def to_text(self) -> str:
        return "".join(f"{k} = {self._fmt(self.values[k])}\n" for k in SCHEMA)

    @staticmethod
    def _fmt(v) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    # ------------------------------------------------- derived module configs

    def synth_spec(self) -> SynthSpec:
        g = self.values
        return SynthSpec(
            n_chars=g["data.n_chars"], n_visemes=g["data.n_visemes"],
            frame_dim=g["data.frame_dim"],
            frames_per_syllable=g["data.frames_per_syllable"],
            tone_channel_amplitude=g["data.tone_channel_amplitude"],
            noise_sigma=g["data.noise_sigma"],
            bigram_temperature=g["data.bigram_temperature"],
            len_min=g["data.len_min"], len_max=g["data.len_max"],
            image_mode=g["data.image_mode"], image_h=g["data.image_h"],
            image_w=g["data.image_w"],
            allow_unambiguous=g["data.allow_unambiguous"],
        )

    def model_config(self, v_pinyin: int, v_tone: int, v_char: int) -> ModelConfig:
        g = self.values
        image = (g["data.image_h"], g["data.image_w"]) if g["data.image_mode"] else None
        frame_dim = 0 if image else g["data.frame_dim"]
        mode = g["model.mode"]
        return ModelConfig(
            v_pinyin=v_pinyin, v_tone=v_tone, v_char=v_char,
            frame_dim=frame_dim, image_shape=image,
            feat_dim=g["model.feat_dim"], enc_cell=g["model.enc_cell"],
            enc_layers=g["model.enc_layers"], dec_cell=g["model.dec_cell"],
            dec_layers=g["model.dec_layers"], attn_dim=g["model.attn_dim"],
            emb_dim=g["model.emb_dim"], conv_mid=g["model.conv_mid"],
            mode="full" if mode == "baseline_was" else mode,
        )

    def train_config(self) -> TrainConfig:
        g = self.values
        return TrainConfig(
            lr=g["train.lr"], plateau_patience=g["train.plateau_patience"],
            lr_factor=g["train.lr_factor"],
            sampling_start=g["train.sampling_start"],
            sampling_end=g["train.sampling_end"],
            sample_model_output=g["train.sample_model_output"],
            batch_size=g["train.batch_size"], max_epochs=g["train.epochs"],
            seed=g["seed"], curriculum=g["train.curriculum"],
            joint=g["train.joint"], grad_clip=g["train.grad_clip"],
            optimizer=g["train.optimizer"], eval_max_len=g["eval.max_len"],
        )


def _convert(key: str, raw: str, where: str) -> object:
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is bool:
            return _parse_bool(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(
            f"{where}: value {raw!r} for key {key!r} is not a valid {typ.__name__}"
        ) from None


def parse_config(path=None, overrides: list[tuple[str, str]] = ()) -> RunConfig:
    """Read `key = value` lines ('#' comments allowed), apply overrides,
    fill defaults. Unknown keys are rejected with their location."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = stripped.partition("=")
                key = key.strip()
                if key not in SCHEMA:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _convert(key, raw, f"{path}:{lineno}")
    for key, raw in overrides:
        if key not in SCHEMA:
            raise ConfigError(f"override: unknown key {key!r}")
        values[key] = _convert(key, raw, "override")
    cfg = RunConfig(values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    g = cfg.values
    if g["model.mode"] not in MODEL_MODES:
        raise ConfigError(
            f"model.mode must be one of {MODEL_MODES}, got {g['model.mode']!r}"
        )
    if g["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    cfg.train_config().validate()
