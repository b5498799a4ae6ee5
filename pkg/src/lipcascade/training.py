"""Training loop: joint loss, scheduled sampling, curriculum ordering,
plateau learning-rate halving, checkpointing."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cascade as cs
from . import evaluation as ev
from . import numerics as nm
from .errors import ConfigError, FormatError, NumericError
from .numerics import Tensor
from .rng import substream
from .textproc import PAD_ID, bucket_index


@dataclass
class TrainConfig:
    lr: float = 1e-4
    plateau_patience: int = 4
    lr_factor: float = 0.5
    sampling_start: float = 0.7
    sampling_end: float = 1.0
    sample_model_output: bool = False  # invert the scheduled-sampling convention
    batch_size: int = 8
    max_epochs: int = 20
    seed: int = 0
    curriculum: bool = True
    joint: bool = True
    grad_clip: float = 5.0
    optimizer: str = "adam"
    eval_max_len: int = 40

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        for name in ("sampling_start", "sampling_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, named_params: dict[str, Tensor]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in named_params.items()},
            v={k: np.zeros_like(p.data) for k, p in named_params.items()},
        )


ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def optimizer_step(
    state: OptimizerState, named_params: dict[str, Tensor], lr: float,
    kind: str = "adam",
) -> None:
    """Adaptive-moment update with bias correction (or plain SGD),
    applied in place. Missing grads count as zero."""
    state.step += 1
    t = state.step
    for name, p in named_params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        if kind == "sgd":
            p.data -= lr * g
            continue
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def clip_gradients(named_params: dict[str, Tensor], max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    total = 0.0
    for p in named_params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in named_params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class PlateauScheduler:
    """Halve the rate when the best training loss stalls for `patience` epochs."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def sampling_rate_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp from sampling_start (epoch 0) to sampling_end (last epoch)."""
    span = max(1, cfg.max_epochs - 1)
    frac = min(1.0, epoch / span)
    rate = cfg.sampling_start + (cfg.sampling_end - cfg.sampling_start) * frac
    lo = min(cfg.sampling_start, cfg.sampling_end)
    hi = max(cfg.sampling_start, cfg.sampling_end)
    return min(hi, max(lo, rate))


def curriculum_stage(epoch: int, cfg: TrainConfig) -> int:
    if not cfg.curriculum:
        return 3
    return min(3, (epoch * 4) // cfg.max_epochs)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    loss_pinyin: float
    loss_tone: float
    loss_char: float
    val_cer: float
    val_per: float
    val_ter: float
    lr: float
    sampling_rate: float
    stage: int

    def to_line(self) -> str:
        vals = [
            self.epoch, self.loss, self.loss_pinyin, self.loss_tone, self.loss_char,
            self.val_cer, self.val_per, self.val_ter, self.lr, self.sampling_rate,
            self.stage,
        ]
        return "\t".join(repr(v) if isinstance(v, float) else str(v) for v in vals)


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_val_cer: float = np.inf
    best_epoch: int = -1

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(r.to_line() + "\n")


def _sample_loss(model, sample, joint, rate, rng):
    if isinstance(model, cs.BaselineModel):
        res = cs.baseline_forward(model, sample.frames, sample.char_ids, rate, rng)
        loss_c = nm.nll_loss(res.log_probs, sample.char_ids[1:], PAD_ID)
        return loss_c, 0.0, 0.0, loss_c.item()
    out = cs.cascade_forward(model, sample, joint=joint, sampling_rate=rate, rng=rng)
    total, lp, lt, lc = cs.cascade_loss(out, sample)
    return total, lp.item(), lt.item(), lc.item()


def train(
    model, train_set: cs.Dataset, val_set: cs.Dataset, cfg: TrainConfig,
    out_dir=None, config_echo: str = "",
) -> TrainHistory:
    """Optimize the model; returns per-epoch history.

    Curriculum mode trains stage k on the union of length buckets <= k,
    advancing a stage every quarter of the epoch budget (buckets never
    drop previously seen sentences). When `out_dir` is given, the best
    validation checkpoint and the final checkpoint are written there.
    """
    cfg.validate()
    _check_vocab_match(model, train_set)
    named = model.named_parameters()
    opt = OptimizerState.create(named)
    sched = PlateauScheduler(cfg.lr, cfg.lr_factor, cfg.plateau_patience)
    history = TrainHistory()
    out_path = Path(out_dir) if out_dir is not None else None
    bucketed = [[], [], [], []]
    for sample in train_set.samples:
        bucketed[bucket_index(len(sample.annotation))].append(sample)
    lr = cfg.lr
    for epoch in range(cfg.max_epochs):
        stage = curriculum_stage(epoch, cfg)
        pool = [s for b in bucketed[: stage + 1] for s in b]
        if not pool:
            pool = list(train_set.samples)
        rate = sampling_rate_at(epoch, cfg)
        effective_rate = 1.0 - rate if cfg.sample_model_output else rate
        shuffle_rng = substream(cfg.seed, "shuffle", epoch)
        order = shuffle_rng.permutation(len(pool))
        sample_rng = substream(cfg.seed, "sampling", epoch)
        sums = np.zeros(4)
        for start in range(0, len(order), cfg.batch_size):
            batch = [pool[i] for i in order[start : start + cfg.batch_size]]
            nm.zero_grads(named.values())
            batch_loss = None
            for sample in batch:
                total, lp, lt, lc = _sample_loss(
                    model, sample, cfg.joint, effective_rate, sample_rng
                )
                sums += (total.item(), lp, lt, lc)
                batch_loss = total if batch_loss is None else nm.add(batch_loss, total)
            nm.backward(batch_loss)
            clip_gradients(named, cfg.grad_clip)
            optimizer_step(opt, named, lr, cfg.optimizer)
        mean_loss = sums / len(pool)
        lr = sched.update(float(mean_loss[0]))
        report = ev.evaluate(model, val_set, cfg.eval_max_len)
        record = EpochRecord(
            epoch=epoch,
            loss=float(mean_loss[0]), loss_pinyin=float(mean_loss[1]),
            loss_tone=float(mean_loss[2]), loss_char=float(mean_loss[3]),
            val_cer=report.overall_cer,
            val_per=report.overall_per if report.overall_per is not None else 0.0,
            val_ter=report.overall_ter if report.overall_ter is not None else 0.0,
            lr=lr, sampling_rate=rate, stage=stage,
        )
        history.records.append(record)
        if report.overall_cer < history.best_val_cer:
            history.best_val_cer = report.overall_cer
            history.best_epoch = epoch
            if out_path is not None:
                save_checkpoint(out_path / "best.ckpt", model, opt, config_echo)
    if out_path is not None:
        save_checkpoint(out_path / "final.ckpt", model, opt, config_echo)
        history.write(out_path / "history.tsv")
    return history


def _check_vocab_match(model, dataset: cs.Dataset) -> None:
    checks = [("character", model.char_head.vocab_size, len(dataset.char_vocab))]
    if isinstance(model, cs.CascadeModel):
        checks += [
            ("pinyin", model.pinyin_head.vocab_size, len(dataset.pinyin_vocab)),
            ("tone", model.tone_head.vocab_size, len(dataset.tone_vocab)),
        ]
    for name, head_v, vocab_v in checks:
        if head_v != vocab_v:
            raise ConfigError(
                f"{name} head size {head_v} does not match vocabulary size {vocab_v}"
            )


# ----------------------------------------------------------------- checkpoint

_MAGIC = b"LIPCASCKPT\x00"
_VERSION = 1


def _model_spec_text(model) -> str:
    cfg = model.cfg
    kind = "baseline" if isinstance(model, cs.BaselineModel) else "cascade"
    pairs = [
        ("kind", kind), ("mode", cfg.mode),
        ("v_pinyin", cfg.v_pinyin), ("v_tone", cfg.v_tone), ("v_char", cfg.v_char),
        ("frame_dim", cfg.frame_dim),
        ("image_h", cfg.image_shape[0] if cfg.image_shape else 0),
        ("image_w", cfg.image_shape[1] if cfg.image_shape else 0),
        ("feat_dim", cfg.feat_dim), ("enc_cell", cfg.enc_cell),
        ("enc_layers", cfg.enc_layers), ("dec_cell", cfg.dec_cell),
        ("dec_layers", cfg.dec_layers), ("attn_dim", cfg.attn_dim),
        ("emb_dim", cfg.emb_dim), ("conv_mid", cfg.conv_mid),
    ]
    return "".join(f"{k}={v}\n" for k, v in pairs)


def _model_from_spec_text(text: str):
    fields = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            fields[k] = v
    try:
        kind = fields.pop("kind")
        image_h, image_w = int(fields.pop("image_h")), int(fields.pop("image_w"))
        cfg = cs.ModelConfig(
            image_shape=(image_h, image_w) if image_h else None,
            mode=fields.pop("mode"),
            **{k: int(v) for k, v in fields.items()},
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad model spec in checkpoint: {exc}") from exc
    rng = np.random.default_rng(0)
    return cs.BaselineModel(cfg, rng) if kind == "baseline" else cs.CascadeModel(cfg, rng)


def _write_block(f, payload: bytes) -> None:
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _write_array_record(f, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<I", dim))
    f.write(arr.astype("<f8").tobytes())


class _Reader:
    def __init__(self, f, path):
        self.f = f
        self.path = path

    def exact(self, n: int) -> bytes:
        data = self.f.read(n)
        if len(data) != n:
            raise FormatError(f"{self.path}: truncated checkpoint")
        return data

    def u32(self) -> int:
        return struct.unpack("<I", self.exact(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.exact(8))[0]

    def array_record(self) -> tuple[str, np.ndarray]:
        name = self.exact(self.u32()).decode("utf-8")
        rank = self.u32()
        if rank > 8:
            raise FormatError(f"{self.path}: implausible tensor rank {rank}")
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.exact(count * 8), dtype="<f8").reshape(shape)
        return name, data.copy()


def save_checkpoint(path, model, opt: OptimizerState, config_echo: str = "") -> None:
    """Magic, version, config echo, model spec, named parameter records,
    then optimizer moments under their own section tag."""
    named = model.named_parameters()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        _write_block(f, config_echo.encode("utf-8"))
        _write_block(f, _model_spec_text(model).encode("utf-8"))
        f.write(struct.pack("<I", len(named)))
        for name, p in named.items():
            _write_array_record(f, name, p.data)
        f.write(b"OPTM")
        f.write(struct.pack("<Q", opt.step))
        f.write(struct.pack("<I", len(opt.m)))
        for name in named:
            _write_array_record(f, f"m.{name}", opt.m[name])
            _write_array_record(f, f"v.{name}", opt.v[name])


def load_checkpoint(path):
    """Returns (model, optimizer state, config echo); round-trips exactly."""
    with open(path, "rb") as f:
        r = _Reader(f, path)
        if r.exact(len(_MAGIC)) != _MAGIC:
            raise FormatError(f"{path}: not a checkpoint file (bad magic)")
        version = r.u32()
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        config_echo = r.exact(r.u32()).decode("utf-8")
        model = _model_from_spec_text(r.exact(r.u32()).decode("utf-8"))
        named = model.named_parameters()
        n_params = r.u32()
        if n_params != len(named):
            raise FormatError(
                f"{path}: checkpoint has {n_params} tensors, model needs {len(named)}"
            )
        for _ in range(n_params):
            name, data = r.array_record()
            if name not in named:
                raise FormatError(f"{path}: unexpected parameter {name!r}")
            if named[name].data.shape != data.shape:
                raise FormatError(
                    f"{path}: shape mismatch for {name}: checkpoint "
                    f"{data.shape} vs model {named[name].data.shape}"
                )
            named[name].data = data
        if r.exact(4) != b"OPTM":
            raise FormatError(f"{path}: missing optimizer section")
        step = r.u64()
        n_moments = r.u32()
        opt = OptimizerState.create(named)
        opt.step = step
        for _ in range(n_moments):
            for prefix, store in (("m.", opt.m), ("v.", opt.v)):
                name, data = r.array_record()
                if not name.startswith(prefix) or name[2:] not in store:
                    raise FormatError(f"{path}: unexpected moment record {name!r}")
                if store[name[2:]].shape != data.shape:
                    raise FormatError(f"{path}: moment shape mismatch for {name}")
                store[name[2:]] = data
    return model, opt, config_echo
