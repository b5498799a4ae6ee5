import numpy as np
import pytest

from lipcascade import cascade as cs
from lipcascade import numerics as nm
from lipcascade import synthdata as sd
from lipcascade import textproc as tp
from lipcascade import training as tr
from lipcascade.errors import ConfigError, FormatError, NumericError

from conftest import tiny_config, tiny_model


def toy_dataset(n=6, seed=0, len_range=(2, 3)):
    spec = sd.SynthSpec(
        n_chars=6, n_visemes=3, frame_dim=9, frames_per_syllable=5,
        tone_channel_amplitude=0.6, noise_sigma=0.05, bigram_temperature=1.0,
        len_min=len_range[0], len_max=len_range[1],
    )
    lex = sd.make_lexicon(spec, seed)
    table = sd.make_bigram_table(spec, seed)
    raw = []
    from lipcascade.rng import substream

    for i in range(n):
        rng = substream(seed, "toy", i)
        ann = sd.sample_sentence(lex, table, spec.len_min, spec.len_max, rng)
        raw.append((sd.render_frames(ann, lex, spec, rng), ann))
    anns = [a for _, a in raw]
    vocabs = (
        tp.build_vocab(([s.text for s in a.pinyin] for a in anns), 0),
        tp.build_vocab(([str(t) for t in a.tones] for a in anns), 0),
        tp.build_vocab((a.chars for a in anns), 0),
    )
    return cs.build_dataset(raw, *vocabs), spec


def toy_model(dataset, seed=0, **kw):
    cfg = cs.ModelConfig(
        v_pinyin=len(dataset.pinyin_vocab),
        v_tone=len(dataset.tone_vocab),
        v_char=len(dataset.char_vocab),
        frame_dim=9, feat_dim=6, enc_cell=4, enc_layers=2,
        dec_cell=6, dec_layers=2, attn_dim=5, emb_dim=6, **kw,
    )
    return cs.CascadeModel(cfg, np.random.default_rng(seed))


class TestOptimizer:
    def param(self, value):
        t = nm.tensor(np.asarray(value, dtype=float), requires_grad=True)
        return {"p": t}, t

    def test_zero_grads_leave_params(self):
        named, p = self.param([1.0, -2.0])
        p.grad = np.zeros(2)
        state = tr.OptimizerState.create(named)
        tr.optimizer_step(state, named, lr=0.1)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_minus_lr(self):
        named, p = self.param([0.5])
        p.grad = np.array([1.0])
        state = tr.OptimizerState.create(named)
        tr.optimizer_step(state, named, lr=0.1)
        assert abs(p.data[0] - 0.4) < 1e-8

    def test_moments_decay_when_grads_stop(self):
        named, p = self.param([0.0])
        state = tr.OptimizerState.create(named)
        p.grad = np.array([1.0])
        tr.optimizer_step(state, named, lr=0.01)
        m_after = float(state.m["p"][0])
        p.grad = np.zeros(1)
        for _ in range(50):
            tr.optimizer_step(state, named, lr=0.01)
        assert abs(state.m["p"][0]) < m_after * 1e-2
        assert state.v["p"][0] < 1e-3

    def test_non_finite_grad_names_param(self):
        named, p = self.param([0.0])
        p.grad = np.array([np.nan])
        state = tr.OptimizerState.create(named)
        with pytest.raises(NumericError, match="p"):
            tr.optimizer_step(state, named, lr=0.1)

    def test_vanishing_lr_is_identity(self):
        named, p = self.param([1.0, 2.0])
        p.grad = np.array([0.3, -0.4])
        state = tr.OptimizerState.create(named)
        tr.optimizer_step(state, named, lr=1e-300)
        assert np.allclose(p.data, [1.0, 2.0], atol=1e-12)

    def test_sgd(self):
        named, p = self.param([1.0])
        p.grad = np.array([2.0])
        state = tr.OptimizerState.create(named)
        tr.optimizer_step(state, named, lr=0.25, kind="sgd")
        assert abs(p.data[0] - 0.5) < 1e-15

    def test_clip_gradients(self):
        named, p = self.param([0.0, 0.0])
        p.grad = np.array([3.0, 4.0])
        norm = tr.clip_gradients(named, max_norm=1.0)
        assert abs(norm - 5.0) < 1e-12
        assert abs(np.sqrt((p.grad ** 2).sum()) - 1.0) < 1e-12


class TestPlateau:
    def run(self, losses, lr=1.0):
        sched = tr.PlateauScheduler(lr, factor=0.5, patience=4)
        return [sched.update(loss) for loss in losses]

    def test_improving_never_halves(self):
        assert self.run([5, 4, 3, 2]) == [1.0] * 4

    def test_halves_after_four_flat_epochs(self):
        rates = self.run([3, 3, 3, 3, 3])
        assert rates == [1.0, 1.0, 1.0, 1.0, 0.5]

    def test_two_plateaus_quarter(self):
        rates = self.run([3, 3, 3, 3, 3, 3, 3, 3, 3])
        assert rates[-1] == 0.25

    def test_non_increasing_and_exact_halving(self):
        rng = np.random.default_rng(0)
        rates = self.run(list(rng.normal(size=50)))
        for a, b in zip(rates, rates[1:]):
            assert b <= a
            assert b == a or b == a * 0.5


class TestSamplingSchedule:
    def cfg(self, epochs=11):
        return tr.TrainConfig(max_epochs=epochs)

    def test_endpoints(self):
        cfg = self.cfg()
        assert tr.sampling_rate_at(0, cfg) == 0.7
        assert tr.sampling_rate_at(10, cfg) == 1.0

    def test_midpoint(self):
        assert abs(tr.sampling_rate_at(5, self.cfg()) - 0.85) < 1e-12

    def test_clamped_beyond_last_epoch(self):
        assert tr.sampling_rate_at(50, self.cfg()) == 1.0

    def test_single_epoch(self):
        assert tr.sampling_rate_at(0, self.cfg(epochs=1)) == 0.7


class TestCurriculum:
    def test_stages_quartered(self):
        cfg = tr.TrainConfig(max_epochs=8, curriculum=True)
        stages = [tr.curriculum_stage(e, cfg) for e in range(8)]
        assert stages == [0, 0, 1, 1, 2, 2, 3, 3]

    def test_disabled(self):
        cfg = tr.TrainConfig(max_epochs=8, curriculum=False)
        assert tr.curriculum_stage(0, cfg) == 3

    def test_monotone_growth(self):
        cfg = tr.TrainConfig(max_epochs=20)
        stages = [tr.curriculum_stage(e, cfg) for e in range(20)]
        assert stages == sorted(stages)


class TestTrainLoop:
    def test_one_epoch_tiny_lr_keeps_params(self):
        dataset, _ = toy_dataset(n=1)
        model = toy_model(dataset)
        before = {k: p.data.copy() for k, p in model.named_parameters().items()}
        cfg = tr.TrainConfig(lr=1e-300, max_epochs=1, batch_size=1, seed=0)
        history = tr.train(model, dataset, dataset, cfg)
        assert len(history.records) == 1
        after = model.named_parameters()
        for k in before:
            assert np.allclose(before[k], after[k].data, atol=1e-12)

    def test_determinism_bitwise(self):
        losses = []
        for _ in range(2):
            dataset, _ = toy_dataset(n=4)
            model = toy_model(dataset, seed=3)
            cfg = tr.TrainConfig(lr=0.002, max_epochs=3, batch_size=2, seed=3)
            history = tr.train(model, dataset, dataset, cfg)
            losses.append([r.loss for r in history.records])
        assert losses[0] == losses[1]

    def test_frozen_batch_recompute_is_exact(self):
        dataset, _ = toy_dataset(n=2)
        model = toy_model(dataset)
        sample = dataset.samples[0]

        def compute():
            out = cs.cascade_forward(
                model, sample, joint=True, sampling_rate=1.0,
                rng=np.random.default_rng(0),
            )
            return cs.cascade_loss(out, sample)[0].item()

        assert compute() == compute()

    def test_vocab_mismatch_rejected_before_training(self):
        dataset, _ = toy_dataset(n=2)
        model = toy_model(dataset)
        bad = cs.Dataset(
            samples=dataset.samples,
            pinyin_vocab=dataset.pinyin_vocab,
            tone_vocab=dataset.tone_vocab,
            char_vocab=tp.build_vocab([["q"] * 5], 0),
        )
        with pytest.raises(ConfigError):
            tr.train(model, bad, bad, tr.TrainConfig(max_epochs=1))

    def test_history_and_checkpoints_written(self, tmp_path):
        dataset, _ = toy_dataset(n=3)
        model = toy_model(dataset)
        cfg = tr.TrainConfig(lr=0.002, max_epochs=2, batch_size=2, seed=1)
        tr.train(model, dataset, dataset, cfg, out_dir=tmp_path, config_echo="x = 1\n")
        assert (tmp_path / "history.tsv").exists()
        assert (tmp_path / "best.ckpt").exists()
        assert (tmp_path / "final.ckpt").exists()
        lines = (tmp_path / "history.tsv").read_text().strip().split("\n")
        assert len(lines) == 2
        assert len(lines[0].split("\t")) == 11


class TestCheckpoint:
    def roundtrip(self, tmp_path, model):
        opt = tr.OptimizerState.create(model.named_parameters())
        opt.step = 17
        rng = np.random.default_rng(0)
        for k in opt.m:
            opt.m[k] = rng.normal(size=opt.m[k].shape)
            opt.v[k] = np.abs(rng.normal(size=opt.v[k].shape))
        path = tmp_path / "model.ckpt"
        tr.save_checkpoint(path, model, opt, config_echo="seed = 5\n")
        return path, opt

    def test_save_load_save_identical_bytes(self, tmp_path):
        model = tiny_model()
        path, _ = self.roundtrip(tmp_path, model)
        loaded, opt2, echo = tr.load_checkpoint(path)
        assert echo == "seed = 5\n"
        path2 = tmp_path / "again.ckpt"
        tr.save_checkpoint(path2, loaded, opt2, config_echo=echo)
        assert path.read_bytes() == path2.read_bytes()

    def test_loaded_model_reproduces_loss_exactly(self, tmp_path):
        dataset, _ = toy_dataset(n=2)
        model = toy_model(dataset)
        path = tmp_path / "m.ckpt"
        tr.save_checkpoint(path, model, tr.OptimizerState.create(model.named_parameters()))
        loaded, _, _ = tr.load_checkpoint(path)
        sample = dataset.samples[0]

        def loss_of(m):
            out = cs.cascade_forward(
                m, sample, joint=True, sampling_rate=1.0, rng=np.random.default_rng(0)
            )
            return cs.cascade_loss(out, sample)[0].item()

        assert loss_of(model) == loss_of(loaded)  # zero ulp difference

    def test_truncated_file(self, tmp_path):
        model = tiny_model()
        path, _ = self.roundtrip(tmp_path, model)
        data = path.read_bytes()
        for cut in (5, 40, len(data) // 2, len(data) - 3):
            bad = tmp_path / "bad.ckpt"
            bad.write_bytes(data[:cut])
            with pytest.raises(FormatError):
                tr.load_checkpoint(bad)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(FormatError):
            tr.load_checkpoint(path)

    def test_baseline_roundtrip(self, tmp_path):
        model = cs.BaselineModel(tiny_config(), np.random.default_rng(0))
        path, _ = self.roundtrip(tmp_path, model)
        loaded, _, _ = tr.load_checkpoint(path)
        assert isinstance(loaded, cs.BaselineModel)
        for k, p in model.named_parameters().items():
            assert np.array_equal(p.data, loaded.named_parameters()[k].data)
