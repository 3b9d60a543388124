import hashlib

import numpy as np
import pytest
import torch

import sohdiff as sd
from sohdiff.data import CapacityMatrix, Dataset, DatasetItem
from sohdiff.denoiser import DenoiserConfig
from sohdiff.errors import ConfigurationError, NumericError, ParameterError
from sohdiff.seeding import stream
from sohdiff.training import dropout_mask, loss_simple

from conftest import TOY_L, tiny_model_config


def param_digest(net) -> str:
    h = hashlib.sha256()
    for name, p in net.named_parameters():
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def randomize_head(model, seed=123, scale=0.3):
    """Give the zero-initialized output conv nonzero weights so gradient
    signal reaches upstream parameters."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.net.unet.out_conv.weight.uniform_(-scale, scale, generator=gen)
        model.net.unet.out_conv.bias.uniform_(-scale, scale, generator=gen)
    return model


def mini_dataset(n_cells, l, c_max, n_feat, n_early, seed=0) -> Dataset:
    """Hand-rolled power-law cells on a short grid for unit tests."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_cells):
        rate = rng.uniform(0.3, 0.9) / c_max
        cycles = np.arange(1, c_max + 1)
        soh = 1.0 - rate * cycles
        raw = sd.DegradationCurve(f"m{i:02d}", cycles, soh)
        curve = sd.to_grid(raw, l, c_max)
        q = np.tile(soh[:n_early, None], (1, n_feat)) + rng.normal(0, 0.01, (n_early, n_feat))
        items.append(DatasetItem(curve=curve, capacity=CapacityMatrix(q, f"m{i:02d}"),
                                 true_rul=None, raw=raw))
    return Dataset(items=tuple(items), split="train")


class TestLossSimple:
    def test_untrained_loss_equals_noise_power(self, toy_split, toy_schedule):
        # with the zero-initialized head the loss is exactly the mean square
        # of the drawn noise, which we reconstruct from the same stream
        train_ds, _ = toy_split
        model = sd.init_model(tiny_model_config(), np.random.default_rng(0))
        batch = [(it.curve, it.capacity) for it in train_ds.items] * 4
        loss, _ = loss_simple(model, batch, toy_schedule, 0.2, stream(77, "loss"))

        rng = stream(77, "loss")
        rng.integers(1, toy_schedule.T + 1, size=len(batch))
        eps = rng.standard_normal((len(batch), TOY_L))
        expected = np.mean(eps.astype(np.float32) ** 2)
        assert loss == pytest.approx(expected, rel=1e-5)
        assert loss == pytest.approx(1.0, abs=3.0 * np.sqrt(2.0 / eps.size))

    def test_always_dropped_never_touches_encoder(self, toy_split, toy_schedule):
        train_ds, _ = toy_split
        model = randomize_head(sd.init_model(tiny_model_config(), np.random.default_rng(0)))
        batch = [(it.curve, it.capacity) for it in train_ds.items[:4]]
        _, grads = loss_simple(model, batch, toy_schedule, 1.0, stream(1, "loss"))
        for name, g in grads.items():
            if name.startswith("cond_encoder."):
                assert torch.all(g == 0), name
        assert torch.any(grads["null_cond"] != 0)

    def test_never_dropped_leaves_null_untouched(self, toy_split, toy_schedule):
        train_ds, _ = toy_split
        model = randomize_head(sd.init_model(tiny_model_config(), np.random.default_rng(0)))
        batch = [(it.curve, it.capacity) for it in train_ds.items[:4]]
        _, grads = loss_simple(model, batch, toy_schedule, 0.0, stream(1, "loss"))
        assert torch.all(grads["null_cond"] == 0)
        assert any(torch.any(g != 0) for n, g in grads.items()
                   if n.startswith("cond_encoder."))

    def test_empty_batch_rejected(self, toy_schedule):
        model = sd.init_model(tiny_model_config(), np.random.default_rng(0))
        with pytest.raises(ParameterError):
            loss_simple(model, [], toy_schedule, 0.2, stream(1, "loss"))

    def test_dropout_frequency(self):
        mask = dropout_mask(10_000, 0.2, stream(13, "loss"))
        assert 0.18 <= mask.mean() <= 0.22


class TestGradientCheck:
    def test_loss_gradients_match_finite_differences(self):
        # miniature config: one level, 4 channels, 8-wide encoder, float64
        cfg = DenoiserConfig(l=16, base_channels=4, channel_multipliers=(1,),
                             time_embed_dim=8, cond_embed_dim=8, dim_p=2,
                             enc_layers=1, enc_heads=2, enc_d_model=8,
                             n_feat=3, n_early=10)
        model = randomize_head(
            sd.init_model(cfg, np.random.default_rng(0), dtype=torch.float64), seed=5
        )
        ds = mini_dataset(4, cfg.l, 40, cfg.n_feat, cfg.n_early)
        batch = [(it.curve, it.capacity) for it in ds.items]
        s = sd.make_schedule("linear", 10)
        draw_seed = 2024

        def loss_at_current_params() -> float:
            value, _ = loss_simple(model, batch, s, 0.5, np.random.default_rng(draw_seed))
            return value

        _, grads = loss_simple(model, batch, s, 0.5, np.random.default_rng(draw_seed))

        named = dict(model.net.named_parameters())
        flat = [(name, i) for name, p in named.items() for i in range(p.numel())]
        picks = np.random.default_rng(99).choice(len(flat), size=50, replace=False)
        h = 1e-5

        def set_coord(p, i, value):
            with torch.no_grad():
                p.view(-1)[i] = value

        for k in picks:
            name, i = flat[k]
            p = named[name]
            orig = p.view(-1)[i].item()
            set_coord(p, i, orig + h)
            up = loss_at_current_params()
            set_coord(p, i, orig - h)
            down = loss_at_current_params()
            set_coord(p, i, orig)
            fd = (up - down) / (2 * h)
            ana = grads[name].view(-1)[i].item()
            denom = max(abs(ana), abs(fd), 1e-8)
            assert abs(ana - fd) / denom < 1e-4, (name, i, ana, fd)


class TestTrain:
    def make(self, steps=3, seed=5, **kw):
        return sd.TrainConfig(steps=steps, batch_size=4, T=50, seed=seed,
                              eval_every=2, **kw)

    def test_minimal_run_writes_checkpoint(self, toy_split, toy_schedule, tmp_path):
        train_ds, _ = toy_split
        cfg = self.make(steps=1)
        out = tmp_path / "ck.bin"
        log = tmp_path / "loss.csv"
        model, report = sd.run_training(train_ds, tiny_model_config(), cfg,
                                        toy_schedule, out_path=out, log_path=log)
        assert len(report.loss_history) == 1
        assert out.exists() and report.final_checkpoint == str(out)
        assert log.read_text().splitlines()[0] == "step,loss"

    def test_same_seed_bit_identical(self, toy_split, toy_schedule):
        train_ds, _ = toy_split
        runs = [sd.run_training(train_ds, tiny_model_config(), self.make(steps=4),
                                toy_schedule)[0] for _ in range(2)]
        assert param_digest(runs[0].net) == param_digest(runs[1].net)
        assert param_digest(runs[0].eval_net()) == param_digest(runs[1].eval_net())

    def test_schedule_mismatch(self, toy_split, toy_schedule):
        train_ds, _ = toy_split
        cfg = sd.TrainConfig(steps=1, T=49, seed=0)
        model = sd.init_model(tiny_model_config(), np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            sd.train(model, train_ds, cfg, toy_schedule)

    def test_ema_zero_decay_tracks_raw(self, toy_split, toy_schedule):
        train_ds, _ = toy_split
        model, _ = sd.run_training(train_ds, tiny_model_config(),
                                   self.make(steps=3, ema_decay=0.0), toy_schedule)
        for name, p in model.net.named_parameters():
            np.testing.assert_array_equal(model.ema[name].numpy(), p.detach().numpy())

    def test_ema_unit_decay_freezes_init(self, toy_split, toy_schedule):
        train_ds, _ = toy_split
        init = sd.init_model(tiny_model_config(), stream(5, "init"))
        frozen = {n: p.detach().clone() for n, p in init.net.named_parameters()}
        model, _ = sd.run_training(train_ds, tiny_model_config(),
                                   self.make(steps=3, ema_decay=1.0), toy_schedule)
        for name, t in model.ema.items():
            np.testing.assert_array_equal(t.numpy(), frozen[name].numpy())

    def test_divergence_aborts(self, toy_split, toy_schedule):
        train_ds, _ = toy_split
        cfg = sd.TrainConfig(steps=400, batch_size=4, T=50, seed=0,
                             step_size=50.0, ema_decay=None)
        with pytest.raises(NumericError):
            sd.run_training(train_ds, tiny_model_config(), cfg, toy_schedule)

    def test_loss_trend_downward(self, tiny_trained):
        _, report = tiny_trained
        losses = [v for _, v in report.loss_history]
        head = np.mean(losses[: max(1, len(losses) // 10)])
        tail = np.mean(losses[-max(1, len(losses) // 10):])
        assert tail < head


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tiny_trained, tmp_path):
        model, _ = tiny_trained
        path = tmp_path / "ck.bin"
        sd.save_checkpoint(model, None, path)
        loaded, opt = sd.load_checkpoint(path)
        assert opt is None
        assert param_digest(loaded.net) == param_digest(model.net)
        for name, t in model.ema.items():
            np.testing.assert_array_equal(loaded.ema[name].numpy(), t.numpy())
        assert loaded.schedule_desc == model.schedule_desc
        assert loaded.grid_c_max == model.grid_c_max
        np.testing.assert_array_equal(loaded.norm.mean, model.norm.mean)

    def test_optimizer_state_roundtrip(self, toy_split, toy_schedule, tmp_path):
        train_ds, _ = toy_split
        cfg = sd.TrainConfig(steps=2, batch_size=4, T=50, seed=1)
        out = tmp_path / "ck.bin"
        sd.run_training(train_ds, tiny_model_config(), cfg, toy_schedule, out_path=out)
        _, opt = sd.load_checkpoint(out)
        assert opt is not None and opt["betas"] == (0.9, 0.999)
        some = next(iter(opt["params"].values()))
        assert some["step"] == 2
        assert torch.isfinite(some["exp_avg"]).all()

    def test_truncated_file_rejected(self, tiny_trained, tmp_path):
        from sohdiff.errors import CorruptionError

        model, _ = tiny_trained
        path = tmp_path / "ck.bin"
        sd.save_checkpoint(model, None, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CorruptionError):
            sd.load_checkpoint(path)

    def test_corrupted_blob_rejected(self, tiny_trained, tmp_path):
        from sohdiff.errors import CorruptionError

        model, _ = tiny_trained
        path = tmp_path / "ck.bin"
        sd.save_checkpoint(model, None, path)
        blob = bytearray(path.read_bytes())
        blob[-4] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptionError):
            sd.load_checkpoint(path)

    def test_version_mismatch(self, tiny_trained, tmp_path):
        from sohdiff.errors import IncompatibilityError

        model, _ = tiny_trained
        path = tmp_path / "ck.bin"
        sd.save_checkpoint(model, None, path)
        blob = bytearray(path.read_bytes())
        blob[8] = 99  # version field follows the 8-byte magic
        path.write_bytes(bytes(blob))
        with pytest.raises(IncompatibilityError):
            sd.load_checkpoint(path)

    def test_grid_length_mismatch_names_both(self, tiny_trained, tmp_path):
        from sohdiff.errors import IncompatibilityError

        model, _ = tiny_trained
        path = tmp_path / "ck.bin"
        sd.save_checkpoint(model, None, path)
        with pytest.raises(IncompatibilityError, match=r"64.*128"):
            sd.load_checkpoint(path, expect_l=128)
