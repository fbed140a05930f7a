"""KL autoencoder shape contracts, loss oracle, and sampling."""

import numpy as np
import pytest
import torch

from latentad.autoencoder import (
    AutoencoderConfig,
    AutoencoderTrainConfig,
    KLAutoencoder,
    autoencoder_loss,
    load_autoencoder,
    sample_latent,
    train_autoencoder,
)


@pytest.fixture(scope="module")
def desk_model():
    return KLAutoencoder(AutoencoderConfig(), seed=0)


class TestShapes:
    def test_encode_64(self, desk_model):
        mean, log_var = desk_model.encode(torch.rand(3, 64, 64))
        assert mean.shape == (4, 8, 8)
        assert log_var.shape == (4, 8, 8)
        assert torch.isfinite(log_var).all()

    def test_encode_256_full_scale_contract(self, desk_model):
        mean, _ = desk_model.encode(torch.rand(3, 256, 256))
        assert mean.shape == (4, 32, 32)

    def test_decode_shapes(self, desk_model):
        assert desk_model.decode(torch.randn(4, 8, 8)).shape == (3, 64, 64)
        assert desk_model.decode(torch.randn(4, 32, 32)).shape == (3, 256, 256)

    def test_decode_range(self, desk_model):
        out = desk_model.decode(torch.randn(4, 8, 8) * 10)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_indivisible_rejected(self, desk_model):
        with pytest.raises(ValueError):
            desk_model.encode(torch.rand(3, 60, 60))

    def test_encode_determinism(self, desk_model):
        x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0))
        a, _ = desk_model.encode(x)
        b, _ = desk_model.encode(x.clone())
        assert torch.equal(a, b)

    def test_config_invariant(self):
        with pytest.raises(ValueError):
            AutoencoderConfig(downsample_factor=4, channel_multipliers=(1, 2, 4, 4))


class TestSampleLatent:
    def test_zero_noise(self):
        mean = torch.randn(4, 8, 8)
        assert torch.equal(sample_latent(mean, torch.randn_like(mean), torch.zeros_like(mean)), mean)

    def test_unit_variance(self):
        mean = torch.randn(4, 8, 8)
        n = torch.randn_like(mean)
        torch.testing.assert_close(sample_latent(mean, torch.zeros_like(mean), n), mean + n)

    def test_formula_oracle(self):
        g = torch.Generator().manual_seed(4)
        mean = torch.randn(2, 3, 3, generator=g, dtype=torch.float64)
        lv = torch.randn(2, 3, 3, generator=g, dtype=torch.float64)
        n = torch.randn(2, 3, 3, generator=g, dtype=torch.float64)
        want = mean.numpy() + np.exp(0.5 * lv.numpy()) * n.numpy()
        np.testing.assert_allclose(sample_latent(mean, lv, n).numpy(), want, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sample_latent(torch.zeros(2, 2, 2), torch.zeros(2, 2, 2), torch.zeros(2, 2, 3))


class TestLoss:
    def test_identity_standard_normal(self):
        x = torch.rand(3, 8, 8)
        z = torch.zeros(4, 2, 2)
        total, rec, kl = autoencoder_loss(x, x, z, z, kl_weight=1e-6)
        assert total.item() == 0.0 and rec.item() == 0.0 and kl.item() == 0.0

    def test_kl_zero_for_unit_gaussian(self):
        x = torch.rand(3, 8, 8)
        y = torch.rand(3, 8, 8)
        _, _, kl = autoencoder_loss(x, y, torch.zeros(4, 2, 2), torch.zeros(4, 2, 2), 1.0)
        assert kl.item() == 0.0

    def test_closed_form_oracle(self):
        g = torch.Generator().manual_seed(8)
        x = torch.rand(3, 4, 4, generator=g, dtype=torch.float64)
        y = torch.rand(3, 4, 4, generator=g, dtype=torch.float64)
        mean = torch.randn(4, 2, 2, generator=g, dtype=torch.float64)
        lv = torch.randn(4, 2, 2, generator=g, dtype=torch.float64)
        total, rec, kl = autoencoder_loss(x, y, mean, lv, kl_weight=0.37)
        rec_want = np.mean((x.numpy() - y.numpy()) ** 2)
        kl_want = 0.5 * np.mean(mean.numpy() ** 2 + np.exp(lv.numpy()) - 1.0 - lv.numpy())
        assert rec.item() == pytest.approx(rec_want, abs=1e-9)
        assert kl.item() == pytest.approx(kl_want, abs=1e-9)
        assert total.item() == pytest.approx(rec_want + 0.37 * kl_want, abs=1e-9)

    def test_components_nonnegative(self):
        g = torch.Generator().manual_seed(9)
        for _ in range(20):
            x = torch.rand(3, 4, 4, generator=g)
            y = torch.rand(3, 4, 4, generator=g)
            mean = torch.randn(4, 2, 2, generator=g)
            lv = torch.randn(4, 2, 2, generator=g)
            total, rec, kl = autoencoder_loss(x, y, mean, lv, 1e-3)
            assert rec.item() >= 0 and kl.item() >= 0

    def test_kl_zero_iff_standard(self):
        mean = torch.zeros(4, 2, 2)
        lv = torch.zeros(4, 2, 2)
        lv[0, 0, 0] = 0.1
        _, _, kl = autoencoder_loss(torch.rand(3, 8, 8), torch.rand(3, 8, 8), mean, lv, 1.0)
        assert kl.item() > 0

    def test_negative_weight_rejected(self):
        x = torch.rand(3, 8, 8)
        with pytest.raises(ValueError):
            autoencoder_loss(x, x, torch.zeros(4, 2, 2), torch.zeros(4, 2, 2), -1.0)


class TestTraining:
    def test_short_run_reduces_loss_and_checkpoints(self, tmp_path):
        g = torch.Generator().manual_seed(1)
        images = torch.rand(8, 3, 32, 32, generator=g)
        cfg = AutoencoderConfig(base_channels=8)
        tc = AutoencoderTrainConfig(epochs=4, batch_size=4, seed=0)
        ckpt = tmp_path / "ae.pt"
        log_file = tmp_path / "ae.jsonl"
        model, log = train_autoencoder(images, cfg, tc, checkpoint_path=ckpt, log_path=log_file)
        assert log[-1]["reconstruction"] <= log[0]["reconstruction"]
        assert len(log_file.read_text().strip().splitlines()) == 4
        back = load_autoencoder(ckpt)
        x = torch.rand(3, 32, 32, generator=g)
        torch.testing.assert_close(back.encode(x)[0], model.encode(x)[0])

    def test_determinism(self):
        g = torch.Generator().manual_seed(2)
        images = torch.rand(6, 3, 32, 32, generator=g)
        cfg = AutoencoderConfig(base_channels=8)
        tc = AutoencoderTrainConfig(epochs=2, batch_size=3, seed=5)
        _, log_a = train_autoencoder(images, cfg, tc)
        _, log_b = train_autoencoder(images, cfg, tc)
        assert [e["reconstruction"] for e in log_a] == [e["reconstruction"] for e in log_b]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            train_autoencoder(torch.zeros(0, 3, 32, 32), AutoencoderConfig(), AutoencoderTrainConfig())

    def test_shape_conflict_rejected(self):
        with pytest.raises(ValueError):
            train_autoencoder(torch.zeros(2, 3, 30, 30), AutoencoderConfig(), AutoencoderTrainConfig())
