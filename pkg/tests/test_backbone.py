"""Reference CNN vs a numpy re-implementation and finite differences."""

import numpy as np
import pytest
import torch

from care.backbone import (
    BackboneConfig,
    ConfigurationError,
    ImageBatch,
    ReferenceCNN,
    class_score_gradient,
    load_checkpoint,
    save_checkpoint,
    true_class_score_gradient,
)

SMALL = BackboneConfig(input_size=16, in_channels=2, num_classes=3, channel_widths=(4, 6))


def conv2d_oracle(x, weight, bias):
    """Direct 3x3 convolution with 1-pixel zero padding, (C,H,W) in."""
    c_out, c_in, kh, kw = weight.shape
    h, w = x.shape[1], x.shape[2]
    padded = np.zeros((c_in, h + 2, w + 2))
    padded[:, 1 : h + 1, 1 : w + 1] = x
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = bias[o] + np.sum(padded[:, i : i + kh, j : j + kw] * weight[o])
    return out


def forward_oracle(model, pixels):
    """Layer-by-layer numpy forward pass for one image."""
    x = pixels.astype(np.float64)
    state = {k: v.detach().numpy().astype(np.float64) for k, v in model.state_dict().items()}
    for b in range(len(model.config.channel_widths)):
        x = conv2d_oracle(x, state[f"blocks.{3 * b}.weight"], state[f"blocks.{3 * b}.bias"])
        x = np.maximum(x, 0.0)
        c, h, w = x.shape
        x = x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    features = x
    logits = state["head.weight"] @ features.mean(axis=(1, 2))
    return logits, features


class TestForward:
    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(0)
        model = ReferenceCNN(SMALL, seed=1)
        pixels = rng.random((3, 2, 16, 16)).astype(np.float32)
        out = model(ImageBatch(torch.from_numpy(pixels), torch.zeros(3, dtype=torch.long)))
        for i in range(3):
            logits, features = forward_oracle(model, pixels[i])
            assert np.allclose(out.logits[i].detach().numpy(), logits, atol=1e-5)
            assert np.allclose(out.features[i].detach().numpy(), features, atol=1e-5)

    def test_feature_shape(self):
        torch.manual_seed(0)
        model = ReferenceCNN(SMALL, seed=0)
        out = model(ImageBatch(torch.rand(2, 2, 16, 16), torch.zeros(2, dtype=torch.long)))
        assert out.features.shape == (2, 6, 4, 4)
        assert out.logits.shape == (2, 3)

    def test_shape_mismatch_rejected(self):
        torch.manual_seed(0)
        model = ReferenceCNN(SMALL, seed=0)
        with pytest.raises(ConfigurationError):
            model(ImageBatch(torch.rand(2, 2, 8, 8), torch.zeros(2, dtype=torch.long)))
        with pytest.raises(ConfigurationError):
            model(ImageBatch(torch.rand(2, 3, 16, 16), torch.zeros(2, dtype=torch.long)))

    def test_same_seed_same_weights(self):
        a = ReferenceCNN(SMALL, seed=5)
        b = ReferenceCNN(SMALL, seed=5)
        c = ReferenceCNN(SMALL, seed=6)
        for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
            assert torch.equal(va, vb), k
        assert any(not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(), c.state_dict().values()))


class TestImageBatch:
    def test_validation(self):
        with pytest.raises(ValueError):
            ImageBatch(torch.rand(2, 3, 8, 8) + 1.0, torch.zeros(2, dtype=torch.long))
        with pytest.raises(ValueError):
            ImageBatch(torch.rand(2, 3, 8, 8), torch.zeros(3, dtype=torch.long))
        with pytest.raises(ValueError):
            ImageBatch(torch.full((1, 1, 4, 4), float("nan")), torch.zeros(1, dtype=torch.long))
        with pytest.raises(ValueError):
            ImageBatch(torch.rand(8, 8), torch.zeros(1, dtype=torch.long))


class TestScoreGradients:
    def test_matches_central_finite_differences(self):
        torch.manual_seed(0)
        # d(score)/d(features) via autograd vs FD through the head only
        model = ReferenceCNN(SMALL, seed=2, dtype=torch.float64)
        pixels = torch.rand(2, 2, 16, 16, dtype=torch.float64)
        out = model(ImageBatch(pixels, torch.zeros(2, dtype=torch.long)))
        grad = class_score_gradient(out, class_index=1).detach().numpy()
        feats = out.features.detach().clone()
        rng = np.random.default_rng(3)
        eps = 1e-6
        for _ in range(60):
            b, k, u, v = (int(rng.integers(0, s)) for s in feats.shape)
            plus = feats.clone()
            plus[b, k, u, v] += eps
            minus = feats.clone()
            minus[b, k, u, v] -= eps
            s_plus = model.head(plus.mean(dim=(2, 3)))[b, 1]
            s_minus = model.head(minus.mean(dim=(2, 3)))[b, 1]
            fd = (s_plus - s_minus).item() / (2 * eps)
            assert grad[b, k, u, v] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_gap_head_gradient_is_weight_over_z(self):
        torch.manual_seed(0)
        # with a GAP-linear head the gradient at every location of channel k
        # is exactly w[c, k] / (u * v)
        model = ReferenceCNN(SMALL, seed=4, dtype=torch.float64)
        out = model(ImageBatch(torch.rand(3, 2, 16, 16, dtype=torch.float64), torch.zeros(3, dtype=torch.long)))
        z = out.features.shape[2] * out.features.shape[3]
        for c in range(3):
            grad = class_score_gradient(out, c)
            expected = model.head.weight[c].detach() / z
            for b in range(3):
                for k in range(out.features.shape[1]):
                    assert torch.allclose(grad[b, k], torch.full_like(grad[b, k], float(expected[k])), atol=1e-12)

    def test_true_class_gradient_selects_per_image_rows(self):
        torch.manual_seed(0)
        model = ReferenceCNN(SMALL, seed=5, dtype=torch.float64)
        labels = torch.tensor([2, 0, 1])
        out = model(ImageBatch(torch.rand(3, 2, 16, 16, dtype=torch.float64), labels))
        grad = true_class_score_gradient(out, labels)
        for b, c in enumerate(labels.tolist()):
            per_class = class_score_gradient(out, c)
            assert torch.allclose(grad[b], per_class[b], atol=1e-12)

    def test_out_of_range_class(self):
        torch.manual_seed(0)
        model = ReferenceCNN(SMALL, seed=0)
        out = model(ImageBatch(torch.rand(1, 2, 16, 16), torch.zeros(1, dtype=torch.long)))
        with pytest.raises(ValueError):
            class_score_gradient(out, 3)

    def test_gradients_flow_with_frozen_parameters(self):
        torch.manual_seed(0)
        model = ReferenceCNN(SMALL, seed=1)
        for p in model.parameters():
            p.requires_grad_(False)
        out = model(ImageBatch(torch.rand(1, 2, 16, 16), torch.zeros(1, dtype=torch.long)))
        grad = class_score_gradient(out, 0)
        assert grad.shape == out.features.shape


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = ReferenceCNN(BackboneConfig(input_size=16, in_channels=3, num_classes=4,
                                            channel_widths=(4, 8), class_names=["a", "b", "c", "d"]),
                             seed=7)
        path = tmp_path / "model.npz"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for (k, v), w in zip(model.state_dict().items(), loaded.state_dict().values()):
            assert torch.equal(v, w), k

    def test_save_is_deterministic(self, tmp_path):
        model = ReferenceCNN(SMALL, seed=3)
        save_checkpoint(tmp_path / "a.npz", model)
        save_checkpoint(tmp_path / "b.npz", model)
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_loaded_model_same_outputs(self, tmp_path):
        torch.manual_seed(0)
        model = ReferenceCNN(SMALL, seed=9)
        save_checkpoint(tmp_path / "m.npz", model)
        loaded = load_checkpoint(tmp_path / "m.npz")
        pixels = torch.rand(2, 2, 16, 16)
        batch = ImageBatch(pixels, torch.zeros(2, dtype=torch.long))
        assert torch.equal(model(batch).logits, loaded(batch).logits)

    def test_dtype_override(self, tmp_path):
        model = ReferenceCNN(SMALL, seed=1)
        save_checkpoint(tmp_path / "m.npz", model)
        loaded = load_checkpoint(tmp_path / "m.npz", dtype=torch.float64)
        assert loaded.dtype == torch.float64


class TestConfig:
    def test_divisibility_check(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(input_size=20, channel_widths=(4, 4, 4))

    def test_needs_two_classes(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(num_classes=1)

    def test_parameter_budget_of_tiny_config(self):
        # the gradient-check net must stay under 5k parameters
        model = ReferenceCNN(BackboneConfig(input_size=16, in_channels=2, num_classes=3,
                                            channel_widths=(4, 6)), seed=0)
        n_params = sum(p.numel() for p in model.parameters())
        assert n_params < 5000
