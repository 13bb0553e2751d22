"""Activation-map math against closed forms and a hand-rolled resizer."""

import math

import numpy as np
import pytest
import torch
from PIL import Image

from care.annotations import BoundingBox
from care.backbone import BackboneConfig, ImageBatch, ReferenceCNN
from care.cam import (
    ActivationMap,
    bilinear_resize,
    cam_for_true_class,
    channel_weights,
    normalize_and_resize,
    raw_cam,
    render_overlay,
    true_class_cams,
)

SMALL = BackboneConfig(input_size=16, in_channels=2, num_classes=3, channel_widths=(4, 6))


def bilinear_oracle(src, out_h, out_w):
    """Bilinear resize with half-pixel centers and edge clamping."""
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = (i + 0.5) * in_h / out_h - 0.5
        y0 = math.floor(sy)
        t = sy - y0
        ylo, yhi = min(max(y0, 0), in_h - 1), min(max(y0 + 1, 0), in_h - 1)
        for j in range(out_w):
            sx = (j + 0.5) * in_w / out_w - 0.5
            x0 = math.floor(sx)
            s = sx - x0
            xlo, xhi = min(max(x0, 0), in_w - 1), min(max(x0 + 1, 0), in_w - 1)
            out[i, j] = (
                src[ylo, xlo] * (1 - t) * (1 - s)
                + src[ylo, xhi] * (1 - t) * s
                + src[yhi, xlo] * t * (1 - s)
                + src[yhi, xhi] * t * s
            )
    return out


class TestChannelWeights:
    def test_gap_head_identity(self):
        # channel weight = head weight / Z, the closed form for a GAP-linear
        # head; holds to 1e-6 on random nets
        torch.manual_seed(0)
        for seed in range(5):
            model = ReferenceCNN(SMALL, seed=seed, dtype=torch.float64)
            out = model(ImageBatch(torch.rand(2, 2, 16, 16, dtype=torch.float64),
                                   torch.zeros(2, dtype=torch.long)))
            z = out.features.shape[2] * out.features.shape[3]
            for c in range(3):
                got = channel_weights(out, c)
                want = model.head.weight[c].detach() / z
                assert torch.allclose(got[0], want, atol=1e-6)
                assert torch.allclose(got[1], want, atol=1e-6)


class TestRawCam:
    def test_matches_weighted_sum_loop(self):
        rng = np.random.default_rng(0)
        features = torch.tensor(rng.normal(size=(2, 5, 4, 4)))
        weights = torch.tensor(rng.normal(size=(2, 5)))
        got = raw_cam(features, weights, clamp_negative=False).numpy()
        for b in range(2):
            want = sum(weights[b, k].item() * features[b, k].numpy() for k in range(5))
            assert np.allclose(got[b], want, atol=1e-12)

    def test_clamp_negative(self):
        features = torch.tensor([[[[1.0, -2.0]]]])
        weights = torch.tensor([[1.0]])
        assert torch.equal(raw_cam(features, weights), torch.tensor([[[1.0, 0.0]]]))

    def test_shape_check(self):
        with pytest.raises(ValueError):
            raw_cam(torch.rand(2, 5, 4, 4), torch.rand(2, 4))


class TestBilinearResize:
    def test_matches_hand_oracle(self):
        rng = np.random.default_rng(1)
        for in_hw, out_hw in [((4, 4), (16, 16)), ((8, 6), (64, 48)), ((5, 7), (3, 4)), ((4, 4), (4, 4))]:
            src = rng.random(in_hw)
            got = bilinear_resize(torch.tensor(src).unsqueeze(0), out_hw)[0].numpy()
            want = bilinear_oracle(src, *out_hw)
            assert np.allclose(got, want, atol=1e-6), (in_hw, out_hw)

    def test_constant_map_stays_constant(self):
        out = bilinear_resize(torch.full((1, 4, 4), 0.7), (32, 32))
        assert torch.allclose(out, torch.full((1, 32, 32), 0.7), atol=1e-7)


class TestNormalizeAndResize:
    def test_two_by_two_fixture(self):
        raw = torch.tensor([[0.5, 0.0], [0.0, 0.0]])
        out = normalize_and_resize(raw, (2, 2))[0]
        assert torch.allclose(out, torch.tensor([[1.0, 0.0], [0.0, 0.0]]), atol=1e-12)

    def test_range_attained_at_full_resolution(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            raw = torch.tensor(rng.random((3, 4, 4)))
            out = normalize_and_resize(raw, (64, 64))
            for b in range(3):
                assert out[b].min().item() == pytest.approx(0.0, abs=1e-12)
                assert out[b].max().item() == pytest.approx(1.0, abs=1e-12)

    def test_flat_map_becomes_zeros(self):
        out = normalize_and_resize(torch.full((2, 4, 4), 0.3), (16, 16))
        assert torch.equal(out, torch.zeros(2, 16, 16))

    def test_invariant_to_positive_affine_rescaling(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            raw = torch.tensor(rng.random((1, 5, 5)))
            scale = float(rng.uniform(0.1, 10.0))
            shift = float(rng.uniform(-3.0, 3.0))
            a = normalize_and_resize(raw, (20, 20))
            b = normalize_and_resize(raw * scale + shift, (20, 20))
            assert torch.allclose(a, b, atol=1e-10)

    def test_peak_lands_inside_hot_cell(self):
        raw = torch.zeros(1, 4, 4)
        raw[0, 1, 2] = 1.0
        out = normalize_and_resize(raw, (32, 32))[0]
        flat = out.argmax().item()
        y, x = divmod(flat, 32)
        assert 8 <= y < 16 and 16 <= x < 24  # footprint of cell (1, 2) at 8x scale


class TestActivationMap:
    def test_validation(self):
        with pytest.raises(ValueError):
            ActivationMap(np.full((4, 4), 1.5))
        with pytest.raises(ValueError):
            ActivationMap(np.zeros((4, 4, 4)))
        amap = ActivationMap(np.zeros((4, 4)), source_class=1, pre_norm_range=(0.0, 2.0))
        assert amap.source_class == 1


class TestTrueClassCams:
    def test_shape_and_range(self):
        torch.manual_seed(0)
        model = ReferenceCNN(SMALL, seed=3)
        labels = torch.tensor([0, 2])
        out = model(ImageBatch(torch.rand(2, 2, 16, 16), labels))
        cams = true_class_cams(out, labels, (16, 16))
        assert cams.shape == (2, 16, 16)
        assert cams.min() >= 0 and cams.max() <= 1

    def test_second_order_path_reaches_conv_weights(self):
        # seed/class chosen so the ReLU'd map is not identically zero (a dead
        # map has no gradient anywhere by construction)
        torch.manual_seed(0)
        model = ReferenceCNN(SMALL, seed=6, dtype=torch.float64)
        labels = torch.tensor([1])
        out = model(ImageBatch(torch.rand(1, 2, 16, 16, dtype=torch.float64), labels))
        cams = true_class_cams(out, labels, (16, 16), create_graph=True)
        loss = cams.mean()
        grads = torch.autograd.grad(loss, list(model.parameters()), allow_unused=True)
        named = dict(zip([n for n, _ in model.named_parameters()], grads))
        assert named["blocks.0.weight"] is not None
        assert named["blocks.0.weight"].abs().sum() > 0

    def test_detached_weights_still_train_features(self):
        torch.manual_seed(0)
        model = ReferenceCNN(SMALL, seed=6, dtype=torch.float64)
        labels = torch.tensor([1])
        out = model(ImageBatch(torch.rand(1, 2, 16, 16, dtype=torch.float64), labels))
        cams = true_class_cams(out, labels, (16, 16), detach_channel_weights=True)
        grads = torch.autograd.grad(cams.mean(), list(model.parameters()), allow_unused=True)
        assert any(g is not None and g.abs().sum() > 0 for g in grads)

    def test_matches_list_form(self):
        torch.manual_seed(0)
        model = ReferenceCNN(SMALL, seed=6, dtype=torch.float64)
        labels = torch.tensor([2, 1, 0])
        out = model(ImageBatch(torch.rand(3, 2, 16, 16, dtype=torch.float64), labels))
        tensor_cams = true_class_cams(out, labels, (16, 16)).detach().numpy()
        maps = cam_for_true_class(out, labels, (16, 16))
        for i, amap in enumerate(maps):
            assert amap.source_class == labels[i].item()
            assert np.allclose(amap.values, tensor_cams[i], atol=1e-10)
            lo, hi = amap.pre_norm_range
            assert lo <= hi


class TestRenderOverlay:
    def test_writes_png_with_input_dimensions(self, tmp_path):
        rng = np.random.default_rng(7)
        image = rng.random((3, 24, 30))
        amap = ActivationMap(rng.random((24, 30)))
        path = tmp_path / "overlay.png"
        render_overlay(image, amap, path, boxes=[BoundingBox(2, 3, 10, 12)])
        with Image.open(path) as img:
            assert img.size == (30, 24)
            arr = np.asarray(img)
        assert tuple(arr[3, 2][:3]) == (255, 0, 0)  # box outline drawn in red
