"""Box-generation chain vs per-pixel and flood-fill oracles."""

import numpy as np
import pytest

from care.annotations import BoundingBox
from care.bbox_autogen import (
    ComponentLabeling,
    ProbabilityMap,
    binarize,
    boxes_from_probability_map,
    extract_boxes,
    label_components,
    load_probability_map,
    save_probability_map,
    stub_saliency,
)


def flood_fill_oracle(binary, connectivity):
    """Stack-based flood fill; labels components 1..K in scan order."""
    h, w = binary.shape
    if connectivity == 4:
        neighbors = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        neighbors = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    labels = np.zeros((h, w), dtype=np.int64)
    k = 0
    for si in range(h):
        for sj in range(w):
            if not binary[si, sj] or labels[si, sj]:
                continue
            k += 1
            stack = [(si, sj)]
            labels[si, sj] = k
            while stack:
                i, j = stack.pop()
                for di, dj in neighbors:
                    ni, nj = i + di, j + dj
                    if 0 <= ni < h and 0 <= nj < w and binary[ni, nj] and not labels[ni, nj]:
                        labels[ni, nj] = k
                        stack.append((ni, nj))
    return labels


class TestProbabilityMap:
    def test_validation(self):
        with pytest.raises(ValueError):
            ProbabilityMap(np.zeros((3, 3, 3)))
        with pytest.raises(ValueError):
            ProbabilityMap(np.full((3, 3), 1.5))
        with pytest.raises(ValueError):
            ProbabilityMap(np.zeros((3, 3)), source="imagination")
        pm = ProbabilityMap(np.zeros((3, 3), dtype=np.float32))
        assert pm.values.dtype == np.float64


class TestBinarize:
    def test_threshold_is_inclusive(self):
        pm = ProbabilityMap(np.array([[0.49, 0.5], [0.51, 0.0]]))
        assert np.array_equal(binarize(pm, 0.5), [[0, 1], [1, 0]])

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            values = rng.random((9, 7))
            thr = float(rng.uniform(0.1, 0.9))
            got = binarize(ProbabilityMap(values), thr)
            want = np.array([[1 if values[i, j] >= thr else 0 for j in range(7)] for i in range(9)])
            assert np.array_equal(got, want)

    def test_bad_threshold(self):
        pm = ProbabilityMap(np.zeros((2, 2)))
        for thr in (0.0, 1.0, -0.2):
            with pytest.raises(ValueError):
                binarize(pm, thr)


class TestLabelComponents:
    def test_diagonal_connectivity_difference(self):
        binary = np.array([[1, 0], [0, 1]])
        assert label_components(binary, connectivity=4).num_components == 2
        assert label_components(binary, connectivity=8).num_components == 1

    def test_labels_numbered_in_first_appearance_order(self):
        binary = np.array(
            [
                [0, 1, 0, 1],
                [0, 1, 0, 1],
                [0, 0, 0, 0],
                [1, 0, 0, 0],
            ]
        )
        out = label_components(binary, connectivity=4)
        assert out.labels[0, 1] == 1
        assert out.labels[0, 3] == 2
        assert out.labels[3, 0] == 3
        assert list(out.areas) == [2, 2, 1]

    def test_matches_flood_fill_on_random_grids(self):
        # acceptance: partitions agree exactly with the flood-fill oracle
        rng = np.random.default_rng(1)
        for trial in range(200):
            binary = (rng.random((16, 16)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
            for connectivity in (4, 8):
                got = label_components(binary, connectivity)
                want = flood_fill_oracle(binary, connectivity)
                # identical partition AND identical numbering (both use
                # first-appearance order in a row-major scan)
                assert np.array_equal(got.labels, want), f"trial {trial} conn {connectivity}"
                assert np.array_equal(got.areas, np.bincount(want.ravel())[1:])

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            label_components(np.array([[0, 2]]))
        with pytest.raises(ValueError):
            label_components(np.zeros((2, 2)), connectivity=6)

    def test_empty_and_full_grids(self):
        assert label_components(np.zeros((5, 5), dtype=int)).num_components == 0
        full = label_components(np.ones((5, 5), dtype=int))
        assert full.num_components == 1
        assert full.areas[0] == 25


class TestExtractBoxes:
    def test_boxes_are_tight(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            binary = (rng.random((12, 12)) < 0.4).astype(np.uint8)
            labeling = label_components(binary, 8)
            boxes = extract_boxes(labeling, min_area_fraction=0.0, keep="all")
            assert len(boxes) == labeling.num_components
            for k, box in enumerate(boxes, start=1):
                ys, xs = np.nonzero(labeling.labels == k)
                assert (box.x_min, box.y_min) == (xs.min(), ys.min())
                assert (box.x_max, box.y_max) == (xs.max(), ys.max())

    def test_min_area_filters_small_components(self):
        binary = np.zeros((10, 10), dtype=np.uint8)
        binary[0:4, 0:4] = 1  # area 16
        binary[8, 8] = 1  # area 1
        labeling = label_components(binary, 8)
        assert len(extract_boxes(labeling, min_area_fraction=0.05, keep="all")) == 1
        assert len(extract_boxes(labeling, min_area_fraction=0.0, keep="all")) == 2
        # exactly at the fraction is kept (>=)
        assert len(extract_boxes(labeling, min_area_fraction=0.01, keep="all")) == 2

    def test_keep_largest_breaks_ties_by_smallest_label(self):
        binary = np.zeros((8, 8), dtype=np.uint8)
        binary[0, 0:3] = 1  # label 1, area 3
        binary[4, 0:3] = 1  # label 2, area 3
        labeling = label_components(binary, 8)
        boxes = extract_boxes(labeling, min_area_fraction=0.0, keep="largest")
        assert boxes == [BoundingBox(0, 0, 2, 0)]

    def test_nothing_survives_returns_empty(self):
        labeling = label_components(np.zeros((6, 6), dtype=int), 8)
        assert extract_boxes(labeling) == []

    def test_bad_arguments(self):
        labeling = ComponentLabeling(labels=np.zeros((4, 4), dtype=np.int64), areas=np.array([], dtype=np.int64))
        with pytest.raises(ValueError):
            extract_boxes(labeling, min_area_fraction=1.0)
        with pytest.raises(ValueError):
            extract_boxes(labeling, keep="some")


class TestFullChain:
    def test_single_blob(self):
        values = np.zeros((16, 16))
        values[4:9, 6:12] = 0.9
        boxes = boxes_from_probability_map(ProbabilityMap(values))
        assert boxes == [BoundingBox(6, 4, 11, 8)]

    def test_min_area_monotonicity(self):
        # growing the area threshold never yields more boxes
        rng = np.random.default_rng(3)
        for _ in range(50):
            values = rng.random((20, 20))
            pm = ProbabilityMap(values)
            counts = [
                len(boxes_from_probability_map(pm, min_area_fraction=f, keep="all"))
                for f in (0.0, 0.01, 0.05, 0.2)
            ]
            assert counts == sorted(counts, reverse=True)

    def test_threshold_monotonicity(self):
        # raising the binarization threshold never grows the foreground
        rng = np.random.default_rng(4)
        for _ in range(50):
            pm = ProbabilityMap(rng.random((15, 15)))
            sizes = [binarize(pm, t).sum() for t in (0.3, 0.5, 0.7)]
            assert sizes == sorted(sizes, reverse=True)

    def test_empty_result_when_all_below_threshold(self):
        pm = ProbabilityMap(np.full((8, 8), 0.2))
        assert boxes_from_probability_map(pm) == []


class TestStubSaliency:
    def test_range_shape_and_determinism(self):
        rng = np.random.default_rng(5)
        image = rng.random((3, 32, 32))
        a = stub_saliency(image)
        b = stub_saliency(image)
        assert a.values.shape == (32, 32)
        assert a.values.min() >= 0 and a.values.max() <= 1
        assert np.array_equal(a.values, b.values)
        assert a.source == "stub"

    def test_constant_image_is_all_zeros(self):
        assert stub_saliency(np.full((16, 16), 0.5)).values.max() == 0.0

    def test_lights_up_local_contrast(self):
        # a flat bright square only registers at its edges (blur matches the
        # interior); a textured patch stays salient throughout
        image = np.full((32, 32), 0.5)
        yy, xx = np.meshgrid(np.arange(10), np.arange(10), indexing="ij")
        image[10:20, 10:20] += 0.3 * (((xx // 2 + yy // 2) % 2) * 2 - 1)
        values = stub_saliency(image).values
        inside = values[12:18, 12:18].mean()
        far = values[0:6, 0:6].mean()
        assert inside > far + 0.3


class TestMapIO:
    def test_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(6)
        values = np.round(rng.random((12, 12)) * 255) / 255.0
        path = tmp_path / "map.png"
        save_probability_map(path, ProbabilityMap(values))
        loaded = load_probability_map(path)
        assert np.allclose(loaded.values, values, atol=1e-12)
