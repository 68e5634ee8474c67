import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roidepth.geometry import CameraModel
from roidepth.mask import (
    BUILDING,
    ROAD,
    VEHICLE,
    EmptyReferenceError,
    MaskConfig,
    SemanticMap,
    confidence_mask,
    knn_avg_distance,
)


def brute_force_knn(inst, ref, k):
    out = np.zeros(len(inst))
    for i, p in enumerate(inst):
        d = np.sqrt(((ref - p) ** 2).sum(axis=1))
        out[i] = np.sort(d)[:k].mean()
    return out


class TestKnn:
    def test_single_reference(self):
        assert knn_avg_distance([[0, 0, 0]], [[0, 2, 0]], 1)[0] == 2.0

    def test_hand_average(self):
        ref = [[1, 0, 0], [0, 2, 0], [0, 0, 3]]
        assert knn_avg_distance([[0, 0, 0]], ref, 2)[0] == pytest.approx(1.5)

    def test_coincident(self):
        assert knn_avg_distance([[1, 2, 3]], [[1, 2, 3], [5, 5, 5]], 1)[0] == 0.0

    def test_k_clamped(self):
        assert knn_avg_distance([[0, 0, 0]], [[3, 0, 0]], 5)[0] == 3.0

    def test_empty_reference(self):
        with pytest.raises(EmptyReferenceError):
            knn_avg_distance([[0, 0, 0]], np.zeros((0, 3)), 1)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_exhaustive_oracle(self, k):
        rng = np.random.default_rng(k)
        inst, ref = rng.normal(size=(200, 3)), rng.normal(size=(1000, 3))
        np.testing.assert_allclose(knn_avg_distance(inst, ref, k), brute_force_knn(inst, ref, k), rtol=1e-12)


def scene(ids):
    ids = np.asarray(ids)[None]
    depth = np.linspace(2, 20, ids.size).reshape(ids.shape)
    cam = CameraModel(10.0, 10.0, ids.shape[2] / 2, ids.shape[1] / 2)
    return depth, SemanticMap(ids), cam


class TestConfidenceMask:
    def test_no_instances_all_ones(self):
        depth, sem, cam = scene(np.full((4, 5), ROAD))
        np.testing.assert_array_equal(confidence_mask(depth, sem, cam), 1.0)

    def test_no_reference_falls_back(self, caplog):
        depth, sem, cam = scene(np.full((3, 3), VEHICLE))
        np.testing.assert_array_equal(confidence_mask(depth, sem, cam), 1.0)
        assert "no reference" in caplog.text

    def test_closed_form_half(self):
        # two pixels one unit apart in 3D: d = 1, so mu = exp(-alpha)
        depth = np.array([[[1.0, 1.0]]])
        cam = CameraModel(1.0, 1.0, 0.0, 0.0)
        sem = SemanticMap(np.array([[[VEHICLE, BUILDING]]]))
        mu = confidence_mask(depth, sem, cam, MaskConfig(k_neighbors=1, alpha_decay=1.0))
        assert mu[0, 0, 0] == pytest.approx(np.exp(-1.0))
        mu2 = confidence_mask(depth, sem, cam, MaskConfig(k_neighbors=1, alpha_decay=np.log(2)))
        assert mu2[0, 0, 0] == pytest.approx(0.5)
        assert mu[0, 0, 1] == 1.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_range_and_off_instance(self, seed):
        rng = np.random.default_rng(seed)
        ids = rng.choice([ROAD, BUILDING, VEHICLE], size=(6, 8))
        ids[0, 0] = ROAD
        depth = rng.uniform(1, 30, size=(1, 6, 8))
        cam = CameraModel(8.0, 8.0, 4.0, 3.0)
        mu = confidence_mask(depth, SemanticMap(ids[None]), cam, MaskConfig(k_neighbors=int(rng.integers(1, 6))))
        inst = ids[None] == VEHICLE
        assert np.all(mu[~inst] == 1.0)
        assert np.all((mu > 0) & (mu <= 1))

    def test_strictly_decreasing_in_distance(self):
        # a vehicle column moving away from a fixed building plane
        mus = []
        for gap in (0.5, 1.0, 2.0, 4.0):
            depth = np.array([[[5.0, 5.0 + gap]]])
            sem = SemanticMap(np.array([[[BUILDING, VEHICLE]]]))
            mus.append(confidence_mask(depth, sem, CameraModel(1e6, 1e6, 0.0, 0.0), MaskConfig(k_neighbors=1))[0, 0, 1])
        assert all(a > b for a, b in zip(mus, mus[1:]))

    def test_overlapping_classes_rejected(self):
        with pytest.raises(ValueError):
            SemanticMap(np.zeros((1, 2, 2), int), instance_classes={ROAD})

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            MaskConfig(k_neighbors=0)
