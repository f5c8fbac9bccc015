import itertools

import numpy as np
import pytest

from isrf.errors import DimensionMismatchError, EmptySelectionError, InvalidInputError
from isrf.field import VoxelField
from isrf.grid import GridGeometry
from isrf.io import Primitive, SynthSpec, synth_generate
from isrf.render import Camera
from isrf.semantic import (
    ExemplarSet,
    FeatureSet,
    PcaBasis,
    collect_stroke_features,
    kmeans,
    nnfm_seed,
    pca_fit,
    pca_project,
)


class TestPca:
    def test_exact_subspace_reconstruction(self):
        rng = np.random.default_rng(0)
        basis_true = np.linalg.qr(rng.standard_normal((16, 4)))[0].T  # (4, 16)
        coords = rng.standard_normal((60, 4))
        data = coords @ basis_true + rng.standard_normal(16) * 0  # affine offset zero
        data += np.array([0.5] * 16)  # shift into an affine subspace
        basis = pca_fit(FeatureSet(data, "teacher"), 4)
        proj = pca_project(basis, data)
        recon = proj @ basis.components + basis.mean
        np.testing.assert_allclose(recon, data, atol=1e-6)

    def test_full_rank_identity(self):
        rng = np.random.default_rng(1)
        data = rng.standard_normal((40, 6))
        basis = pca_fit(FeatureSet(data, "teacher"), 6)
        recon = pca_project(basis, data) @ basis.components + basis.mean
        np.testing.assert_allclose(recon, data, atol=1e-5)

    def test_matches_eigendecomposition_oracle(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((200, 16)) * np.linspace(3, 0.1, 16)
        basis = pca_fit(FeatureSet(data, "teacher"), 4)
        centered = data - data.mean(axis=0)
        cov = centered.T @ centered / (len(data) - 1)
        evals = np.sort(np.linalg.eigvalsh(cov))[::-1]
        np.testing.assert_allclose(basis.explained_variance, evals[:4], atol=1e-6)
        assert np.all(np.diff(basis.explained_variance) <= 1e-9)

    def test_components_orthonormal(self):
        rng = np.random.default_rng(3)
        basis = pca_fit(FeatureSet(rng.standard_normal((50, 8)), "teacher"), 5)
        np.testing.assert_allclose(basis.components @ basis.components.T, np.eye(5), atol=1e-5)

    def test_project_mean_is_zero(self):
        rng = np.random.default_rng(4)
        data = rng.standard_normal((30, 5))
        basis = pca_fit(FeatureSet(data, "teacher"), 3)
        np.testing.assert_allclose(pca_project(basis, basis.mean), 0.0, atol=1e-9)

    def test_project_component_is_unit_coordinate(self):
        rng = np.random.default_rng(5)
        data = rng.standard_normal((30, 5))
        basis = pca_fit(FeatureSet(data, "teacher"), 3)
        got = pca_project(basis, basis.mean + basis.components[0])
        np.testing.assert_allclose(got, [1, 0, 0], atol=1e-9)

    def test_project_matches_naive_matvec(self):
        rng = np.random.default_rng(6)
        data = rng.standard_normal((30, 5))
        basis = pca_fit(FeatureSet(data, "teacher"), 3)
        f = rng.standard_normal(5)
        naive = np.array([
            sum(basis.components[i, j] * (f[j] - basis.mean[j]) for j in range(5))
            for i in range(3)
        ])
        np.testing.assert_allclose(pca_project(basis, f), naive, atol=1e-7)

    def test_distance_preservation_in_subspace(self):
        rng = np.random.default_rng(7)
        basis_true = np.linalg.qr(rng.standard_normal((10, 3)))[0].T
        data = rng.standard_normal((40, 3)) @ basis_true
        basis = pca_fit(FeatureSet(data, "teacher"), 3)
        p = pca_project(basis, data)
        d_orig = np.linalg.norm(data[:10, None] - data[None, :10], axis=-1)
        d_proj = np.linalg.norm(p[:10, None] - p[None, :10], axis=-1)
        np.testing.assert_allclose(d_proj, d_orig, atol=1e-5)

    def test_dim_errors(self):
        data = np.zeros((10, 4))
        with pytest.raises(DimensionMismatchError):
            pca_fit(FeatureSet(data, "teacher"), 5)
        rng = np.random.default_rng(8)
        basis = pca_fit(FeatureSet(rng.standard_normal((10, 4)), "teacher"), 2)
        with pytest.raises(DimensionMismatchError):
            pca_project(basis, np.zeros(7))


class TestKmeans:
    def test_k_equals_n_distinct_points(self):
        pts = np.array([[0.0, 0], [1, 0], [0, 1], [5, 5]])
        ex = kmeans(FeatureSet(pts), k=4, seed=0)
        got = {tuple(c) for c in ex.centroids}
        assert got == {tuple(p) for p in pts}

    def test_k1_is_mean(self):
        rng = np.random.default_rng(9)
        pts = rng.standard_normal((20, 3))
        ex = kmeans(FeatureSet(pts), k=1, seed=0)
        np.testing.assert_allclose(ex.centroids[0], pts.mean(axis=0), atol=1e-9)

    def test_two_blobs_match_exhaustive_partition(self):
        rng = np.random.default_rng(10)
        a = rng.normal(0, 0.1, size=(5, 2))
        b = rng.normal(5, 0.1, size=(5, 2)) + [5, 0]
        pts = np.concatenate([a, b])
        ex = kmeans(FeatureSet(pts), k=2, seed=1)
        # brute-force optimal 2-clustering over all bipartitions
        best_sse, best_assign = np.inf, None
        for bits in itertools.product([0, 1], repeat=len(pts) - 1):
            assign = np.array((0,) + bits)
            if assign.min() == assign.max():
                continue
            sse = 0.0
            for j in (0, 1):
                sel = pts[assign == j]
                sse += ((sel - sel.mean(axis=0)) ** 2).sum()
            if sse < best_sse:
                best_sse, best_assign = sse, assign
        d = ((pts[:, None, :] - ex.centroids[None]) ** 2).sum(axis=2)
        got_assign = d.argmin(axis=1)
        if got_assign[0] != best_assign[0]:
            got_assign = 1 - got_assign
        assert np.array_equal(got_assign, best_assign)

    def test_sse_non_increasing(self):
        rng = np.random.default_rng(11)
        pts = rng.standard_normal((60, 4))
        trace = []
        kmeans(FeatureSet(pts), k=5, seed=2, trace=trace)
        assert len(trace) >= 1
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))

    def test_too_few_points(self):
        with pytest.raises(InvalidInputError):
            kmeans(FeatureSet(np.zeros((3, 2))), k=4)

    def test_seeded_determinism(self):
        rng = np.random.default_rng(12)
        pts = rng.standard_normal((40, 3))
        a = kmeans(FeatureSet(pts), k=4, seed=7)
        b = kmeans(FeatureSet(pts), k=4, seed=7)
        np.testing.assert_array_equal(a.centroids, b.centroids)


def front_camera(synth, w=48, h=48):
    from isrf.io import look_at

    f = 0.5 * w / np.tan(np.radians(50.0) / 2)
    return Camera(f, f, w / 2, h / 2, w, h, look_at((0, 0, -2.6)))


class TestStrokeFeatures:
    def test_empty_region_raises(self, tiny_synth):
        cam = tiny_synth.dataset.cameras[0]
        # a corner pixel looks past both objects
        with pytest.raises(EmptySelectionError):
            collect_stroke_features(tiny_synth.field, cam, [(0, 0), (1, 0)])

    def test_on_object_features_near_generator(self, tiny_synth):
        field = tiny_synth.field
        cam = front_camera(tiny_synth)
        # project the sphere center to find on-object pixels
        from isrf.semantic import FeatureSet as FS

        center = np.array([-0.45, 0.05, 0.0, 1.0])
        c2w = cam.camera_to_world
        p_cam = np.linalg.inv(c2w) @ center
        u = cam.fx * p_cam[0] / p_cam[2] + cam.cx - 0.5
        v = cam.fy * p_cam[1] / p_cam[2] + cam.cy - 0.5
        pixels = [(u + du, v + dv) for du in (-1, 0, 1) for dv in (-1, 0, 1)]
        feats = collect_stroke_features(field, cam, pixels)
        gt = tiny_synth.feature_vectors["sphere"]
        dist = np.linalg.norm(feats.vectors - gt, axis=1)
        # within a couple of noise standard deviations of the generator vector
        spec_noise = 0.5 * np.sqrt(field.feature_dim)
        assert np.all(dist < 2.5 * spec_noise)

    def test_duplicates_preserved(self, tiny_synth):
        cam = front_camera(tiny_synth)
        center = np.array([-0.45, 0.05, 0.0, 1.0])
        p_cam = np.linalg.inv(cam.camera_to_world) @ center
        u = cam.fx * p_cam[0] / p_cam[2] + cam.cx - 0.5
        v = cam.fy * p_cam[1] / p_cam[2] + cam.cy - 0.5
        once = collect_stroke_features(tiny_synth.field, cam, [(u, v)])
        twice = collect_stroke_features(tiny_synth.field, cam, [(u, v), (u, v)])
        assert len(twice) == 2 * len(once)
        np.testing.assert_array_equal(twice.vectors[0], twice.vectors[1])


class TestNnfmSeed:
    def occupied_field(self, res=8, feature_dim=3, seed=13):
        g = GridGeometry((res, res, res), (-1, -1, -1), (1, 1, 1))
        rng = np.random.default_rng(seed)
        fld = VoxelField.empty(g, feature_dim=feature_dim)
        fld.density.values[:] = 50.0  # everything occupied
        fld.feature.values[:] = rng.standard_normal(fld.feature.values.shape)
        return fld

    def test_exact_match_in_seed(self):
        fld = self.occupied_field()
        g = fld.geometry
        target = fld.feature.values[3, 4, 5].copy()
        seed = nnfm_seed(fld, ExemplarSet(target[None]), threshold=1e-6)
        assert seed.bits[3, 4, 5]

    def test_tiny_threshold_empty(self):
        fld = self.occupied_field()
        ex = ExemplarSet(np.full((1, 3), 100.0))
        seed = nnfm_seed(fld, ex, threshold=1e-9)
        assert seed.popcount() == 0

    def test_matches_brute_force(self):
        fld = self.occupied_field(res=8)
        rng = np.random.default_rng(14)
        ex = ExemplarSet(rng.standard_normal((4, 3)))
        theta = 1.2
        seed = nnfm_seed(fld, ex, threshold=theta)
        # brute force double loop over voxels x centroids
        g = fld.geometry
        feats = fld.feature.values.reshape(-1, 3)
        occ = fld.occupancy()
        for idx in range(g.node_count):
            dmin = min(np.sqrt(((feats[idx] - c) ** 2).sum()) for c in ex.centroids)
            x, y, z = g.decode_index(idx)
            assert seed.bits[z, y, x] == (occ[idx] and dmin < theta)

    def test_monotone_in_threshold(self):
        fld = self.occupied_field(res=6)
        rng = np.random.default_rng(15)
        ex = ExemplarSet(rng.standard_normal((3, 3)))
        prev = None
        for theta in (0.3, 0.6, 1.0, 2.0):
            cur = nnfm_seed(fld, ex, threshold=theta)
            if prev is not None:
                assert np.all(prev.bits <= cur.bits)
            prev = cur

    def test_unoccupied_voxels_never_seed(self):
        fld = self.occupied_field()
        fld.density.values[0, 0, 0] = -30.0
        target = fld.feature.values[0, 0, 0].copy()
        seed = nnfm_seed(fld, ExemplarSet(target[None]), threshold=1e-3)
        assert not seed.bits[0, 0, 0]

    def test_default_threshold_on_synthetic(self):
        # stroke on the small sphere: the percentile rule seeds ~10% of the
        # occupied voxels, all inside the stroked object
        spec = SynthSpec(
            seed=22, resolution=(20, 20, 20),
            primitives=[
                Primitive("sphere", (-0.5, 0.0, 0.0), 0.24, (0.85, 0.3, 0.25), "sphere"),
                Primitive("box", (0.35, 0.0, 0.0), (0.75, 0.65, 0.65), (0.25, 0.45, 0.85), "box"),
            ],
            image_size=(48, 48), n_train=4, n_test=0,
        )
        synth = synth_generate(spec)
        field = synth.field
        cam = front_camera(synth)
        p_cam = np.linalg.inv(cam.camera_to_world) @ np.array([-0.5, 0.0, 0.0, 1.0])
        u = cam.fx * p_cam[0] / p_cam[2] + cam.cx - 0.5
        v = cam.fy * p_cam[1] / p_cam[2] + cam.cy - 0.5
        pixels = [(u + du, v + dv) for du in (-2, -1, 0, 1, 2) for dv in (-2, -1, 0, 1, 2)]
        feats = collect_stroke_features(field, cam, pixels)
        ex = kmeans(feats, k=min(10, len(feats)), seed=0)
        seed = nnfm_seed(field, ex)
        gt = synth.object_masks["sphere"]
        inter = (seed.bits & gt.bits).sum()
        assert seed.popcount() > 0
        precision = inter / seed.popcount()
        recall = inter / gt.popcount()
        assert precision >= 0.99
        assert recall >= 0.3

    def test_average_baseline_recalls_less_on_two_materials(self):
        # one object made of two feature clusters: the mean exemplar sits
        # between them and matches poorly at a common tight threshold
        spec = SynthSpec(
            seed=21, resolution=(20, 20, 20),
            primitives=[
                Primitive("box", (-0.25, 0, 0), (0.5, 0.5, 0.5), (0.8, 0.3, 0.2), "left", feature_id="m1"),
                Primitive("box", (0.25, 0, 0), (0.5, 0.5, 0.5), (0.3, 0.8, 0.2), "right", feature_id="m2"),
            ],
            image_size=(48, 48), n_train=4, n_test=0,
        )
        res = synth_generate(spec)
        field = res.field
        gt_bits = res.object_masks["left"].bits | res.object_masks["right"].bits
        stroke_feats = FeatureSet(np.concatenate([
            res.feature_vectors["m1"] + 0.3 * np.random.default_rng(1).standard_normal((20, spec.feature_dim)),
            res.feature_vectors["m2"] + 0.3 * np.random.default_rng(2).standard_normal((20, spec.feature_dim)),
        ]), "stroke")
        theta = 0.45 * np.linalg.norm(res.feature_vectors["m1"] - res.feature_vectors["m2"])

        def recall(ex):
            seed = nnfm_seed(field, ex, threshold=theta)
            return (seed.bits & gt_bits).sum() / gt_bits.sum()

        avg = ExemplarSet(stroke_feats.vectors.mean(axis=0)[None])
        all_feats = ExemplarSet(stroke_feats.vectors)
        km = kmeans(stroke_feats, k=10, seed=3)
        assert recall(avg) < recall(all_feats)
        assert recall(avg) < recall(km)
        assert recall(km) > 0.9
