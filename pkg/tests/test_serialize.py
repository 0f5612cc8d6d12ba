"""Patch grids, cluster plans, embedding, and cluster targets."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from malvision.errors import DimensionError, GeometryError
from malvision.serialize import (ORDERS, build_cluster_plan, cluster_targets,
                                 embed, normalize_patches, patchify,
                                 tokens_to_image, unpatchify)


class TestPatchify:
    def test_paper_scale_192(self):
        img = np.zeros((3, 192, 192), dtype=np.float32)
        grid = patchify(img, 16)
        assert grid.n == 144

    def test_paper_scale_224(self):
        img = np.zeros((3, 224, 224), dtype=np.float32)
        grid = patchify(img, 16)
        assert grid.n == 196

    def test_single_pixel_patches(self):
        img = np.arange(4, dtype=np.float64).reshape(1, 2, 2)
        grid = patchify(img, 1)
        assert grid.n == 4
        assert np.array_equal(grid.patches.reshape(-1), [0, 1, 2, 3])

    def test_non_divisible_is_geometry_error(self):
        with pytest.raises(GeometryError):
            patchify(np.zeros((3, 30, 32)), 16)

    def test_patch_layout_is_pixel_raster(self):
        # one 2x2 patch of a 2-channel image: pixels in raster order,
        # channels trailing
        img = np.array([[[1.0, 2.0], [3.0, 4.0]],
                        [[10.0, 20.0], [30.0, 40.0]]])
        grid = patchify(img, 2)
        assert np.array_equal(grid.patches[0],
                              [1, 10, 2, 20, 3, 30, 4, 40])


class TestUnpatchify:
    @pytest.mark.parametrize("shape,patch", [((3, 32, 32), 8),
                                             ((3, 192, 192), 16),
                                             ((1, 4, 4), 4)])
    def test_round_trip_bit_identical(self, shape, patch):
        rng = np.random.default_rng(0)
        img = rng.normal(size=shape).astype(np.float32)
        grid = patchify(img, patch)
        back = unpatchify(grid, patch, shape[0], shape[1], shape[2])
        assert back.dtype == img.dtype
        assert np.array_equal(back, img)

    def test_geometry_mismatch(self):
        grid = patchify(np.zeros((3, 32, 32)), 8)
        with pytest.raises(GeometryError):
            unpatchify(grid, 8, 3, 64, 32)

    def test_tokens_to_image_then_patchify(self):
        rng = np.random.default_rng(1)
        tokens = rng.normal(size=(16, 2 * 2 * 3))
        img = tokens_to_image(tokens, 4, 4, 2, 3)
        assert np.array_equal(patchify(img, 2).patches, tokens)


class TestClusterPlan:
    def test_nine_clusters_of_4x4(self):
        plan = build_cluster_plan(12, 12, 4, 4, "row_forward")
        assert plan.num_clusters == 9

    def test_144_unit_clusters(self):
        plan = build_cluster_plan(12, 12, 1, 1, "row_forward")
        assert plan.num_clusters == 144

    def test_col_forward_2x2(self):
        # enumerated by hand from the column-first definition: columns
        # left to right, top to bottom inside a column
        plan = build_cluster_plan(2, 2, 1, 1, "col_forward")
        assert plan.perm.tolist() == [0, 2, 1, 3]

    def test_row_forward_2x2(self):
        plan = build_cluster_plan(2, 2, 1, 1, "row_forward")
        assert plan.perm.tolist() == [0, 1, 2, 3]

    def test_row_backward_reverses_within_rows(self):
        fwd = build_cluster_plan(4, 6, 2, 2, "row_forward")
        bwd = build_cluster_plan(4, 6, 2, 2, "row_backward")
        rows, cols = 2, 3
        size = 4
        for row in range(rows):
            f = fwd.perm[row * cols * size:(row + 1) * cols * size]
            b = bwd.perm[row * cols * size:(row + 1) * cols * size]
            f_clusters = [f[i * size:(i + 1) * size].tolist()
                          for i in range(cols)]
            b_clusters = [b[i * size:(i + 1) * size].tolist()
                          for i in range(cols)]
            assert b_clusters == f_clusters[::-1]

    def test_col_backward_reverses_within_columns(self):
        fwd = build_cluster_plan(4, 4, 2, 2, "col_forward")
        bwd = build_cluster_plan(4, 4, 2, 2, "col_backward")
        rows, size = 2, 4
        for col in range(2):
            f = fwd.perm[col * rows * size:(col + 1) * rows * size]
            b = bwd.perm[col * rows * size:(col + 1) * rows * size]
            f_clusters = [f[i * size:(i + 1) * size].tolist()
                          for i in range(rows)]
            b_clusters = [b[i * size:(i + 1) * size].tolist()
                          for i in range(rows)]
            assert b_clusters == f_clusters[::-1]

    @settings(max_examples=40, deadline=None)
    @given(rows=st.integers(1, 4), cols=st.integers(1, 4),
           ch=st.integers(1, 3), cw=st.integers(1, 3),
           order=st.sampled_from(ORDERS), seed=st.integers(0, 100))
    def test_perm_is_bijection(self, rows, cols, ch, cw, order, seed):
        plan = build_cluster_plan(rows * ch, cols * cw, ch, cw, order, seed)
        assert sorted(plan.perm.tolist()) == list(range(plan.n))

    @settings(max_examples=40, deadline=None)
    @given(rows=st.integers(1, 4), cols=st.integers(1, 4),
           ch=st.integers(1, 3), cw=st.integers(1, 3),
           order=st.sampled_from(ORDERS), seed=st.integers(0, 100))
    def test_cluster_contiguity(self, rows, cols, ch, cw, order, seed):
        plan = build_cluster_plan(rows * ch, cols * cw, ch, cw, order, seed)
        size = plan.cluster_size
        ids = plan.cluster_of[plan.perm]
        for k in range(plan.num_clusters):
            run = np.flatnonzero(ids == k)
            assert len(run) == size
            assert run[-1] - run[0] == size - 1  # one contiguous block

    def test_random_is_reproducible(self):
        a = build_cluster_plan(4, 4, 2, 2, "random", seed=42)
        b = build_cluster_plan(4, 4, 2, 2, "random", seed=42)
        c = build_cluster_plan(4, 4, 2, 2, "random", seed=43)
        assert np.array_equal(a.perm, b.perm)
        assert not np.array_equal(a.perm, c.perm)

    def test_random_requires_seed(self):
        with pytest.raises(GeometryError):
            build_cluster_plan(4, 4, 2, 2, "random")

    def test_divisibility_enforced(self):
        with pytest.raises(GeometryError):
            build_cluster_plan(5, 4, 2, 2, "row_forward")


class TestEmbed:
    def _setup(self, order="row_forward"):
        rng = np.random.default_rng(2)
        img = rng.normal(size=(3, 8, 8))
        grid = patchify(img, 2)
        plan = build_cluster_plan(4, 4, 2, 2, order)
        w = rng.normal(size=(5, 12))
        pos = rng.normal(size=(16, 5))
        return grid, plan, w, pos

    def test_zero_weights_zero_pos(self):
        grid, plan, w, pos = self._setup()
        out = embed(grid, plan, np.zeros_like(w), np.zeros_like(pos))
        assert np.array_equal(out, np.zeros((16, 5)))

    def test_identity_on_single_pixel_patches(self):
        img = np.arange(4, dtype=np.float64).reshape(1, 2, 2)
        grid = patchify(img, 1)
        plan = build_cluster_plan(2, 2, 1, 1, "row_forward")
        out = embed(grid, plan, np.eye(1), np.zeros((4, 1)))
        assert np.array_equal(out.reshape(-1), [0, 1, 2, 3])

    def test_against_per_token_loop(self):
        grid, plan, w, pos = self._setup("col_backward")
        out = embed(grid, plan, w, pos)
        for i in range(plan.n):
            r = plan.perm[i]
            want = w @ grid.patches[r] + pos[r]
            assert np.allclose(out[i], want, atol=1e-6)

    def test_position_follows_raster_location(self):
        # the same patch keeps the same positional code under any order
        grid, plan_a, w, pos = self._setup("row_forward")
        plan_b = build_cluster_plan(4, 4, 2, 2, "col_backward")
        out_a = embed(grid, plan_a, np.zeros_like(w), pos)
        out_b = embed(grid, plan_b, np.zeros_like(w), pos)
        for i in range(plan_a.n):
            j = np.flatnonzero(plan_b.perm == plan_a.perm[i])[0]
            assert np.array_equal(out_a[i], out_b[j])

    def test_dimension_mismatch(self):
        grid, plan, w, pos = self._setup()
        with pytest.raises(DimensionError):
            embed(grid, plan, w[:, :-1], pos)


class TestClusterTargets:
    def test_unit_clusters_equal_patches(self):
        rng = np.random.default_rng(3)
        img = rng.normal(size=(3, 8, 8))
        grid = patchify(img, 2)
        plan = build_cluster_plan(4, 4, 1, 1, "row_forward")
        targets = cluster_targets(grid, plan)
        assert np.array_equal(targets, grid.patches)

    def test_geometry_count(self):
        img = np.random.default_rng(4).normal(size=(3, 192, 192))
        grid = patchify(img, 16)
        plan = build_cluster_plan(12, 12, 4, 4, "row_forward")
        targets = cluster_targets(grid, plan)
        assert targets.shape == (9, 16 * 16 * 16 * 3)

    def test_constant_image(self):
        grid = patchify(np.full((1, 8, 8), 2.5), 2)
        plan = build_cluster_plan(4, 4, 2, 2, "row_forward")
        targets = cluster_targets(grid, plan)
        assert (targets == 2.5).all()

    def test_targets_concatenate_member_patches(self):
        rng = np.random.default_rng(5)
        img = rng.normal(size=(1, 4, 4))
        grid = patchify(img, 1)
        plan = build_cluster_plan(4, 4, 2, 2, "col_forward")
        targets = cluster_targets(grid, plan)
        for k in range(plan.num_clusters):
            members = plan.perm[plan.positions_of_cluster(k)]
            want = np.concatenate([grid.patches[m] for m in members])
            assert np.array_equal(targets[k], want)


class TestNormalizePatches:
    def test_raw_mode_is_identity(self):
        x = np.random.default_rng(6).normal(size=(4, 12))
        assert normalize_patches(x, "raw") is x

    def test_patch_mode_standardizes_each_vector(self):
        x = np.random.default_rng(7).normal(size=(4, 12)) * 3 + 5
        out = normalize_patches(x, "patch")
        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        assert np.allclose(out.std(axis=-1), 1.0, atol=1e-4)
