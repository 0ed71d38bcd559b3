import math

import numpy as np
import pytest

from sct.attention import PartTokenSet, ProjectionSet
from sct.cost import (
    AffinityStack,
    CostParams,
    DegenerateAffinityWarning,
    EdgeMap,
    EdgeWeights,
    PatchGrid,
    assemble_cost,
    build_cost,
    contrast_normalize,
    cosine_affinities,
    downsample_edge_map,
    edge_coupling_weights,
    edge_smooth,
    part_prototypes,
    patch_keys,
    sobel_edge_map,
)
from sct.errors import DimensionError, ParameterError, ValidationError
from sct.numerics import Rng


class TestPartPrototypes:
    def make(self, blocks, identities, heads=2, d_model=4):
        tokens = PartTokenSet(blocks, identities)
        rng = Rng(0)
        proj = ProjectionSet.seeded(rng, tokens.width, 5, d_model, heads)
        return tokens, proj

    def test_singleton_block_is_its_query(self):
        tokens, proj = self.make([np.array([[1.0, 2.0, 3.0]])], np.zeros((1, 3)))
        proto = part_prototypes(tokens, proj)
        q = (tokens.blocks[0] @ proj.w_q).reshape(1, proj.heads, proj.head_width).mean(axis=1)
        assert np.allclose(proto, q, atol=1e-15)

    def test_identical_tokens_mean_is_either(self):
        row = np.array([[0.5, -1.0, 2.0]])
        tokens, proj = self.make([np.vstack([row, row])], np.zeros((1, 3)))
        single, _ = self.make([row], np.zeros((1, 3)))
        assert np.allclose(
            part_prototypes(tokens, proj), part_prototypes(single, proj), atol=1e-15
        )

    def test_opposite_tokens_cancel(self):
        q = np.array([[1.0, -2.0, 0.5]])
        tokens, proj = self.make([np.vstack([q, -q])], np.zeros((1, 3)))
        proto = part_prototypes(tokens, proj)
        assert np.max(np.abs(proto)) < 1e-15

    def test_first_token_mode(self):
        blocks = [np.array([[1.0, 0.0], [0.0, 1.0]])]
        tokens, proj = self.make(blocks, np.zeros((1, 2)))
        first = part_prototypes(tokens, proj, mode="first")
        single, _ = self.make([blocks[0][:1]], np.zeros((1, 2)))
        assert np.allclose(first, part_prototypes(single, proj), atol=1e-15)
        with pytest.raises(ParameterError):
            part_prototypes(tokens, proj, mode="median")


class TestCosineAffinities:
    def test_self_similarity(self):
        v = np.array([[0.3, -0.4, 1.2]])
        assert cosine_affinities(v, v)[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        s = cosine_affinities(np.array([[1.0, 0.0]]), np.array([[0.0, 5.0]]))
        assert s[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_hand_dot_product(self):
        s = cosine_affinities(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]))
        assert s[0, 0] == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-12)
        assert s[0, 0] == pytest.approx(0.70711, abs=1e-5)

    def test_range_clamped(self):
        rng = Rng(1)
        s = cosine_affinities(rng.normals(4, 6), rng.normals(9, 6))
        assert s.min() >= -1.0 and s.max() <= 1.0

    def test_zero_key_rejected(self):
        with pytest.raises(ValidationError):
            cosine_affinities(np.ones((1, 2)), np.zeros((1, 2)))

    def test_zero_prototype_warns_and_zeroes_row(self):
        with pytest.warns(DegenerateAffinityWarning):
            s = cosine_affinities(np.zeros((1, 2)), np.ones((3, 2)))
        assert np.all(s == 0.0)


class TestDownsample:
    def test_constant_map(self):
        grid = downsample_edge_map(EdgeMap(np.full((8, 8), 0.37)), 4, 4)
        assert np.allclose(grid.edge_down, 0.37)

    def test_single_pixel_max_pools(self):
        img = np.zeros((8, 8))
        img[5, 2] = 1.0
        grid = downsample_edge_map(EdgeMap(img), 4, 4)
        expect = np.zeros((4, 4))
        expect[2, 1] = 1.0
        assert np.array_equal(grid.edge_down, expect)

    def test_zero_map(self):
        grid = downsample_edge_map(EdgeMap(np.zeros((6, 9))), 2, 3)
        assert np.all(grid.edge_down == 0.0)

    def test_non_divisible_pads_with_zeros(self):
        img = np.ones((5, 7))
        grid = downsample_edge_map(EdgeMap(img), 2, 2)
        assert grid.edge_down.shape == (2, 2)
        assert np.all(grid.edge_down == 1.0)  # max-pool keeps the ones

    def test_grid_larger_than_image(self):
        with pytest.raises(DimensionError):
            downsample_edge_map(EdgeMap(np.zeros((3, 3))), 4, 4)


class TestEdgeWeights:
    def test_smooth_region_weight_one(self):
        grid = PatchGrid.flat(2, 2)
        w = edge_coupling_weights(grid, 8.0)
        assert np.all(w.horizontal == 1.0) and np.all(w.vertical == 1.0)

    def test_full_edge_value(self):
        e = np.array([[1.0, 1.0]])
        w = edge_coupling_weights(PatchGrid(1, 2, e), 8.0)
        assert w.horizontal[0, 0] == pytest.approx(math.exp(-8.0), rel=1e-12)
        assert w.horizontal[0, 0] == pytest.approx(3.3546e-4, rel=1e-4)

    def test_max_rule(self):
        e = np.array([[0.5, 0.25]])
        w = edge_coupling_weights(PatchGrid(1, 2, e), 8.0)
        assert w.horizontal[0, 0] == pytest.approx(math.exp(-4.0), rel=1e-12)
        assert w.horizontal[0, 0] == pytest.approx(0.018316, rel=1e-4)

    def test_range_and_symmetry_by_construction(self):
        rng = Rng(2)
        e = np.clip(np.abs(rng.normals(5, 6)), 0, 1)
        w = edge_coupling_weights(PatchGrid(5, 6, e), 3.0)
        for arr in (w.horizontal, w.vertical):
            assert arr.min() > 0 and arr.max() <= 1.0

    def test_gamma_validated(self):
        with pytest.raises(ParameterError):
            edge_coupling_weights(PatchGrid.flat(2, 2), 0.0)


class TestEdgeSmooth:
    def test_lambda_zero_identity(self):
        rng = Rng(3)
        s = rng.normals(3, 12)
        grid = PatchGrid.flat(3, 4)
        w = edge_coupling_weights(grid, 8.0)
        assert np.array_equal(edge_smooth(s, grid, w, 0.0), s)

    def test_constant_row_unchanged(self):
        grid = PatchGrid.flat(3, 4)
        w = edge_coupling_weights(grid, 8.0)
        s = np.full((2, 12), 0.25)
        out = edge_smooth(s, grid, w, 0.8)
        assert np.max(np.abs(out - 0.25)) < 1e-15

    def test_isolated_patch_unchanged(self):
        # zero incident couplings leave the column untouched
        grid = PatchGrid.flat(1, 3)
        weights = EdgeWeights(horizontal=np.array([[0.0, 1.0]]), vertical=np.zeros((0, 3)))
        s = np.array([[5.0, 1.0, 1.0]])
        out = edge_smooth(s, grid, weights, 0.8)
        assert out[0, 0] == 5.0

    def test_convex_combination_bounds(self):
        rng = Rng(4)
        s = rng.normals(4, 30)
        grid = PatchGrid(5, 6, np.clip(np.abs(rng.normals(5, 6)), 0, 1))
        w = edge_coupling_weights(grid, 4.0)
        out = edge_smooth(s, grid, w, 0.8)
        s3 = s.reshape(4, 5, 6)
        o3 = out.reshape(4, 5, 6)
        for r in range(5):
            for c in range(6):
                neigh = [s3[:, r, c]]
                if r > 0:
                    neigh.append(s3[:, r - 1, c])
                if r < 4:
                    neigh.append(s3[:, r + 1, c])
                if c > 0:
                    neigh.append(s3[:, r, c - 1])
                if c < 5:
                    neigh.append(s3[:, r, c + 1])
                lo = np.min(neigh, axis=0) - 1e-12
                hi = np.max(neigh, axis=0) + 1e-12
                assert np.all(o3[:, r, c] >= lo) and np.all(o3[:, r, c] <= hi)

    def test_averaging_pulls_toward_neighbors(self):
        grid = PatchGrid.flat(1, 2)
        w = edge_coupling_weights(grid, 8.0)  # weight 1 on the single edge
        s = np.array([[1.0, 0.0]])
        out = edge_smooth(s, grid, w, 1.0)
        # (1 + 1*0)/(1+1) = 0.5 on both columns
        assert np.allclose(out, [[0.5, 0.5]], atol=1e-15)


class TestContrastNormalize:
    def test_zero_variance_column(self):
        out = contrast_normalize(np.array([[0.7], [0.7]]))
        assert np.allclose(out, 0.0)

    def test_hand_z_score(self):
        out = contrast_normalize(np.array([[1.0], [-1.0]]))
        # mean 0, population std 1 -> z = (1, -1), scaled by 1/3
        assert out[0, 0] == pytest.approx(1.0 / 3.0, abs=1e-7)
        assert out[1, 0] == pytest.approx(-1.0 / 3.0, abs=1e-7)

    def test_single_part_rows_are_zero(self):
        out = contrast_normalize(np.array([[0.3, -0.6, 0.9]]))
        assert np.all(out == 0.0)

    def test_output_range(self):
        rng = Rng(5)
        out = contrast_normalize(rng.normals(6, 40) * 100)
        assert out.min() >= -1.0 and out.max() <= 1.0


class TestAssembleCost:
    def test_endpoints_and_midpoint(self):
        c = assemble_cost(np.array([[1.0, -1.0, 0.0]]))
        assert c.tolist() == [[0.0, 1.0, 0.5]]

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            assemble_cost(np.array([[1.5]]))

    def test_order_reversing_per_column(self):
        rng = Rng(6)
        s = np.clip(rng.normals(5, 7), -1, 1)
        c = assemble_cost(s)
        for j in range(7):
            assert np.array_equal(np.argsort(s[:, j]), np.argsort(-c[:, j]))

    def test_range_contract(self):
        rng = Rng(7)
        s = np.clip(rng.normals(4, 9), -1, 1)
        c = assemble_cost(s)
        assert c.min() >= 0.0 and c.max() <= 1.0


class TestPipeline:
    def make_inputs(self, seed=0, n=3, k=2, hp=4, wp=5, d_img=6, zero_edges=False):
        rng = Rng(seed)
        tokens = PartTokenSet.seeded(rng, n, k, 4)
        proj = ProjectionSet.seeded(rng, 4, d_img, 8, 2)
        feats = rng.normals(hp * wp, d_img)
        edge = np.zeros((hp, wp)) if zero_edges else np.clip(np.abs(rng.normals(hp, wp)), 0, 1)
        grid = PatchGrid(hp, wp, edge)
        return tokens, proj, feats, grid

    def test_degenerate_reduction_lambda_zero(self):
        tokens, proj, feats, grid = self.make_inputs()
        c0, stack0 = build_cost(tokens, feats, proj, grid, CostParams(lambda_edge=0.0))
        # reference: pipeline with the smoothing stage skipped outright
        protos = part_prototypes(tokens, proj)
        keys = patch_keys(feats, proj)
        raw = cosine_affinities(protos, keys)
        c_ref = assemble_cost(contrast_normalize(raw))
        assert np.max(np.abs(c0 - c_ref)) < 1e-15
        assert np.array_equal(stack0.raw, stack0.smoothed)

    def test_degenerate_reduction_zero_edge_map_matches_flat_smoothing(self):
        tokens, proj, feats, grid = self.make_inputs(zero_edges=True)
        c, stack = build_cost(tokens, feats, proj, grid, CostParams())
        # all-zero edges mean all couplings are exactly 1: plain neighborhood
        # averaging, still a convex combination but not the identity
        w = edge_coupling_weights(grid, 8.0)
        assert np.all(w.horizontal == 1.0) and np.all(w.vertical == 1.0)
        expected = edge_smooth(stack.raw, grid, w, 0.8)
        assert np.max(np.abs(stack.smoothed - expected)) < 1e-15
        assert c.min() >= 0.0 and c.max() <= 1.0

    def test_stack_shapes_and_ranges(self):
        tokens, proj, feats, grid = self.make_inputs(seed=8)
        c, stack = build_cost(tokens, feats, proj, grid, CostParams())
        assert c.shape == stack.raw.shape == (3, 20)
        assert stack.raw.min() >= -1.0 and stack.raw.max() <= 1.0
        assert stack.normalized.min() >= -1.0 and stack.normalized.max() <= 1.0


class TestSobel:
    def test_flat_image_zero(self):
        e = sobel_edge_map(np.full((6, 6), 0.5))
        assert np.all(e.values == 0.0)

    def test_vertical_step_detected(self):
        img = np.zeros((8, 8))
        img[:, 4:] = 1.0
        e = sobel_edge_map(img)
        assert e.values[:, 3:5].min() == pytest.approx(1.0, abs=1e-12)
        assert np.all(e.values[:, :2] == 0.0) and np.all(e.values[:, 6:] == 0.0)

    def test_step_normalization_pins_straight_boundary(self):
        img = np.zeros((8, 8))
        img[:5, :] = 1.0
        e = sobel_edge_map(img, normalize="step")
        assert np.all(e.values[4:6, :] == 1.0)

    def test_hand_convolution_value(self):
        # interior pixel next to a unit vertical step: |Gx| = 1+2+1 = 4
        img = np.zeros((5, 5))
        img[:, 3:] = 1.0
        from sct.cost import _SOBEL_X, _convolve3x3

        gx = _convolve3x3(img, _SOBEL_X)
        assert gx[2, 2] == pytest.approx(4.0, abs=1e-12)
