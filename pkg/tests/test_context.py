import numpy as np
import pytest

from gfflab.checks import relu_pattern
from gfflab.context import DenseFeaturePyramid, PyramidPooling, dfp_collect, dfp_inputs, dfp_stage_width
from gfflab.core import Tensor, bilinear_resample, concat_channels, precision
from gfflab.core.gradcheck import gradcheck_report
from oracles import bilinear_naive, pool_naive


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def fused_levels(rng, c=4, sizes=(8, 4, 2, 2), n=1):
    return [rand(rng, n, c, s, s) for s in sizes]


class TestPPM:
    def test_preserves_extent(self):
        with precision("bits64"):
            ppm = PyramidPooling(6, 4, rng=np.random.default_rng(0))
            out = ppm(rand(np.random.default_rng(1), 2, 6, 6, 7))
        assert out.shape == (2, 4, 6, 7)

    def test_constant_input_gives_constant_branches(self):
        with precision("bits64"):
            ppm = PyramidPooling(3, 4, rng=np.random.default_rng(0))
            for p in ppm.pooled(Tensor(np.full((1, 3, 6, 6), 2.5))):
                np.testing.assert_allclose(p.data, 2.5, rtol=1e-15)

    def test_pooled_cells_match_partition_means(self):
        x = np.random.default_rng(2).standard_normal((1, 3, 6, 6))
        with precision("bits64"):
            ppm = PyramidPooling(3, 4, rng=np.random.default_rng(0))
            for b, p in zip((1, 2, 3, 6), ppm.pooled(Tensor(x))):
                np.testing.assert_allclose(p.data, pool_naive(x, b, b), rtol=1e-12)

    def test_bin_larger_than_input(self):
        with precision("bits64"):
            ppm = PyramidPooling(3, 4, rng=np.random.default_rng(0))
            with pytest.raises(ValueError):
                ppm(Tensor(np.zeros((2, 3, 4, 4))))

    def test_bins_must_increase(self):
        with pytest.raises(ValueError):
            PyramidPooling(3, 4, bins=(1, 3, 2), rng=np.random.default_rng(0))


class TestDFP:
    def test_stage_widths(self):
        for i in range(1, 5):
            assert dfp_stage_width(i, 32) == (i + 1) * 32
            assert dfp_stage_width(i, 32, literal=True) == i * 32

    def test_single_level_unrolled(self):
        rng = np.random.default_rng(3)
        with precision("bits64"):
            dfp = DenseFeaturePyramid(1, 4, rng=rng)
            y0, x1 = rand(rng, 1, 4, 2, 2), rand(rng, 1, 4, 4, 4)
            dfp.eval()
            got = dfp(y0, [x1])[0]
            ref = dfp.stage[0](concat_channels([bilinear_resample(y0, 4, 4), x1]))
        np.testing.assert_array_equal(got.data, ref.data)

    def test_zero_fused_leaves_context_projection(self):
        rng = np.random.default_rng(4)
        y0 = rand(rng, 1, 4, 2, 2)
        zeros = [Tensor(np.zeros((1, 4, s, s))) for s in (8, 4, 2, 2)]
        for i in range(1, 5):
            parts = dfp_inputs(y0, zeros, i)
            stub = concat_channels(parts).data.sum(axis=1)
            s = zeros[i - 1].shape[2]
            np.testing.assert_allclose(stub, bilinear_naive(y0.data, s, s).sum(axis=1), atol=1e-12)

    def test_dense_connectivity(self):
        rng = np.random.default_rng(5)
        y0, fused = rand(rng, 1, 4, 2, 2), fused_levels(rng)
        sources = [y0] + fused
        for i in range(1, 5):
            parts = dfp_inputs(y0, fused, i)
            assert len(parts) == i + 1
            s = fused[i - 1].shape[2]
            for part, src in zip(parts, sources):
                np.testing.assert_allclose(part.data, bilinear_naive(src.data, s, s), atol=1e-12)

    def test_literal_indexing_drops_own_level(self):
        rng = np.random.default_rng(6)
        y0, fused = rand(rng, 1, 4, 2, 2), fused_levels(rng)
        assert len(dfp_inputs(y0, fused, 1, literal=True)) == 1
        assert len(dfp_inputs(y0, fused, 4, literal=True)) == 4
        assert len(dfp_inputs(y0, fused, 4)) == 5

    def test_removing_context_changes_params_by_stage_slice(self):
        L, C = 4, 8
        with precision("bits64"):
            full = DenseFeaturePyramid(L, C, rng=np.random.default_rng(0))
            no_ctx = DenseFeaturePyramid(L, C, use_context=False, rng=np.random.default_rng(0))
        assert full.num_parameters() - no_ctx.num_parameters() == L * C * 3 * 3 * C
        for a, b in zip(full.stage, no_ctx.stage):
            assert a.conv.weight.shape[1] - b.conv.weight.shape[1] == C

    def test_collect(self):
        rng = np.random.default_rng(7)
        ys = fused_levels(rng, c=32)
        out = dfp_collect(ys, (8, 8))
        assert out.shape == (1, 128, 8, 8)
        const = dfp_collect([Tensor(np.full((1, 2, s, s), 3.0)) for s in (8, 4, 2, 2)], (8, 8))
        np.testing.assert_allclose(const.data, 3.0, rtol=1e-15)

    def test_ppm_dfp_gradcheck(self):
        rng = np.random.default_rng(8)
        with precision("bits64"):
            ppm = PyramidPooling(3, 2, bins=(1, 2), rng=rng)
            dfp = DenseFeaturePyramid(3, 2, rng=rng)
            top = rand(rng, 2, 3, 4, 4)
            fused = [rand(rng, 2, 2, s, s) for s in (8, 4, 4)]
            proj = rng.standard_normal((2, 6, 8, 8))
            ppm(top)
            dfp(ppm(top), fused)
            ppm.eval()
            dfp.eval()

            def f(*_):
                ys = dfp(ppm(top), fused)
                return (dfp_collect(ys, (8, 8)) * Tensor(proj)).sum()

            params = ppm.parameters() + dfp.parameters()
            rep = gradcheck_report(f, [top] + fused + params, max_coords=12, guard=relu_pattern)
        assert rep.max_error < 1e-4
        assert rep.checked > 10 * rep.skipped
