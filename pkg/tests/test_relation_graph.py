import numpy as np
import pytest
import torch
from torch import nn

from fret.errors import ShapeMismatchError
from fret.relation_graph import (
    MaskMatrix,
    decompose,
    feature_graph,
    identity_mask,
    normalize_graph,
    propagate,
)

from conftest import finite_diff_grad, max_rel_error


class TestFeatureGraph:
    def test_identity_batch(self):
        assert torch.equal(feature_graph(torch.eye(2)), torch.eye(2))

    def test_hand_computed_product(self):
        z = torch.tensor([[1.0, 1.0], [0.0, 1.0]])
        assert torch.equal(feature_graph(z), torch.tensor([[1.0, 1.0], [1.0, 2.0]]))

    def test_zero_batch(self):
        assert torch.equal(feature_graph(torch.zeros(3, 2)), torch.zeros(2, 2))

    def test_symmetric_nonnegative_diagonal(self):
        z = torch.randn(6, 4)
        g = feature_graph(z)
        assert torch.allclose(g, g.T)
        assert (torch.diagonal(g) >= 0).all()


class TestMaskMatrix:
    def test_identity_kind(self):
        mask = identity_mask(3)
        assert mask.kind == "identity"
        assert torch.equal(mask.m, torch.eye(3))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            MaskMatrix(m=torch.tensor([[0.0, 1.0], [0.0, 0.0]]))

    def test_rejects_non_square(self):
        with pytest.raises(ShapeMismatchError):
            MaskMatrix(m=torch.zeros(2, 3))


class TestDecompose:
    def test_identity_mask_split(self):
        g_f = torch.tensor([[1.0, 1.0], [1.0, 2.0]])
        pair = decompose(g_f, identity_mask(2))
        assert torch.equal(pair.g_a, torch.tensor([[1.0, 0.0], [0.0, 2.0]]))
        assert torch.equal(pair.g_r, torch.tensor([[0.0, 1.0], [1.0, 0.0]]))

    def test_all_ones_mask_keeps_everything(self):
        g_f = torch.randn(3, 3)
        g_f = g_f + g_f.T
        pair = decompose(g_f, MaskMatrix(m=torch.ones(3, 3)))
        assert torch.equal(pair.g_a, g_f)
        assert torch.equal(pair.g_r, torch.zeros(3, 3))

    def test_zero_mask_keeps_nothing(self):
        g_f = torch.randn(3, 3)
        g_f = g_f + g_f.T
        pair = decompose(g_f, MaskMatrix(m=torch.zeros(3, 3)))
        assert torch.equal(pair.g_a, torch.zeros(3, 3))
        assert torch.equal(pair.g_r, g_f)

    def test_exact_additivity_bit_for_bit(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            z = torch.from_numpy(rng.normal(size=(5, 4)).astype(np.float32))
            g_f = feature_graph(z)
            mask = torch.from_numpy(
                (rng.random((4, 4)) > 0.5).astype(np.float32)
            )
            mask = torch.maximum(mask, mask.T)
            pair = decompose(g_f, MaskMatrix(m=mask))
            assert torch.equal(pair.g_a + pair.g_r, g_f)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            decompose(torch.zeros(3, 3), identity_mask(2))


class TestNormalizeGraph:
    def test_diagonal_graph_becomes_identity(self):
        g = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
        assert torch.allclose(normalize_graph(g), torch.eye(2), atol=1e-6)

    def test_unit_degrees_unchanged(self):
        g = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        assert torch.allclose(normalize_graph(g), g, atol=1e-6)

    def test_zero_graph_stays_zero(self):
        assert torch.equal(normalize_graph(torch.zeros(3, 3)), torch.zeros(3, 3))

    def test_symmetry_preserved(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            g = torch.from_numpy(rng.normal(size=(5, 5)))
            g = g + g.T
            out = normalize_graph(g)
            assert torch.allclose(out, out.T, atol=1e-12)

    def test_signed_rows_stay_finite(self):
        g = torch.tensor([[1.0, -1.0], [-1.0, 1.0]])
        assert torch.isfinite(normalize_graph(g)).all()


class TestPropagate:
    def test_identity_mask_collapse(self):
        rng = np.random.default_rng(4)
        head = nn.Linear(3, 2)
        for _ in range(20):
            z = torch.from_numpy(rng.normal(size=(4, 3)).astype(np.float32))
            pair = decompose(feature_graph(z), identity_mask(3))
            prop = propagate(z, pair, head)
            bound = 1e-5 * float(z.abs().max())
            assert float((prop.r_a - z).abs().max()) < bound

    def test_hand_computed_redundancy_propagation(self):
        z = torch.tensor([[1.0, 1.0], [0.0, 1.0]])
        pair = decompose(feature_graph(z), identity_mask(2))
        head = nn.Linear(2, 2, bias=False)
        prop = propagate(z, pair, head)
        assert torch.allclose(prop.r_r, torch.tensor([[1.0, 1.0], [1.0, 0.0]]), atol=1e-6)

    def test_zero_batch_zero_outputs(self):
        z = torch.zeros(3, 2)
        pair = decompose(torch.zeros(2, 2), identity_mask(2))
        head = nn.Linear(2, 4)
        prop = propagate(z, pair, head)
        assert torch.equal(prop.r_a, torch.zeros(3, 2))
        assert torch.equal(prop.r_r, torch.zeros(3, 2))
        bias_row = head.bias.detach().expand(3, -1)
        assert torch.allclose(prop.p_a, bias_row)
        assert torch.allclose(prop.p_r, bias_row)

    def test_projections_match_head(self):
        z = torch.randn(5, 3)
        pair = decompose(feature_graph(z), identity_mask(3))
        head = nn.Linear(3, 4)
        prop = propagate(z, pair, head)
        assert torch.allclose(prop.p_a, head(prop.r_a), atol=1e-6)
        assert torch.allclose(prop.p_r, head(prop.r_r), atol=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        head = nn.Linear(3, 2).double()

        def reduction(z):
            pair = decompose(feature_graph(z), identity_mask(3))
            prop = propagate(z, pair, head)
            return (prop.r_a.sin().sum() + prop.p_r.cos().sum() + prop.r_r.sum())

        for _ in range(5):
            z = torch.from_numpy(rng.normal(size=(4, 3)))
            fd = finite_diff_grad(reduction, z)
            z_ag = z.detach().clone().requires_grad_(True)
            reduction(z_ag).backward()
            assert max_rel_error(z_ag.grad, fd) < 1e-4

    def test_width_mismatch(self):
        pair = decompose(torch.zeros(2, 2), identity_mask(2))
        with pytest.raises(ShapeMismatchError):
            propagate(torch.zeros(3, 4), pair, nn.Linear(2, 2))


class TestDumpGraphs:
    def test_writes_arrays_and_heatmap(self, tmp_path):
        z = torch.randn(6, 4)
        pair = decompose(feature_graph(z), identity_mask(4))
        paths = __import__("fret.relation_graph", fromlist=["dump_graphs"]).dump_graphs(
            pair, tmp_path, stem="batch0"
        )
        assert len(paths) == 4
        for p in paths:
            assert p.exists() and p.stat().st_size > 0
        back = np.load(tmp_path / "batch0.g_f.npy")
        assert np.allclose(back, pair.source.numpy())
