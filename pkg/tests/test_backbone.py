import numpy as np
import pytest

from avm_lab.autodiff import DiffTensor, as_tensor, tape_scope
from avm_lab.backbone import (
    backbone_forward,
    behavior_embed,
    behavior_mlp,
    block_forward,
    count_backbone_parameters,
    init_backbone,
    patch_embed,
    patchify,
)
from avm_lab.config import BackboneConfig
from avm_lab.errors import ConfigError, ContractError
from avm_lab.gradcheck import finite_difference_check


def zero_tensor(tensor: DiffTensor) -> None:
    tensor.values[...] = 0.0


class TestPatchEmbedding:
    def test_default_token_count(self):
        config = BackboneConfig()
        assert patchify(np.zeros((1, 36, 64)), config).shape == (1, 144, 16)
        assert (config.grid_h, config.grid_w) == (9, 16)

    def test_patch_order_is_row_major(self, tiny_backbone):
        image = np.arange(8 * 16, dtype=float).reshape(8, 16)
        patches = patchify(image, tiny_backbone)
        np.testing.assert_array_equal(patches[0, 1], image[0:4, 4:8].ravel())
        np.testing.assert_array_equal(patches[0, 4], image[4:8, 0:4].ravel())

    def test_zero_image_gives_positional_embeddings(self, tiny_backbone):
        params = init_backbone(tiny_backbone)
        tokens = patch_embed(np.zeros((2, 8, 16)), params, tiny_backbone)
        np.testing.assert_array_equal(tokens.values, np.broadcast_to(params.pos.values, (2, 8, 16)))

    def test_zero_projection_with_bias(self, tiny_backbone):
        params = init_backbone(tiny_backbone)
        zero_tensor(params.patch_w)
        params.patch_b.values[...] = 0.7
        image = np.random.default_rng(0).standard_normal((1, 8, 16))
        tokens = patch_embed(image, params, tiny_backbone)
        np.testing.assert_allclose(tokens.values[0], 0.7 + params.pos.values, atol=1e-15)

    def test_wrong_image_size(self, tiny_backbone):
        with pytest.raises(ConfigError):
            patchify(np.zeros((1, 8, 12)), tiny_backbone)


class TestBehavior:
    def test_zero_mlp_keeps_previous(self, tiny_backbone):
        block = init_backbone(tiny_backbone).blocks[0]
        zero_tensor(block.beh_w2)
        zero_tensor(block.beh_b2)
        b_prev = as_tensor(np.random.default_rng(1).standard_normal((2, 16)))
        b = behavior_embed(np.ones((2, 3)), b_prev, block)
        np.testing.assert_array_equal(b.values, b_prev.values)

    def test_base_case(self, tiny_backbone):
        block = init_backbone(tiny_backbone).blocks[0]
        raw = np.random.default_rng(2).standard_normal((2, 3))
        b = behavior_embed(raw, as_tensor(np.zeros((2, 16))), block)
        np.testing.assert_allclose(b.values, behavior_mlp(as_tensor(raw), block).values, atol=1e-15)

    def test_accumulation_over_blocks(self, tiny_backbone):
        params = init_backbone(tiny_backbone)
        first, second = params.blocks
        for name in ("beh_w1", "beh_b1", "beh_w2", "beh_b2"):
            getattr(second, name).values[...] = getattr(first, name).values
        raw = np.random.default_rng(3).standard_normal((2, 3))
        b0 = behavior_embed(raw, as_tensor(np.zeros((2, 16))), first)
        b1 = behavior_embed(raw, b0, second)
        np.testing.assert_allclose(b1.values, 2 * behavior_mlp(as_tensor(raw), first).values, atol=1e-14)


class TestBlock:
    def test_pure_residual(self, tiny_backbone):
        block = init_backbone(tiny_backbone).blocks[0]
        for name in ("o_w", "o_b", "mlp_w2", "mlp_b2"):
            zero_tensor(getattr(block, name))
        rng = np.random.default_rng(4)
        x = as_tensor(rng.standard_normal((2, 8, 16)))
        b = as_tensor(rng.standard_normal((2, 16)))
        a, f = block_forward(x, b, block, tiny_backbone)
        np.testing.assert_array_equal(a.values, x.values)
        np.testing.assert_array_equal(f.values, x.values)

    def test_single_token_attends_to_itself(self):
        config = BackboneConfig(image_h=2, image_w=2, patch=2, embed_dim=4, num_blocks=1, num_heads=1, behavior_dim=1)
        block = init_backbone(config).blocks[0]
        block.v_w.values[...] = np.eye(4)
        block.o_w.values[...] = np.eye(4)
        zero_tensor(block.mlp_w2)
        zero_tensor(block.mlp_b2)
        x = as_tensor(np.array([[[1.0, -2.0, 0.5, 3.0]]]))
        b = as_tensor(np.array([[0.25, 0.25, 0.25, 0.25]]))
        a, f = block_forward(x, b, block, config)
        np.testing.assert_allclose(a.values, x.values + (x.values + b.values[:, None, :]), atol=1e-15)
        np.testing.assert_array_equal(f.values, a.values)

    def test_token_permutation_equivariance(self, tiny_backbone):
        block = init_backbone(tiny_backbone).blocks[1]
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 8, 16))
        b = as_tensor(rng.standard_normal((1, 16)))
        perm = rng.permutation(8)
        _, f = block_forward(as_tensor(x), b, block, tiny_backbone)
        _, f_perm = block_forward(as_tensor(x[:, perm]), b, block, tiny_backbone)
        np.testing.assert_allclose(f_perm.values, f.values[:, perm], atol=1e-12)

    def test_rejects_empty_token_axis(self, tiny_backbone):
        block = init_backbone(tiny_backbone).blocks[0]
        with pytest.raises(ContractError):
            block_forward(as_tensor(np.zeros((1, 0, 16))), as_tensor(np.zeros((1, 16))), block, tiny_backbone)

    @pytest.mark.parametrize("layernorm", [False, True])
    def test_gradients(self, layernorm):
        config = BackboneConfig(
            image_h=8, image_w=8, patch=4, embed_dim=8, num_blocks=1, num_heads=2, behavior_dim=2,
            layernorm_enabled=layernorm,
        )
        block = init_backbone(config).blocks[0]
        rng = np.random.default_rng(6)
        x = DiffTensor(rng.standard_normal((1, 4, 8)), requires_grad=True)
        b = DiffTensor(rng.standard_normal((1, 8)), requires_grad=True)
        weights = rng.standard_normal((1, 4, 8))
        params = {"x": x, "b": b, **block.named_parameters("block")}

        report = finite_difference_check(
            lambda: (block_forward(x, b, block, config)[1] * weights).sum(), params,
            floor=1e-5, kink_tolerance=2e-4,
        )
        assert report.max_relative_error < 1e-4
        assert report.skipped <= report.coordinates // 2


class TestBackboneForward:
    def test_default_output_shape(self):
        config = BackboneConfig()
        params = init_backbone(config)
        fmap = backbone_forward(np.zeros((1, 36, 64)), np.zeros((1, 5)), params, config)
        assert fmap.shape == (1, 9, 16, 64)

    def test_all_zero_parameters_propagate_positional_embeddings(self, tiny_backbone):
        params = init_backbone(tiny_backbone)
        for name, tensor in params.named_parameters().items():
            if not name.endswith("pos_embed"):
                zero_tensor(tensor)
        image = np.random.default_rng(7).standard_normal((1, 8, 16))
        fmap = backbone_forward(image, np.ones((1, 3)), params, tiny_backbone)
        np.testing.assert_array_equal(fmap.values[0].reshape(8, 16), params.pos.values)

    def test_rejects_zero_blocks(self):
        with pytest.raises(ConfigError):
            BackboneConfig(num_blocks=0).validate()

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError):
            BackboneConfig(embed_dim=10, num_heads=4).validate()

    def test_closed_form_count(self, tiny_backbone):
        params = init_backbone(tiny_backbone)
        total = sum(t.values.size for t in params.named_parameters().values())
        assert total == count_backbone_parameters(tiny_backbone)

    def test_closed_form_count_with_layernorm(self):
        config = BackboneConfig(layernorm_enabled=True, embed_dim=8, num_heads=2)
        params = init_backbone(config)
        total = sum(t.values.size for t in params.named_parameters().values())
        assert total == count_backbone_parameters(config)

    def test_seeded(self, tiny_backbone):
        first = init_backbone(tiny_backbone).named_parameters()
        second = init_backbone(tiny_backbone).named_parameters()
        for name in first:
            np.testing.assert_array_equal(first[name].values, second[name].values)

    def test_tape_records_forward(self, tiny_backbone, tiny_inputs):
        params = init_backbone(tiny_backbone)
        images, behavior = tiny_inputs
        with tape_scope() as tape:
            backbone_forward(images, behavior, params, tiny_backbone)
            assert len(tape) > 0
