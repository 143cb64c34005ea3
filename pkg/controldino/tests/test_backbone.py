import torch
from django.test import SimpleTestCase

from controldino.backbone import (
    BackboneConfig,
    ToyTextEncoder,
    TokenState,
    build_backbone,
    freeze,
    patchify,
    unpatchify,
)
from controldino.errors import ContractError
from controldino.utils import module_checksum


def small_cfg(**kwargs) -> BackboneConfig:
    values = {"num_blocks": 2, "width": 32, "heads": 2, "text_dim": 8}
    values.update(kwargs)
    return BackboneConfig(**values)


class PatchifyTests(SimpleTestCase):
    def test_round_trip_is_exact(self):
        cfg = small_cfg()
        z = torch.randn(2, 4, 4, 6)
        tok = patchify(z, cfg)
        self.assertEqual(tok.grid, (2, 2, 3))
        self.assertEqual(tuple(tok.shape), (12, 16))
        self.assertTrue(torch.equal(unpatchify(tok, cfg), z))

    def test_indivisible_latent_names_axis(self):
        with self.assertRaisesMessage(ContractError, "width"):
            patchify(torch.zeros(1, 4, 4, 5), small_cfg())

    def test_token_state_checks_grid(self):
        with self.assertRaises(ContractError):
            TokenState(torch.zeros(5, 3), (1, 2, 2))


class ToyVideoDiTTests(SimpleTestCase):
    def setUp(self):
        self.cfg = small_cfg()
        self.model = freeze(build_backbone(self.cfg))
        g = torch.Generator().manual_seed(0)
        self.z = torch.randn(2, 4, 4, 4, generator=g)
        self.text = torch.randn(8, generator=g)

    def test_output_matches_latent_shape(self):
        out = self.model.denoise(self.z, 0.5, self.text)
        self.assertEqual(out.shape, self.z.shape)
        self.assertTrue(torch.isfinite(out).all())

    def test_same_seed_same_weights(self):
        other = build_backbone(self.cfg)
        self.assertEqual(module_checksum(other), module_checksum(self.model))
        self.assertNotEqual(module_checksum(build_backbone(small_cfg(seed=1))), module_checksum(self.model))

    def test_build_leaves_global_rng_alone(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        build_backbone(self.cfg)
        self.assertTrue(torch.equal(torch.rand(3), expected))

    def test_freeze(self):
        self.assertTrue(self.model.frozen)
        self.assertFalse(any(p.requires_grad for p in self.model.parameters()))

    def test_first_frame_conditions_output(self):
        plain = self.model.denoise(self.z, 0.5, self.text)
        anchored = self.model.denoise(self.z, 0.5, self.text, first_frame=self.z[:1] + 1.0)
        self.assertFalse(torch.allclose(plain, anchored))

    def test_zero_residuals_are_a_no_op(self):
        plain = self.model.denoise(self.z, 0.3, self.text)
        h = self.model.embed_tokens(self.z, None)
        zeros = [h.replace(torch.zeros_like(h.tokens)) for _ in range(self.cfg.num_blocks)]
        self.assertTrue(torch.equal(self.model.denoise(self.z, 0.3, self.text, residuals=zeros), plain))

    def test_residual_shape_mismatch_names_block(self):
        h = self.model.embed_tokens(self.z, None)
        bad = TokenState(torch.zeros(h.shape[0], 7), h.grid)
        with self.assertRaisesMessage(ContractError, "block 1"):
            self.model.denoise(self.z, 0.3, self.text, residuals=[None, bad])

    def test_too_many_residuals(self):
        with self.assertRaises(ContractError):
            self.model.denoise(self.z, 0.3, self.text, residuals=[None] * 3)

    def test_grid_beyond_positional_table(self):
        with self.assertRaises(ContractError):
            self.model.denoise(torch.zeros(17, 4, 2, 2), 0.3, self.text)


class ToyTextEncoderTests(SimpleTestCase):
    def test_deterministic_and_prompt_sensitive(self):
        enc = ToyTextEncoder(8)
        self.assertTrue(torch.equal(enc("a red car"), enc("a red car")))
        self.assertFalse(torch.equal(enc("a red car"), enc("a red car, blurry")))

    def test_empty_prompt_is_zero(self):
        self.assertTrue(torch.equal(ToyTextEncoder(8)(""), torch.zeros(8)))


class ResidualJacobianTests(SimpleTestCase):
    def test_gradient_with_respect_to_residual_matches_finite_differences(self):
        model = freeze(build_backbone(small_cfg())).double()
        g = torch.Generator().manual_seed(1)
        z = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
        text = torch.randn(8, generator=g, dtype=torch.float64)
        weights = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
        grid = model.embed_tokens(z, None).grid
        r = torch.randn(8, 32, generator=g, dtype=torch.float64, requires_grad=True)

        def objective(tokens):
            return (model.denoise(z, 0.4, text, residuals=[TokenState(tokens, grid), None]) * weights).sum()

        objective(r).backward()
        eps = 1e-6
        for index in [(0, 0), (3, 17), (7, 31)]:
            with torch.no_grad():
                up, down = r.detach().clone(), r.detach().clone()
                up[index] += eps
                down[index] -= eps
                numeric = (objective(up) - objective(down)).item() / (2 * eps)
            self.assertLess(abs(r.grad[index].item() - numeric), 1e-4 * max(1.0, abs(numeric)), index)


class PermutationTests(SimpleTestCase):
    def setUp(self):
        g = torch.Generator().manual_seed(2)
        self.z = torch.randn(3, 4, 4, 6, generator=g)
        self.text = torch.randn(8, generator=g)

    def test_without_positions_tokens_are_exchangeable(self):
        model = freeze(build_backbone(small_cfg(pos_embed=False)))
        with torch.no_grad():
            base = model.denoise(self.z, 0.6, self.text)
            order = [2, 0, 1]
            torch.testing.assert_close(model.denoise(self.z[order], 0.6, self.text), base[order],
                                       atol=1e-5, rtol=0)
            # shifting by one patch moves whole tokens
            shifted = model.denoise(torch.roll(self.z, 2, dims=3), 0.6, self.text)
            torch.testing.assert_close(shifted, torch.roll(base, 2, dims=3), atol=1e-5, rtol=0)

    def test_positions_break_exchangeability(self):
        model = freeze(build_backbone(small_cfg()))
        with torch.no_grad():
            base = model.denoise(self.z, 0.6, self.text)
            order = [2, 0, 1]
            self.assertFalse(torch.allclose(model.denoise(self.z[order], 0.6, self.text), base[order], atol=1e-5))
