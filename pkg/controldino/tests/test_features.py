import struct
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from controldino.errors import ContractError, FormatError, NumericError
from controldino.features import (
    PAPER_ENCODER,
    SOURCE_EXTERNAL,
    SOURCE_FILE,
    EncoderSpec,
    FeatureGrid,
    ToyPatchEncoder,
    bicubic_upscale,
    check_alignment,
    check_conditioning_shape,
    downscale_features,
    encode_frames,
    feature_grid_shape,
    load_features,
    save_features,
    upsample_features,
)
from controldino.services.tensorfile import MAGIC, decode_tensor, encode_tensor, read_header, write_tensor


def _cubic(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x < 1:
        return ((a + 2) * x - (a + 3)) * x * x + 1
    if x < 2:
        return a * (((x - 5) * x + 8) * x - 4)
    return 0.0


def _resample_axis(arr: np.ndarray, out_size: int, axis: int) -> np.ndarray:
    """Direct-convolution bicubic along one axis: pixel-centre aligned, weights renormalised at borders."""
    in_size = arr.shape[axis]
    scale = in_size / out_size
    weights = np.zeros((out_size, in_size))
    for o in range(out_size):
        centre = (o + 0.5) * scale
        row = np.array([_cubic(i + 0.5 - centre) for i in range(in_size)])
        weights[o] = row / row.sum()
    return np.moveaxis(np.tensordot(weights, np.moveaxis(arr, axis, 0), axes=1), 0, axis)


class BicubicUpscaleTests(SimpleTestCase):
    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(0)
        img = rng.random((1, 3, 4))
        out = bicubic_upscale(torch.from_numpy(img).float(), 2.0)
        self.assertEqual(tuple(out.shape), (1, 6, 8))
        expected = _resample_axis(_resample_axis(img[0], 8, axis=1), 6, axis=0)
        np.testing.assert_allclose(out[0].numpy(), expected, atol=1e-5)

    def test_constant_frame_stays_constant(self):
        out = bicubic_upscale(torch.full((3, 5, 7), 0.3), 2.0)
        torch.testing.assert_close(out, torch.full((3, 10, 14), 0.3), atol=1e-6, rtol=0)

    def test_factor_one_is_a_copy(self):
        frame = torch.rand(3, 4, 4)
        out = bicubic_upscale(frame, 1.0)
        self.assertTrue(torch.equal(out, frame))
        self.assertIsNot(out, frame)

    def test_non_integer_factor_rounds_up(self):
        self.assertEqual(tuple(bicubic_upscale(torch.rand(1, 5, 5), 1.5).shape), (1, 8, 8))

    def test_invalid_factor(self):
        with self.assertRaises(ContractError):
            bicubic_upscale(torch.rand(1, 2, 2), 0.0)


class GridShapeTests(SimpleTestCase):
    def test_reference_resolution(self):
        self.assertEqual(feature_grid_shape(480, 720, PAPER_ENCODER), (60, 90))

    def test_toy_resolution(self):
        self.assertEqual(feature_grid_shape(32, 48, EncoderSpec()), (4, 6))

    def test_indivisible_size_reports_padding(self):
        with self.assertRaisesMessage(ContractError, "grows by 4 pixels"):
            feature_grid_shape(30, 32, EncoderSpec())

    def test_conditioning_shape_check(self):
        self.assertEqual(check_conditioning_shape([49, 384, 60, 90], 49, 480, 720, PAPER_ENCODER),
                         (49, 384, 60, 90))
        with self.assertRaises(ContractError):
            check_conditioning_shape([49, 384, 60, 91], 49, 480, 720, PAPER_ENCODER)


class ToyEncoderTests(SimpleTestCase):
    def setUp(self):
        self.spec = EncoderSpec(feature_dim=16)

    def test_output_shape_and_unit_norm(self):
        video = torch.rand(5, 3, 32, 32)
        grid = encode_frames(video, self.spec)
        self.assertEqual(tuple(grid.data.shape), (5, 16, 4, 4))
        torch.testing.assert_close(grid.data.norm(dim=1), torch.ones(5, 4, 4), atol=1e-5, rtol=0)

    def test_deterministic(self):
        video = torch.rand(1, 3, 32, 32)
        self.assertTrue(torch.equal(encode_frames(video, self.spec).data, encode_frames(video, self.spec).data))

    def test_constant_frame_gives_constant_features(self):
        grid = encode_frames(torch.full((1, 3, 32, 32), 0.7), self.spec)
        expected = grid.data[:, :, :1, :1].expand_as(grid.data)
        torch.testing.assert_close(grid.data, expected, atol=1e-5, rtol=0)

    def test_black_frame_does_not_divide_by_zero(self):
        grid = encode_frames(torch.zeros(1, 3, 32, 32), self.spec)
        self.assertTrue(torch.equal(grid.data, torch.zeros_like(grid.data)))

    def test_feature_dim_limited_by_patch(self):
        with self.assertRaises(ContractError):
            ToyPatchEncoder(EncoderSpec(patch=2, feature_dim=13))

    def test_normalize_flag(self):
        spec = EncoderSpec(feature_dim=16, normalize=True)
        grid = encode_frames(torch.rand(1, 3, 32, 32), spec)
        torch.testing.assert_close(grid.data.mean(dim=1), torch.zeros(1, 4, 4), atol=1e-5, rtol=0)

    def test_external_encoder(self):
        def encoder(frame):
            return torch.ones(16, frame.shape[1] // 16, frame.shape[2] // 16)

        grid = encode_frames(torch.rand(2, 3, 32, 32), self.spec, encoder=encoder)
        self.assertEqual(grid.source, SOURCE_EXTERNAL)
        with self.assertRaisesMessage(ContractError, "frame 0"):
            encode_frames(torch.rand(2, 3, 32, 32), self.spec, encoder=lambda f: torch.ones(16, 3, 3))


class FeatureGridTests(SimpleTestCase):
    def test_validation(self):
        with self.assertRaises(ContractError):
            FeatureGrid(torch.zeros(2, 3, 4))
        with self.assertRaises(NumericError):
            FeatureGrid(torch.full((1, 1, 1, 1), float("nan")))

    def test_alignment(self):
        grid = FeatureGrid(torch.zeros(5, 4, 4, 6))
        check_alignment(grid, torch.zeros(2, 4, 4, 6))
        with self.assertRaisesMessage(ContractError, "width"):
            check_alignment(grid, torch.zeros(2, 4, 4, 5))

    def test_downscale(self):
        grid = FeatureGrid(torch.rand(2, 3, 60, 90))
        self.assertEqual(downscale_features(grid, 2).grid, (30, 45))
        self.assertTrue(torch.equal(downscale_features(grid, 1).data, grid.data))
        const = FeatureGrid(torch.full((1, 2, 4, 4), 0.25))
        self.assertTrue(torch.equal(downscale_features(const, 2).data, torch.full((1, 2, 2, 2), 0.25)))
        with self.assertRaises(ContractError):
            downscale_features(FeatureGrid(torch.rand(1, 1, 5, 4)), 2)

    def test_upsample_restores_grid(self):
        grid = FeatureGrid(torch.rand(1, 2, 4, 6))
        small = downscale_features(grid, 2)
        self.assertEqual(upsample_features(small, grid.grid).grid, grid.grid)

    def test_file_round_trip(self):
        grid = FeatureGrid(torch.randn(5, 4, 3, 2))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "features.cdkt"
            save_features(grid, path)
            loaded = load_features(path)
        self.assertEqual(loaded.source, SOURCE_FILE)
        self.assertTrue(torch.equal(loaded.data, grid.data))

    def test_load_rejects_wrong_rank(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "m.cdkt"
            write_tensor(path, torch.zeros(3, 4))
            with self.assertRaises(ContractError):
                load_features(path)


class TensorFileTests(SimpleTestCase):
    def test_bit_exact(self):
        values = torch.tensor([[0.1, -0.0, 3e-38], [1e30, -7.5, 0.5]])
        self.assertEqual(decode_tensor(encode_tensor(values)).tobytes(), values.numpy().tobytes())

    def test_layout(self):
        buf = encode_tensor(torch.zeros(2, 3))
        self.assertEqual(buf[:8], MAGIC)
        (hlen,) = struct.unpack("<I", buf[8:12])
        self.assertEqual(len(buf), 12 + hlen + 24)

    def test_bad_magic(self):
        with self.assertRaises(FormatError) as ctx:
            decode_tensor(b"NOTATENSOR" + bytes(10))
        self.assertEqual(ctx.exception.offset, 0)

    def test_truncated_header_length(self):
        with self.assertRaises(FormatError) as ctx:
            decode_tensor(MAGIC + b"\x01")
        self.assertEqual(ctx.exception.offset, 8)

    def test_unreadable_header(self):
        header = b"{not json"
        with self.assertRaises(FormatError) as ctx:
            decode_tensor(MAGIC + struct.pack("<I", len(header)) + header)
        self.assertEqual(ctx.exception.offset, 12)

    def test_truncated_data(self):
        buf = encode_tensor(torch.zeros(4, 4))
        (hlen,) = struct.unpack("<I", buf[8:12])
        with self.assertRaises(FormatError) as ctx:
            decode_tensor(buf[:-3])
        self.assertEqual(ctx.exception.offset, 12 + hlen)
        with self.assertRaises(FormatError):
            decode_tensor(buf + b"\x00")

    def test_read_header_of_reference_size_tensor(self):
        header = b'{"dtype": "f32", "shape": [49, 384, 60, 90], "order": "row_major"}'
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "big.cdkt"
            # header only: the shape check must not need the data
            path.write_bytes(MAGIC + struct.pack("<I", len(header)) + header)
            shape = read_header(path)
        self.assertEqual(shape, (49, 384, 60, 90))
        check_conditioning_shape(shape, 49, 480, 720, PAPER_ENCODER)

    def test_atomic_write_leaves_no_temp_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "sub" / "x.cdkt"
            write_tensor(path, torch.ones(2))
            self.assertEqual([p.name for p in path.parent.iterdir()], ["x.cdkt"])
