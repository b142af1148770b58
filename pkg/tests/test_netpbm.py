"""PPM/PGM reader-writer round trips and header handling."""

import numpy as np
import numpy.testing as npt
import pytest

from dcat.netpbm import NetpbmError, read_pgm, read_ppm, to_u8, write_pgm, write_ppm


class TestRoundTrip:
    def test_ppm(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(3, 5, 7), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        npt.assert_array_equal(read_ppm(path), img)

    def test_pgm(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(4, 6), dtype=np.uint8)
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        npt.assert_array_equal(read_pgm(path), img)

    def test_float_image_quantized(self, tmp_path):
        img = np.zeros((3, 1, 2), dtype=np.float64)
        img[:, 0, 0] = [0.0, 0.5, 1.0][0]
        img[0, 0, 1] = 1.0
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back[0, 0, 1] == 255 and back[0, 0, 0] == 0

    def test_write_is_deterministic(self, tmp_path):
        img = np.random.default_rng(2).random((3, 8, 8))
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        write_ppm(p1, img)
        write_ppm(p2, img)
        assert p1.read_bytes() == p2.read_bytes()


class TestHeaders:
    def test_pixel_order_is_row_major_rgb(self, tmp_path):
        img = np.zeros((3, 2, 2), dtype=np.uint8)
        img[0, 0, 0] = 10  # red channel, top-left
        img[2, 1, 1] = 20  # blue channel, bottom-right
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        raw = path.read_bytes()
        pixels = raw[len(b"P6\n2 2\n255\n"):]
        assert pixels[0] == 10 and pixels[-1] == 20

    def test_comments_and_whitespace_tolerated(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5 # a comment\n  2\n# another\n 1 255\n\x07\x09")
        npt.assert_array_equal(read_pgm(path), np.array([[7, 9]], dtype=np.uint8))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(NetpbmError, match="magic"):
            read_ppm(path)

    def test_truncated_pixels(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P6\n2 2\n255\n\x00\x00")
        with pytest.raises(NetpbmError, match="truncated"):
            read_ppm(path)

    def test_unsupported_maxval(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(NetpbmError, match="maxval"):
            read_pgm(path)


class TestQuantization:
    def test_to_u8_rounds_half_to_even_boundaries(self):
        # np.rint ties to even; pin the exact mapping so files are stable.
        vals = np.array([0.0, 0.0019, 0.002, 1.0, 0.999])
        out = to_u8(vals.reshape(1, -1)[None])
        npt.assert_array_equal(out.ravel(), [0, 0, 1, 255, 255])

    def test_to_u8_clips(self):
        out = to_u8(np.array([[-0.5, 1.5]]))
        npt.assert_array_equal(out, [[0, 255]])
