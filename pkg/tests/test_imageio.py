import numpy as np
import pytest

from nisurf import imageio


def test_ppm_pgm_round_trip(tmp_path, rng):
    rgb = rng.integers(0, 256, (5, 7, 3)) / 255.0
    imageio.write_ppm(tmp_path / "a.ppm", rgb)
    np.testing.assert_allclose(imageio.read_ppm(tmp_path / "a.ppm"), rgb)
    mask = rng.random((6, 4)) > 0.5
    imageio.write_pgm(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(imageio.read_pgm(tmp_path / "m.pgm"), mask)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n4 6\n255\n")


def test_pfm_layout_and_round_trip(tmp_path, rng):
    depth = rng.random((3, 5)).astype(np.float32)
    depth[0, 0] = np.inf
    imageio.write_pfm(tmp_path / "d.pfm", depth)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n5 3\n-1.0\n")
    # rows are stored bottom to top, little endian
    first = np.frombuffer(raw[len(b"Pf\n5 3\n-1.0\n"):], "<f4", count=5)
    np.testing.assert_array_equal(first, depth[-1])
    np.testing.assert_array_equal(imageio.read_pfm(tmp_path / "d.pfm"), depth)
    normals = rng.normal(size=(4, 2, 3)).astype(np.float32)
    imageio.write_pfm(tmp_path / "n.pfm", normals)
    assert (tmp_path / "n.pfm").read_bytes().startswith(b"PF\n")
    np.testing.assert_array_equal(imageio.read_pfm(tmp_path / "n.pfm"), normals)


def test_bad_headers(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(ValueError):
        imageio.read_ppm(tmp_path / "x.ppm")
    with pytest.raises(ValueError):
        imageio.write_pfm(tmp_path / "y.pfm", np.zeros((2, 2, 2)))
