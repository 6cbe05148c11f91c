"""Tests for the PTNS tensor format, the synthetic renderer, and dataset IO."""
import struct

import numpy as np
import pytest

from panoseg.data_io import (
    BadMagicError,
    BadVersionError,
    BoxSpec,
    SceneSpec,
    TruncatedFileError,
    UnsupportedDtypeError,
    decode_tensor,
    encode_tensor,
    generate_dataset,
    N_CLASSES,
    palette_color,
    random_scene,
    read_manifest,
    read_sample,
    read_tensor,
    render_equirect,
    write_label_ppm,
    write_sample,
    write_tensor,
)


class TestPTNS:
    def test_header_layout(self):
        blob = encode_tensor(np.zeros((2, 3), dtype=np.float32))
        assert blob[:4] == b"PTNS"
        assert blob[4] == 1          # version
        assert blob[5] == 0          # dtype code f32
        assert blob[6] == 2          # ndim
        assert struct.unpack_from("<II", blob, 7) == (2, 3)
        assert len(blob) == 15 + 2 * 3 * 4

    def test_roundtrip_all_dtypes(self):
        rng = np.random.default_rng(0)
        for arr in [rng.standard_normal((3, 4)).astype(np.float32),
                    rng.integers(0, 2 ** 16, (2, 5)).astype(np.uint16),
                    rng.integers(0, 256, (4,)).astype(np.uint8)]:
            out = decode_tensor(encode_tensor(arr))
            assert out.dtype == arr.dtype and out.shape == arr.shape
            np.testing.assert_array_equal(out, arr)

    def test_file_roundtrip(self, tmp_path):
        path = str(tmp_path / "t.ptns")
        arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        write_tensor(path, arr)
        np.testing.assert_array_equal(read_tensor(path), arr)

    def test_bad_magic(self):
        blob = bytearray(encode_tensor(np.zeros(2, dtype=np.float32)))
        blob[:4] = b"JUNK"
        with pytest.raises(BadMagicError):
            decode_tensor(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(encode_tensor(np.zeros(2, dtype=np.float32)))
        blob[4] = 9
        with pytest.raises(BadVersionError):
            decode_tensor(bytes(blob))

    def test_truncation(self):
        blob = encode_tensor(np.zeros((4, 4), dtype=np.float32))
        for cut in (2, 8, len(blob) - 1):
            with pytest.raises(TruncatedFileError):
                decode_tensor(blob[:cut])

    def test_unsupported_dtype_on_encode_and_decode(self):
        with pytest.raises(UnsupportedDtypeError):
            encode_tensor(np.zeros(2, dtype=np.int32))
        blob = bytearray(encode_tensor(np.zeros(2, dtype=np.float32)))
        blob[5] = 7
        with pytest.raises(UnsupportedDtypeError):
            decode_tensor(bytes(blob))


class TestRenderer:
    def _spec(self, yaw_steps=0, boxes=(), seed=0):
        return SceneSpec(room_half=(3.0, 3.0), room_height=2.6,
                         camera_height=1.5, boxes=tuple(boxes), seed=seed,
                         yaw_steps=yaw_steps)

    def test_output_shapes_and_ranges(self):
        s = render_equirect(self._spec(), 16, 32)
        assert s.rgb.shape == (3, 16, 32) and s.rgb.min() >= 0
        assert s.depth.shape == (16, 32) and (s.depth > 0).all()
        assert s.normals.shape == (3, 16, 32)
        np.testing.assert_allclose(np.linalg.norm(s.normals, axis=0),
                                   np.ones((16, 32)), atol=1e-5)
        assert s.labels.max() < N_CLASSES

    def test_room_surfaces_present(self):
        s = render_equirect(self._spec(), 16, 32)
        assert (s.labels[0] == 2).all()    # ceiling straight up
        assert (s.labels[-1] == 1).all()   # floor straight down
        assert (s.labels == 0).any()       # walls at the horizon

    def test_integer_yaw_is_pixel_exact_roll(self):
        box = BoxSpec(center=(1.0, 0.5, 1.0), size=(0.8, 1.0, 0.8), class_id=4)
        a = render_equirect(self._spec(boxes=[box]), 16, 32)
        b = render_equirect(self._spec(boxes=[box], yaw_steps=5), 16, 32)
        np.testing.assert_array_equal(b.labels, np.roll(a.labels, -5, axis=-1))
        np.testing.assert_allclose(b.depth, np.roll(a.depth, -5, axis=-1),
                                   atol=1e-6)

    def test_box_is_visible(self):
        box = BoxSpec(center=(0.0, 0.3, 1.5), size=(1.0, 1.0, 1.0), class_id=5)
        s = render_equirect(self._spec(boxes=[box]), 16, 32)
        assert (s.labels == 5).any()
        assert (s.instances > 0).any()

    def test_non_square_aspect_rejected(self):
        with pytest.raises(ValueError):
            render_equirect(self._spec(), 16, 20)

    def test_random_scene_straddles_seam_when_forced(self):
        hits = 0
        for seed in range(20):
            spec = random_scene(np.random.default_rng(seed), straddle_p=1.0)
            s = render_equirect(spec, 16, 32)
            obj = s.labels >= 3
            if obj[:, 0].any() or obj[:, -1].any():
                hits += 1
        assert hits >= 15  # most forced scenes really cross the seam


class TestDatasetIO:
    def test_generate_read_roundtrip(self, tmp_path):
        out = str(tmp_path / "ds")
        man = generate_dataset(out, 4, 16, seed=3)
        assert set(man) >= {"classes", "k", "d_t", "splits"}
        assert len(man["splits"]["train"]) == 3
        assert len(man["splits"]["val"]) == 1
        assert man["d_t"] > 0
        s = read_sample(out, man["splits"]["train"][0])
        assert s.rgb.shape == (3, 16, 32)
        assert read_manifest(out)["d_t"] == man["d_t"]

    def test_sample_write_read_identity(self, tmp_path):
        spec = random_scene(np.random.default_rng(1))
        s = render_equirect(spec, 16, 32)
        write_sample(str(tmp_path), s)
        back = read_sample(str(tmp_path), s.id)
        np.testing.assert_array_equal(back.rgb, s.rgb)
        np.testing.assert_array_equal(back.depth, s.depth)
        np.testing.assert_array_equal(back.labels, s.labels)

    def test_missing_sample_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_sample(str(tmp_path), "nope")

    def test_ppm_header(self, tmp_path):
        path = str(tmp_path / "x.ppm")
        write_label_ppm(path, np.zeros((4, 8), dtype=np.int64))
        with open(path, "rb") as f:
            data = f.read()
        assert data.startswith(b"P6\n8 4\n255\n")
        assert len(data) == len(b"P6\n8 4\n255\n") + 4 * 8 * 3

    def test_palette_is_distinct(self):
        colors = {palette_color(c) for c in range(N_CLASSES)}
        assert len(colors) == N_CLASSES
