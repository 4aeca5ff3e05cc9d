import numpy as np
import pytest
from PIL import Image

from hatsr.errors import FormatError, UsageError
from hatsr.io import (
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_image, save_checkpoint, save_image, to_uint8,
)
from hatsr.model import HAT
from hatsr.train import AdamState

from conftest import tiny_config


@pytest.mark.parametrize("ext", [".png", ".ppm"])
def test_image_round_trip_is_bitwise(tmp_path, ext):
    q = np.random.default_rng(0).integers(0, 256, (3, 9, 13), dtype=np.uint8)
    p = str(tmp_path / f"a{ext}")
    save_image(q / 255.0, p)
    back = load_image(p)
    assert back.shape == (3, 9, 13)
    np.testing.assert_array_equal(to_uint8(back), q)
    save_image(back, p)
    np.testing.assert_array_equal(load_image(p), back)


def test_grayscale_is_replicated(tmp_path):
    g = np.random.default_rng(1).integers(0, 256, (5, 6), dtype=np.uint8)
    p = str(tmp_path / "g.png")
    Image.fromarray(g, "L").save(p)
    img = load_image(p)
    assert img.shape == (3, 5, 6)
    for c in range(3):
        np.testing.assert_array_equal(img[c], g / 255.0)


def test_save_rounds_to_nearest(tmp_path):
    p = str(tmp_path / "r.png")
    save_image(np.array([[0.5 / 255, 1.49 / 255, 2.51 / 255]]), p)
    np.testing.assert_array_equal(to_uint8(load_image(p))[0], [[0, 1, 3]])


def test_ppm_maxval_65535_is_clean_error(tmp_path):
    p = tmp_path / "deep.ppm"
    p.write_bytes(b"P6\n2 2\n65535\n" + bytes(24))
    with pytest.raises(UsageError, match="deep.ppm"):
        load_image(str(p))


def test_ppm_with_comment_parses(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([10, 20, 30]))
    np.testing.assert_array_equal(to_uint8(load_image(str(p)))[:, 0, 0], [10, 20, 30])


def test_sixteen_bit_png_is_clean_error(tmp_path):
    p = str(tmp_path / "deep.png")
    Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(p)
    with pytest.raises(UsageError, match="deep.png"):
        load_image(p)


def test_unknown_extension_and_missing_file(tmp_path):
    with pytest.raises(UsageError):
        save_image(np.zeros((3, 2, 2)), str(tmp_path / "a.jpg"))
    with pytest.raises(UsageError):
        load_image(str(tmp_path / "missing.png"))


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_strict_round_trip_is_bitwise(tmp_path):
    m = HAT(tiny_config(), seed=0)
    p = str(tmp_path / "m.ckpt")
    save_checkpoint(m.params, p)
    other = HAT(tiny_config(), seed=5)
    back = load_checkpoint(p, strict=True, into=other.params)
    assert back.report.skipped == [] and back.report.unused == []
    for k, t in m.params.items():
        assert other.params[k].data.tobytes() == t.data.tobytes()
    fresh = load_checkpoint(p)
    assert list(fresh) == list(m.params)


def test_encoding_layout_is_little_endian():
    raw = encode_checkpoint({"w": np.array([[1.0, 2.0]])})
    assert raw[:4] == b"HATC"
    assert raw[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert raw[12:16] == (1).to_bytes(4, "little") and raw[16:17] == b"w"
    assert raw[17:21] == (2).to_bytes(4, "little")
    assert raw[21:29] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert raw[29:] == np.array([1.0, 2.0], dtype="<f4").tobytes()


def test_adam_state_travels_with_checkpoint(tmp_path):
    m = HAT(tiny_config(), seed=0)
    st = AdamState(step=7)
    for k, t in m.params.items():
        st.m[k] = np.full(t.shape, 0.25, np.float32)
        st.v[k] = np.full(t.shape, 0.5, np.float32)
    p = str(tmp_path / "a.ckpt")
    save_checkpoint(m.params, p, st)
    back = load_checkpoint(p, into=HAT(tiny_config(), seed=1).params)
    assert back.adam.step == 7 and set(back.adam.m) == set(m.params)


def test_x2_into_x4_non_strict_reports_upsampler(tmp_path):
    src = HAT(tiny_config(scale=2), seed=0)
    p = str(tmp_path / "x2.ckpt")
    save_checkpoint(src.params, p)
    dst = HAT(tiny_config(scale=4), seed=1)
    before = {k: t.data.copy() for k, t in dst.params.items()}
    with pytest.raises(FormatError, match="upsample"):
        load_checkpoint(p, strict=True, into=dst.params)
    for k, t in dst.params.items():
        assert np.array_equal(t.data, before[k])  # rejected load leaves the target untouched
    tree = load_checkpoint(p, strict=False, into=dst.params)
    expected_skipped = set(dst.params) - set(src.params)
    assert set(tree.report.skipped) == expected_skipped
    assert set(tree.report.unused) == set(src.params) - set(dst.params)
    assert expected_skipped and all(k.startswith("upsample.x4.") for k in expected_skipped)
    for k in tree.report.loaded:
        assert np.array_equal(dst.params[k].data, src.params[k].data)
    for k in expected_skipped:
        assert np.array_equal(dst.params[k].data, before[k])


def test_strict_error_lists_at_most_ten(tmp_path):
    p = str(tmp_path / "x.ckpt")
    save_checkpoint(HAT(tiny_config(embed_dim=12, num_heads=3, cab_beta=3, ca_reduction=3), seed=0).params, p)
    with pytest.raises(FormatError) as ei:
        load_checkpoint(p, strict=True, into=HAT(tiny_config(), seed=0).params)
    listed = str(ei.value).split(": ", 2)[-1].split("; ")
    assert len(listed) == 10


@pytest.mark.parametrize("cut", [3, 11, 20, -1])
def test_truncated_file_is_format_error_without_partial_state(tmp_path, cut):
    m = HAT(tiny_config(), seed=0)
    p = tmp_path / "t.ckpt"
    save_checkpoint(m.params, str(p))
    raw = p.read_bytes()
    p.write_bytes(raw[:cut])
    target = HAT(tiny_config(), seed=2)
    before = {k: t.data.copy() for k, t in target.params.items()}
    with pytest.raises(FormatError):
        load_checkpoint(str(p), into=target.params)
    assert all(np.array_equal(t.data, before[k]) for k, t in target.params.items())


def test_bad_magic_version_and_trailing_bytes():
    raw = encode_checkpoint({"a": np.zeros(2)})
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(raw + b"\0")
