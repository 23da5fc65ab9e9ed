import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from medovd.encoders import AlignedMockEncoder, EncoderError, MockEncoder, build_encoder, hashed_vector
from medovd.synthetic import ALL_CLASS_NAMES, SHAPE_CLASSES, draw_scene


def test_text_is_deterministic_unit_and_sized():
    enc = MockEncoder(dim=32, seed=1)
    a, b = enc.encode_text("liver"), enc.encode_text("liver")
    assert a.shape == (32,) and np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)


@given(st.text(min_size=1, max_size=12), st.text(min_size=1, max_size=12))
def test_distinct_prompts_differ(p, q):
    enc = MockEncoder(dim=16)
    if p != q:
        assert not np.allclose(enc.encode_text(p), enc.encode_text(q))


def test_empty_prompt_and_degenerate_crop():
    enc = MockEncoder()
    with pytest.raises(EncoderError):
        enc.encode_text("")
    with pytest.raises(EncoderError):
        enc.encode_image(np.zeros((0, 4, 3)))
    with pytest.raises(EncoderError):
        enc.encode_image(np.zeros((4, 4, 4)))


def test_image_matches_formula(rng):
    enc = MockEncoder(dim=24, seed=5, grid=8)
    crop = rng.integers(0, 256, (13, 21, 3)).astype(np.uint8)
    small = np.asarray(Image.fromarray(crop).resize((8, 8), Image.BILINEAR), dtype=np.float64) / 255.0
    proj = np.random.default_rng(5).standard_normal((24, 8 * 8 * 3)) / np.sqrt(8 * 8 * 3)
    want = proj @ (small.reshape(-1) - 0.5)
    np.testing.assert_allclose(enc.encode_image(crop), want / np.linalg.norm(want), atol=1e-12)
    assert enc.encode_image(crop).shape == enc.encode_text("x").shape


def test_grayscale_crop_accepted(rng):
    enc = MockEncoder(dim=8)
    g = rng.integers(0, 256, (6, 6)).astype(np.uint8)
    np.testing.assert_allclose(enc.encode_image(g), enc.encode_image(np.repeat(g[:, :, None], 3, 2)))


def test_hashed_vector_key_separates_seeds():
    assert not np.allclose(hashed_vector("a", 8, 0), hashed_vector("a", 8, 1))


def _class_crops(enc_seed=0, per_class=6):
    rng = np.random.default_rng(enc_seed)
    out = {}
    for sc in SHAPE_CLASSES:
        crops = []
        while len(crops) < per_class:
            img, lab, names = draw_scene(rng, [sc.name])
            if not names:
                continue
            rows, cols = np.nonzero(lab)
            crops.append(img[rows.min():rows.max() + 1, cols.min():cols.max() + 1])
        out[sc.name] = crops
    return out


def test_aligned_mock_contract(encoder):
    crops = _class_crops()
    names = list(crops)
    text = {n: encoder.encode_text(n) for n in names}
    for n in names:
        for c in crops[n]:
            e = encoder.encode_image(c)
            assert e @ text[n] > 0.9
            for m in names:
                if m != n:
                    assert abs(e @ text[m]) < 0.2
    for i, n in enumerate(ALL_CLASS_NAMES):
        for m in ALL_CLASS_NAMES[i + 1:]:
            assert abs(encoder.encode_text(n) @ encoder.encode_text(m)) < 0.2


def test_aligned_mock_background_and_fallback(encoder):
    dark = np.full((10, 10, 3), 50, np.uint8)
    e = encoder.encode_image(dark)
    assert max(abs(e @ encoder.encode_text(n)) for n in ALL_CLASS_NAMES) < 0.2
    np.testing.assert_allclose(encoder.encode_text("not a class"), hashed_vector("not a class", 64, 0))


def test_aligned_mock_validation():
    with pytest.raises(ValueError):
        AlignedMockEncoder(["a", "A"])
    with pytest.raises(ValueError):
        AlignedMockEncoder(["a"], {"b": (1, 2, 3)})
    with pytest.raises(ValueError):
        AlignedMockEncoder([str(i) for i in range(8)], dim=8)


def test_build_encoder():
    assert isinstance(build_encoder("mock", dim=12), MockEncoder)
    assert build_encoder("aligned-mock", dim=12, class_names=["a"]).dim == 12
    with pytest.raises(ValueError):
        build_encoder("clip")
