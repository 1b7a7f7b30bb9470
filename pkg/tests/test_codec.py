import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pixocr.codec import (
    BACKGROUND,
    REAL,
    TAMPERED,
    ColorMap,
    TaskId,
    decode,
    decode_removal,
    decode_segmentation,
    decode_tamper,
    decoded_to_png_array,
    encode_target,
    task_names,
    to_uint8,
)


def test_task_ids_stable():
    assert [int(t) for t in TaskId] == [0, 1, 2]
    assert task_names() == ["removal", "segmentation", "tamper"]
    assert TaskId.parse("Segmentation") is TaskId.SEGMENTATION
    assert TaskId.parse(2) is TaskId.TAMPER
    with pytest.raises(ValueError):
        TaskId.parse("detection")
    with pytest.raises(ValueError):
        TaskId.parse(3)


def test_colormap_defaults_and_validation():
    c = ColorMap()
    assert c.seg_fg == (255, 255, 255) and c.seg_bg == (0, 0, 0)
    assert (c.tamper, c.real, c.background) == ((255, 0, 0), (0, 255, 0), (0, 0, 255))
    assert c.seg_threshold == 0.4
    with pytest.raises(ValueError):
        ColorMap(real=(255, 0, 0))
    with pytest.raises(ValueError):
        ColorMap(seg_threshold=1.0)


def test_encode_segmentation_all_ones():
    out = encode_target("segmentation", np.ones((3, 4), dtype=np.uint8))
    assert out.dtype == np.uint8 and (out == 255).all()


def test_encode_tamper_single_pixel():
    label = np.full((3, 3), BACKGROUND)
    label[1, 2] = TAMPERED
    out = encode_target(TaskId.TAMPER, label)
    assert tuple(out[1, 2]) == (255, 0, 0)
    assert tuple(out[0, 0]) == (0, 0, 255)


def test_encode_removal_passthrough():
    img = np.random.default_rng(0).integers(0, 256, (5, 6, 3), dtype=np.uint8)
    out = encode_target(TaskId.REMOVAL, img)
    assert np.array_equal(out, img) and out is not img


def test_encode_rejects_bad_labels():
    with pytest.raises(ValueError, match="outside"):
        encode_target(TaskId.TAMPER, np.array([[0, 3]]))
    with pytest.raises(ValueError, match="binary"):
        encode_target(TaskId.SEGMENTATION, np.array([[0, 2]]))


def test_decode_segmentation_examples():
    px = np.array([[[1, 1, 1], [0, 0, 0], [0.5, 0.3, 0.3], [0.5, 0.4, 0.4], [0.41, 0.41, 0.41]]])
    assert decode_segmentation(px).tolist() == [[1, 0, 0, 1, 1]]
    # exactly at the threshold is background (strict comparison)
    assert decode_segmentation(np.full((1, 1, 3), 0.4)).item() == 0


def test_decode_tamper_examples():
    px = np.array([[[0.9, 0.1, 0.2], [0.2, 0.2, 0.6], [0.1, 0.7, 0.3]]])
    assert decode_tamper(px).tolist() == [[TAMPERED, BACKGROUND, REAL]]


def test_decode_tamper_tie_order():
    px = np.array([[[0.5, 0.5, 0.5], [0.1, 0.6, 0.6], [0.7, 0.2, 0.7]]])
    assert decode_tamper(px).tolist() == [[TAMPERED, REAL, TAMPERED]]


def test_decode_removal_clamps():
    px = np.array([[[0.3, 1.3, -0.2]]])
    assert decode_removal(px).tolist() == [[[0.3, 1.0, 0.0]]]


@settings(max_examples=50)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
def test_segmentation_roundtrip(mask):
    enc = encode_target(TaskId.SEGMENTATION, mask)
    assert np.array_equal(decode_segmentation(enc / 255.0), mask)


@settings(max_examples=50)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 2)))
def test_tamper_roundtrip(label):
    enc = encode_target(TaskId.TAMPER, label)
    assert np.array_equal(decode_tamper(enc / 255.0), label)


@settings(max_examples=50)
@given(arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)), st.floats(0.01, 100))
def test_tamper_scaling_invariance(pred, s):
    # only pixels whose maximum is unique (with a margin) are tie-free
    top2 = np.sort(pred, axis=-1)[..., -2:]
    ok = top2[..., 1] - top2[..., 0] > 1e-6
    assert np.array_equal(decode_tamper(pred * s)[ok], decode_tamper(pred)[ok])


@settings(max_examples=50)
@given(arrays(np.float64, (5, 5, 3), elements=st.floats(-0.5, 1.5)),
       arrays(np.float64, (5, 5, 3), elements=st.floats(0, 1)))
def test_segmentation_monotone(pred, bump):
    before = decode_segmentation(pred)
    after = decode_segmentation(pred + bump)
    assert (after >= before).all()


def test_decode_dispatch_and_png():
    pred = np.array([[[0.9, 0.95, 0.9], [0.1, 0.0, 0.8]]])
    seg = decode("segmentation", pred)
    assert decoded_to_png_array("segmentation", seg).tolist() == [[255, 0]]
    tam = decode("tamper", pred)
    assert decoded_to_png_array("tamper", tam).tolist() == [[REAL, BACKGROUND]]
    rem = decoded_to_png_array("removal", decode("removal", pred))
    assert rem.dtype == np.uint8 and rem.shape == (1, 2, 3)


def test_to_uint8_rounding():
    assert to_uint8(np.array([0.0, 0.5 / 255, 1.5 / 255, 1.2])).tolist() == [0, 0, 2, 255]
