import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from tubeanomaly.tubes import (
    CLIP_LENGTH,
    BoundingBox,
    Tube,
    VideoClip,
    crop_resize,
    extract_flow_tube,
    extract_tube,
    full_frame_tube,
    scale_box,
    scale_tube,
    static_tube,
    translate_box,
)


def _clip(rng, h=12, w=14):
    return VideoClip(rng.random((CLIP_LENGTH, h, w, 3)))


@st.composite
def boxes_in(draw, h=40, w=50):
    x0 = draw(st.floats(0, w - 2))
    y0 = draw(st.floats(0, h - 2))
    x1 = draw(st.floats(x0 + 1, w))
    y1 = draw(st.floats(y0 + 1, h))
    return BoundingBox(x0, y0, x1, y1)


# ---------------------------------------------------------------- types


def test_box_invariants():
    with pytest.raises(ValueError):
        BoundingBox(3, 0, 3, 5)
    with pytest.raises(ValueError):
        BoundingBox(0, 5, 4, 1)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, np.nan, 1)
    b = BoundingBox(1, 2, 5, 10)
    assert (b.width, b.height, b.center) == (4, 8, (3.0, 6.0))


def test_tube_needs_sixteen_boxes():
    with pytest.raises(ValueError):
        Tube((BoundingBox(0, 0, 1, 1),) * 15)
    t = static_tube(BoundingBox(0, 0, 4, 4))
    assert Tube.from_array(t.as_array()) == t


def test_tube_validate_against_frame():
    static_tube(BoundingBox(0, 0, 10, 8)).validate((8, 10))
    with pytest.raises(ValueError):
        static_tube(BoundingBox(0, 0, 11, 8)).validate((8, 10))


def test_clip_shape_checked():
    with pytest.raises(ValueError):
        VideoClip(np.zeros((15, 4, 4, 3)))
    with pytest.raises(ValueError):
        VideoClip(np.zeros((16, 4, 4)))


def test_full_frame_tube_examples():
    t = full_frame_tube((224, 224))
    assert len(t.boxes) == 16 and all(b.as_tuple() == (0, 0, 224, 224) for b in t.boxes)
    assert full_frame_tube((2, 2)).boxes[0].as_tuple() == (0, 0, 2, 2)
    t.validate((224, 224))
    with pytest.raises(ValueError):
        full_frame_tube((0, 3))


# ---------------------------------------------------------------- crop_resize


def test_crop_resize_hand_bilinear():
    frame = np.array([[0.0, 2.0], [4.0, 6.0]])
    out = crop_resize(frame, BoundingBox(0, 0, 2, 2), (3, 3))
    np.testing.assert_allclose(out, [[0, 1, 2], [2, 3, 4], [4, 5, 6]], rtol=0, atol=1e-15)


def test_crop_resize_full_frame_identity():
    rng = np.random.default_rng(0)
    img = rng.random((9, 13, 3))
    assert np.array_equal(crop_resize(img, BoundingBox(0, 0, 13, 9), (9, 13)), img)


@given(boxes_in(), st.integers(1, 9), st.integers(1, 9), st.floats(0, 1))
def test_crop_resize_constant_frame(box, oh, ow, c):
    out = crop_resize(np.full((40, 50, 3), c), box, (oh, ow))
    assert out.shape == (oh, ow, 3)
    np.testing.assert_allclose(out, c, rtol=0, atol=1e-12)


@given(boxes_in(), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_crop_resize_convexity(box, oh, ow, seed):
    img = np.random.default_rng(seed).random((40, 50))
    out = crop_resize(img, box, (oh, ow))
    # region of pixels touched by the bilinear stencil
    x0, y0 = int(np.floor(box.x_min)), int(np.floor(box.y_min))
    x1, y1 = min(int(np.ceil(box.x_max)), 50), min(int(np.ceil(box.y_max)), 40)
    region = img[y0:y1, x0:x1]
    assert out.min() >= region.min() - 1e-12 and out.max() <= region.max() + 1e-12


def test_crop_resize_single_pixel_samples_center():
    img = np.arange(25.0).reshape(5, 5)
    # center of the box (0,0)-(5,5) in pixel-center coordinates is pixel (2, 2)
    assert crop_resize(img, BoundingBox(0, 0, 5, 5), (1, 1))[0, 0] == pytest.approx(12.0)


def test_crop_resize_rejects_box_outside_frame():
    with pytest.raises(ValueError):
        crop_resize(np.zeros((4, 4)), BoundingBox(5, 5, 8, 8), (2, 2))


# ---------------------------------------------------------------- extract_tube


def test_extract_tube_full_frame_bit_identical():
    rng = np.random.default_rng(1)
    clip = _clip(rng)
    out = extract_tube(clip, full_frame_tube(clip.dims), clip.dims)
    assert np.array_equal(out.frames, clip.frames)
    assert out.frames.shape == clip.frames.shape


def test_extract_tube_static_clip_identical_frames():
    rng = np.random.default_rng(2)
    frame = rng.random((20, 20, 3))
    clip = VideoClip(np.repeat(frame[None], CLIP_LENGTH, axis=0))
    out = extract_tube(clip, static_tube(BoundingBox(3.5, 2, 15, 17.25)), (8, 8)).frames
    assert all(np.array_equal(out[0], out[t]) for t in range(CLIP_LENGTH))


def test_extract_tube_tracks_moving_sprite():
    h = w = 48
    frames = np.zeros((CLIP_LENGTH, h, w, 3))
    boxes = []
    for t in range(CLIP_LENGTH):
        cx, cy = 10 + 1.7 * t, 30 - 1.1 * t
        ys, xs = np.mgrid[0:h, 0:w] + 0.5
        frames[t][(np.abs(xs - cx) < 3) & (np.abs(ys - cy) < 3)] = 1.0
        boxes.append(BoundingBox(cx - 8, cy - 8, cx + 8, cy + 8))
    out = extract_tube(VideoClip(frames, "sprite"), Tube(tuple(boxes)), (24, 24)).frames
    for t in range(CLIP_LENGTH):
        m = out[t, ..., 0]
        yy, xx = np.mgrid[0:24, 0:24]
        centroid = ((m * xx).sum() / m.sum(), (m * yy).sum() / m.sum())
        assert abs(centroid[0] - 11.5) < 1.0 and abs(centroid[1] - 11.5) < 1.0


def test_extract_flow_tube_rescales_displacements():
    flows = np.zeros((CLIP_LENGTH, 20, 20, 2))
    flows[..., 0] = 2.0
    flows[..., 1] = -1.0
    # box 10 px wide into 5 output columns: 2 px becomes 2 * 4/9 with align-corners spacing
    out = extract_flow_tube(flows, static_tube(BoundingBox(0, 0, 10, 20)), (20, 5))
    np.testing.assert_allclose(out[..., 0], 2.0 * 4 / 9)
    np.testing.assert_allclose(out[..., 1], -1.0)


# ---------------------------------------------------------------- perturbations


def test_scale_box_examples():
    b = BoundingBox(40, 40, 80, 80)
    assert scale_box(b, 1.0, (224, 224)) == b
    assert scale_box(b, 1.5, (224, 224)).as_tuple() == (30, 30, 90, 90)
    assert scale_box(b, 50.0, (224, 224)).as_tuple() == (0, 0, 224, 224)
    with pytest.raises(ValueError):
        scale_box(b, 0.0, (224, 224))


def test_scale_one_is_exact_for_fractional_boxes():
    b = BoundingBox(0.1, 0.7, 3.3, 9.9)
    assert scale_box(b, 1.0, (20, 20)) == b


@given(boxes_in(), st.floats(0.2, 3.0))
def test_scale_round_trip(box, f):
    dims = (40, 50)
    cx, cy = box.center
    hw, hh = box.width * f / 2, box.height * f / 2
    assume(cx - hw >= 0 and cy - hh >= 0 and cx + hw <= 50 and cy + hh <= 40)
    back = scale_box(scale_box(box, f, dims), 1.0 / f, dims)
    np.testing.assert_allclose(back.as_tuple(), box.as_tuple(), rtol=0, atol=1e-9)


@given(boxes_in(), st.floats(0.05, 8.0), st.floats(-30, 30), st.floats(-30, 30))
def test_perturbations_keep_box_invariants(box, f, dx, dy):
    dims = (40, 50)
    s = scale_box(box, f, dims)
    assert s.within(dims)
    try:
        t = translate_box(box, dx, dy, dims)
    except ValueError:
        # only fully off-frame shifts may be rejected
        assert box.x_max - dx <= 0 or box.y_max - dy <= 0 or box.x_min - dx >= 50 or box.y_min - dy >= 40
    else:
        assert t.within(dims) and t.width > 0 and t.height > 0


def test_translate_examples():
    b = BoundingBox(100, 100, 150, 150)
    assert translate_box(b, 0, 0, (224, 224)) == b
    assert translate_box(b, 20, 20, (224, 224)).as_tuple() == (80, 80, 130, 130)
    assert translate_box(BoundingBox(10, 10, 50, 50), 20, 20, (224, 224)).as_tuple() == (0, 0, 30, 30)
    with pytest.raises(ValueError):
        translate_box(BoundingBox(10, 10, 50, 50), 60, 60, (224, 224))


def test_scale_tube_applies_per_box():
    boxes = tuple(BoundingBox(10 + t, 10, 20 + t, 20) for t in range(CLIP_LENGTH))
    out = scale_tube(Tube(boxes), 0.5, (40, 50))
    assert all(o.width == pytest.approx(5.0) and o.center == b.center for o, b in zip(out.boxes, boxes))
