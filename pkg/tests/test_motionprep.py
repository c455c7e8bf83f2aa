import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prismsurv import motionprep as mp
from prismsurv import synthgen as sg


def _texture(sy=0.0, sx=0.0, H=96, W=96):
    y, x = np.mgrid[0:H, 0:W].astype(float)
    y, x = y - sy, x - sx
    return (0.5 + 0.15 * np.sin(y / 3.1) + 0.15 * np.cos(x / 2.7)
            + 0.1 * np.sin((x + y) / 4.3) + 0.1 * np.cos((x - 2 * y) / 5.9))


def _blob(cy, cx, s=6.0, H=96, W=96):
    y, x = np.mgrid[0:H, 0:W].astype(float)
    return np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))


@settings(max_examples=10, deadline=None)
@given(arrays(np.float64, (24, 24), elements=st.floats(0, 1)))
def test_identical_frames_zero_flow(img):
    res = mp.farneback_flow(img, img)
    assert np.all(res.flow == 0.0)


def test_identical_textured_frames_zero_flow_full_path():
    # different objects with identical content: the estimator itself must return 0
    a = _texture()
    res = mp.farneback_flow(a, a.copy() + 0.0)
    assert np.abs(res.flow).max() == 0.0


def test_planted_translation():
    flow = mp.farneback_flow(_texture(), _texture(2.0, 0.0)).flow
    inner = flow[10:-10, 10:-10].reshape(-1, 2).mean(axis=0)
    assert abs(inner[0] - 2.0) < 0.25 and abs(inner[1]) < 0.25


def test_planted_translation_other_axis_and_larger():
    flow = mp.farneback_flow(_texture(), _texture(5.0, 3.0)).flow
    inner = flow[15:-15, 15:-15].reshape(-1, 2).mean(axis=0)
    np.testing.assert_allclose(inner, [5.0, 3.0], atol=0.25)


def test_blob_motion_at_centre():
    flow = mp.farneback_flow(_blob(48, 48), _blob(49, 49)).flow
    np.testing.assert_allclose(flow[48, 48], [1.0, 1.0], atol=0.3)


def test_constant_frames_flagged():
    res = mp.farneback_flow(np.full((32, 32), 0.3), np.full((32, 32), 0.3))
    assert res.low_texture and np.all(res.flow == 0)


def test_affine_intensity_equivariance():
    st_ = sg.generate_phantom(sg.PhantomSpec(D=1, T=4, H=96, W=96, noise=0.02), seed=2)
    a, b = st_.sax[0, 0].astype(float), st_.sax[0, 1].astype(float)
    f1 = mp.farneback_flow(a, b).flow
    f2 = mp.farneback_flow(2.5 * a + 0.7, 2.5 * b + 0.7).flow
    assert np.abs(f1 - f2).mean() < 0.05


def test_flow_magnitude_capped():
    params = mp.FlowParams(max_disp=1.0)
    flow = mp.farneback_flow(_texture(), _texture(4.0, 0.0), params).flow
    assert np.hypot(flow[..., 0], flow[..., 1]).max() <= 1.0 + 1e-12


def test_flow_rejects_bad_input():
    with pytest.raises(ValueError):
        mp.farneback_flow(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        mp.farneback_flow(np.full((8, 8), np.nan), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        mp.FlowParams(levels=0)


def test_centroid_single_moving_blob():
    frames = np.stack([_blob(30 + 1.5 * np.sin(t), 60 + 1.5 * np.cos(t), s=4.0) for t in range(8)])
    flows = mp.flow_sequence(frames)
    (cy, cx), flag = mp.motion_centroid(flows)
    assert flag is None
    assert np.hypot(cy - 30, cx - 60) < 3.0


def test_centroid_symmetric_motion():
    y, x = np.mgrid[0:96, 0:96].astype(float)
    r = np.hypot(y - 47.5, x - 47.5)
    frames = np.stack([np.clip(rad - r + 0.5, 0, 1) * 0.8 + 0.1 for rad in (14, 16, 18, 16, 14)])
    (cy, cx), _ = mp.motion_centroid(mp.flow_sequence(frames))
    assert abs(cy - 47.5) <= 1.0 and abs(cx - 47.5) <= 1.0


def test_centroid_no_motion():
    c, flag = mp.motion_centroid(np.zeros((3, 40, 50, 2)))
    assert c == (19.5, 24.5) and flag == "no-motion"


def test_centroid_tracks_phantom_offset():
    spec = sg.PhantomSpec(D=2, T=12, H=112, W=112, ef=0.5, noise=0.02, center_offset=(-7.0, -7.0))
    st_ = sg.generate_phantom(spec, seed=3)
    (cy, cx), _ = mp.motion_centroid(mp.flow_sequence(st_.sax[1]))
    assert np.hypot(cy - spec.center[0], cx - spec.center[1]) < 8.0


def _study(H, W, D=2, T=3):
    rng = np.random.default_rng(0)
    sax = rng.random((D, T, H, W)).astype(np.float32)
    lax = {v: rng.random((T, H, W)).astype(np.float32) for v in sg.LAX_VIEWS}
    return sg.CineStudy(sax=sax, lax=lax, phase_labels=["a"] * T)


def test_crop_identity_on_96():
    s = _study(96, 96)
    out = mp.roi_crop(s, (40.0, 70.0))
    assert out.sax.tobytes() == s.sax.tobytes()


def test_crop_window_arithmetic():
    assert mp.crop_window(128, 64) == (16, 112)
    assert mp.crop_window(128, 5) == (0, 96)
    assert mp.crop_window(128, 127) == (32, 128)
    s = _study(128, 128, D=3, T=4)
    out = mp.roi_crop(s, (64, 64))
    assert out.sax.shape == (3, 4, 96, 96)
    np.testing.assert_array_equal(out.sax, s.sax[:, :, 16:112, 16:112])
    assert all(v.shape == (4, 96, 96) for v in out.lax.values())


def test_crop_errors():
    with pytest.raises(ValueError):
        mp.roi_crop(_study(80, 128), (40, 64))
    with pytest.raises(ValueError):
        mp.roi_crop(_study(128, 128), (200, 64))


def test_prepare_cohort_writes_crops_and_summary(tmp_path):
    spec = sg.CohortSpec(n=8, seed=1, grid=(2, 6, 104, 104), max_offset=4.0)
    sg.generate_cohort(spec, out_dir=tmp_path / "raw")
    mp.prepare_cohort(tmp_path / "raw", tmp_path / "prep")
    coh = sg.load_cohort(tmp_path / "prep")
    assert coh.studies[0].sax.shape == (2, 6, 96, 96)
    assert "roi" in coh.studies[0].meta
    lines = (tmp_path / "prep" / "flow_summary.csv").read_text().splitlines()
    assert lines[0] == "subject,frame,mean_abs_flow"
    assert len(lines) == 1 + 8 * 5


def test_matches_opencv_on_translation():
    cv2 = pytest.importorskip("cv2")
    a, b = _texture(), _texture(1.5, -1.0)
    ref = cv2.calcOpticalFlowFarneback(np.uint8(a * 200), np.uint8(b * 200), None,
                                       0.5, 3, 15, 3, 7, 1.5, 0)
    ours = mp.farneback_flow(a, b).flow
    inner = (slice(15, -15), slice(15, -15))
    ref_mean = ref[inner].reshape(-1, 2).mean(axis=0)[::-1]   # opencv stores (dx, dy)
    np.testing.assert_allclose(ours[inner].reshape(-1, 2).mean(axis=0), ref_mean, atol=0.1)
