import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vsx import models, xai
from vsx.tensor import Tensor

finite = st.floats(-5, 5, allow_nan=False, width=64)


@pytest.fixture(scope="module")
def att():
    return models.build("attunet", 4, 8, seed=0)


def volume(seed=0, dims=(16, 16, 16)):
    return np.random.default_rng(seed).normal(size=(4,) + dims).astype(np.float32)


def test_single_map_unit_gradient():
    a = np.random.default_rng(0).normal(size=(1, 3, 3, 3))
    assert xai.gradcam_weights(np.ones_like(a)) == pytest.approx([1.0])
    np.testing.assert_allclose(xai.minmax(xai.gradcam_map(a, np.ones_like(a))), xai.minmax(np.maximum(a[0], 0)))


def test_negative_evidence_is_suppressed():
    a = np.abs(np.random.default_rng(1).normal(size=(2, 2, 2, 2)))
    g = -np.ones_like(a)
    raw = xai.gradcam_map(a, g)
    assert not raw.any()
    assert not xai.minmax(raw).any()


def test_two_map_hand_case():
    a = np.zeros((2, 1, 1, 2))
    a[0, 0, 0] = [1.0, 3.0]
    a[1, 0, 0] = [2.0, -1.0]
    g = np.zeros_like(a)
    g[0, 0, 0] = [0.5, 1.5]  # alpha_0 = 1.0
    g[1, 0, 0] = [-2.0, 1.0]  # alpha_1 = -0.5
    # 1*[1,3] - 0.5*[2,-1] = [0, 3.5]
    np.testing.assert_allclose(xai.gradcam_map(a, g)[0, 0], [0.0, 3.5])
    np.testing.assert_allclose(xai.minmax(xai.gradcam_map(a, g))[0, 0], [0.0, 1.0])


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        xai.gradcam_map(np.zeros((2, 2, 2, 2)), np.zeros((1, 2, 2, 2)))


@given(arrays(np.float64, (2, 2, 2, 3), elements=finite), arrays(np.float64, (2, 2, 2, 3), elements=finite),
       st.floats(0.01, 100))
def test_gradcam_scale_properties(a, g, c):
    raw = xai.gradcam_map(a, g)
    scaled = xai.gradcam_map(c * a, g)
    assert np.all(raw >= 0)
    np.testing.assert_allclose(scaled, c * raw, rtol=1e-9, atol=1e-9)
    norm = xai.minmax(raw)
    assert norm.min() >= 0 and norm.max() <= 1
    np.testing.assert_allclose(xai.minmax(scaled), norm, atol=1e-6)


@given(arrays(np.float64, (3, 4), elements=finite))
def test_minmax_idempotent(g):
    once = xai.minmax(g)
    np.testing.assert_allclose(xai.minmax(once), once, atol=1e-12)


def test_softmax_equal_scores():
    np.testing.assert_allclose(xai.softmax_attention(np.ones((2, 3)), np.array([1.0, 0.0, 2.0])), [0.5, 0.5])


def test_softmax_hand_vectors():
    x = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    q = np.array([0.5, -1.0])
    scores = [0.5, -2.0, -0.5]
    z = sum(math.exp(s) for s in scores)
    np.testing.assert_allclose(xai.softmax_attention(x, q), [math.exp(s) / z for s in scores], rtol=1e-12)


@given(arrays(np.float64, (6, 3), elements=finite), arrays(np.float64, 3, elements=finite))
def test_softmax_sums_to_one(x, q):
    assert abs(xai.softmax_attention(x, q).sum() - 1.0) < 1e-6


def test_forced_half_gate_gives_uniform_map(att):
    att.params["dec1.gate.psi.kernel"].data[...] = 0
    att.params["dec1.gate.psi.bias"].data[...] = 0
    try:
        h = xai.attention_map(att, volume())
    finally:
        fresh = models.build("attunet", 4, 8, seed=0)
        for name in ("dec1.gate.psi.kernel", "dec1.gate.psi.bias"):
            att.params[name].data[...] = fresh.params[name].data
    np.testing.assert_allclose(h.raw, 0.5)
    assert h.grid.shape == (16, 16, 16) and h.source == "attention"


def test_softmax_mode_weights_sum_to_one(att):
    h = xai.attention_map(att, volume(1), mode="softmax")
    assert h.grid.shape == (16, 16, 16)
    assert abs(h.raw.sum() - 1.0) < 1e-6
    assert h.grid.min() >= 0 and h.grid.max() <= 1


def test_attention_contract_errors(att):
    with pytest.raises(ValueError, match="attunet"):
        xai.attention_map(models.build("unet", 4, 8), volume())
    with pytest.raises(ValueError, match="mode"):
        xai.attention_map(att, volume(), mode="dot")


def test_bad_class():
    with pytest.raises(ValueError):
        xai.class_index("NCR")
    with pytest.raises(ValueError):
        xai.class_index(3)
    assert xai.class_index("et") == 2


@pytest.mark.parametrize("kind", models.KINDS)
def test_grad_cam_contract(kind):
    m = models.build(kind, 4, 8, seed=2)
    h = xai.grad_cam(m, volume(2), "WT")
    assert h.grid.shape == (16, 16, 16) and h.target_class == "WT" and h.source == "gradcam"
    assert h.grid.min() >= 0 and h.grid.max() <= 1
    assert np.all(h.raw >= 0)
    assert all(p.grad is None or not p.grad.any() for p in m.parameters())


def test_grad_cam_matches_manual_capture():
    m = models.build("unet", 4, 8, seed=3)
    x = volume(3)
    h = xai.grad_cam(m, x, 1)
    pred = models.forward(m, Tensor(x[None]), capture_grad=True)
    pred.logits[:, 1].sum().backward()
    acts = m.captures["final_conv"]
    np.testing.assert_allclose(h.raw, xai.gradcam_map(acts.data[0], acts.grad[0]), rtol=1e-5, atol=1e-7)
    m.zero_grad()


def test_export_roundtrip_and_slices(tmp_path):
    grid = np.random.default_rng(0).random((4, 5, 6))
    h = xai.Heatmap(grid, "TC", "gradcam")
    paths = xai.export_heatmap(h, tmp_path / "hm.vsxv", slice_axis=1, slices="all")
    assert len(paths) == 1 + 2 * 5
    back = xai.read_heatmap(tmp_path / "hm.vsxv")
    assert back.tobytes() == grid.astype(np.float32).tobytes()
    img = xai.decode_pgm((tmp_path / "hm_axis1_002.pgm").read_bytes())
    np.testing.assert_array_equal(img, xai.levels(grid[:, 2, :]))


def test_zero_heatmap_is_background(tmp_path):
    h = xai.Heatmap(np.zeros((3, 3, 3)), "WT", "gradcam")
    paths = xai.export_heatmap(h, tmp_path / "z.vsxv", slice_axis=0)
    assert not xai.decode_pgm(paths[1].read_bytes()).any()
    ppm = paths[2].read_bytes()
    assert ppm.endswith(bytes(xai.COLORMAP[0]) * 9)


def test_two_voxel_lookup(tmp_path):
    h = xai.Heatmap(np.array([[[0.0, 1.0]]]), "WT", "gradcam")
    paths = xai.export_heatmap(h, tmp_path / "two.vsxv", slice_axis=0)
    np.testing.assert_array_equal(xai.decode_pgm(paths[1].read_bytes()), [[0, 255]])
    assert paths[2].read_bytes().endswith(bytes(xai.COLORMAP[0]) + bytes(xai.COLORMAP[255]))
    assert tuple(xai.COLORMAP[0]) == (0, 0, 96) and tuple(xai.COLORMAP[255]) == (192, 0, 0)


def test_colormap_is_256_levels():
    assert xai.COLORMAP.shape == (256, 3) and xai.COLORMAP.dtype == np.uint8
    np.testing.assert_array_equal(xai.levels([0.5, 0.25, 2.0, -1.0]), [128, 64, 255, 0])


def test_unwritable_path_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        xai.export_heatmap(xai.Heatmap(np.zeros((2, 2, 2)), "WT", "gradcam"), blocker / "sub" / "h.vsxv")
