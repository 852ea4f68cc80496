import numpy as np
import pytest

from vsx import models
from vsx.tensor import Tensor, no_grad, precision


@pytest.fixture(scope="module")
def nets():
    return {k: models.build(k, 4, 8, seed=0) for k in models.KINDS}


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32))


@pytest.mark.parametrize("kind", models.KINDS)
def test_shape_contract(nets, kind):
    with no_grad():
        out = nets[kind](rand((1, 4, 16, 16, 16)))
    assert out.shape == (1, 3, 16, 16, 16)
    assert np.all((out.data > 0) & (out.data < 1))


@pytest.mark.parametrize("dims", [(16, 32, 16), (32, 16, 48)])
def test_output_dims_follow_input(nets, dims):
    with no_grad():
        assert nets["resunet"](rand((1, 4) + dims)).shape == (1, 3) + dims


def test_same_seed_same_parameters():
    a, b = models.build("attunet", seed=3), models.build("attunet", seed=3)
    for path, t in a.params.items():
        np.testing.assert_array_equal(t.data, b.params[path].data)
    c = models.build("attunet", seed=4)
    assert not np.array_equal(a.params["enc1.conv1.kernel"].data, c.params["enc1.conv1.kernel"].data)


def test_init_conventions(nets):
    p = nets["unet"].params
    assert not p["enc2.conv1.bias"].data.any()
    np.testing.assert_array_equal(p["enc2.gn1.gamma"].data, 1.0)
    bound = np.sqrt(6.0 / (4 * 27))
    k = p["enc1.conv1.kernel"].data
    assert np.abs(k).max() <= bound and np.abs(k).max() > 0.9 * bound


def test_widths(nets):
    m = nets["unet"]
    assert m.widths == (8, 16, 32, 64) and m.bridge_width == 128
    assert m.params["dec4.up.kernel"].shape == (128, 64, 2, 2, 2)


def test_resunet_has_more_parameters(nets):
    counts = {k: m.params.count() for k, m in nets.items()}
    assert counts["resunet"] > counts["unet"]
    # closed form: every encoder, bridge and decoder block gains one 1x1x1 projection
    widths, bridge = (8, 16, 32, 64), 128
    cins = [4, 8, 16, 32]
    extra = sum(ci * w + w for ci, w in zip(cins, widths)) + (64 * 128 + 128)
    extra += sum((2 * w) * w + w for w in widths)
    assert counts["resunet"] - counts["unet"] == extra


def test_zero_input_gives_half(nets):
    with no_grad():
        out = nets["unet"](Tensor(np.zeros((1, 4, 16, 16, 16), np.float32)))
    np.testing.assert_array_equal(out.data, 0.5)


def test_attunet_records(nets):
    m = nets["attunet"]
    with no_grad():
        models.forward(m, rand((2, 4, 16, 16, 16)))
    kinds = [r.kind for r in m.records]
    assert kinds.count("gate") == 4
    assert kinds.count("cbam-channel") + kinds.count("cbam-spatial") == 8
    top = m.captures["skip_top.attention"]
    assert top.site == 1 and top.weights.shape == (2, 16, 16, 16)
    assert m.captures["final_conv"].shape == (2, 8, 16, 16, 16)


def test_indivisible_dims_name_axis(nets):
    with pytest.raises(ValueError, match="axis H"):
        nets["unet"](rand((1, 4, 16, 24, 16)))


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown model kind"):
        models.build("vnet")


def test_threshold_is_strict():
    np.testing.assert_array_equal(models.binarize(np.full((1, 3, 2, 2, 2), 0.5)), 0)
    np.testing.assert_array_equal(models.binarize(np.array([0.4, 0.6])), [0, 1])


def test_nesting_postprocess():
    mask = np.zeros((1, 3, 1, 1, 4), np.uint8)
    mask[0, 0, 0, 0] = [1, 1, 0, 0]
    mask[0, 1, 0, 0] = [1, 0, 1, 0]
    mask[0, 2, 0, 0] = [1, 1, 1, 1]
    fixed = models.enforce_nesting(mask)
    np.testing.assert_array_equal(fixed[0, :, 0, 0], [[1, 1, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0]])
    assert np.all(fixed[:, 0] >= fixed[:, 1]) and np.all(fixed[:, 1] >= fixed[:, 2])


def test_predict_mask(nets):
    pred = models.predict(nets["unet"], rand((1, 4, 16, 16, 16)))
    np.testing.assert_array_equal(pred.binary_mask, pred.probabilities.data > 0.5)
    nested = models.predict(nets["unet"], rand((1, 4, 16, 16, 16)), nested=True).binary_mask
    assert np.all(nested[:, 0] >= nested[:, 1])


def test_open_attention_matches_unet():
    att, unet = models.build("attunet", seed=1), models.build("unet", seed=2)
    models.open_attention(att)
    assert models.copy_shared(att, unet) == len(unet.params)
    x = rand((1, 4, 16, 16, 16), 5)
    with no_grad():
        a, u = att(x), unet(x)
    assert np.abs(a.data - u.data).max() < 1e-5
    assert all(np.all(r.weights == 1.0) for r in att.records)


def test_checkpoint_roundtrip(tmp_path, nets):
    m = nets["attunet"]
    path = tmp_path / "m.vsxc"
    models.save_checkpoint(m, path, {"epoch": 3, "note": "x"})
    back, meta = models.load_checkpoint(path)
    assert meta == {"epoch": 3, "note": "x"} and back.kind == "attunet"
    for p, t in m.params.items():
        assert back.params[p].data.tobytes() == t.data.tobytes()
    models.save_checkpoint(back, tmp_path / "again.vsxc", meta)
    assert (tmp_path / "again.vsxc").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.vsxc"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="checkpoint"):
        models.load_checkpoint(bad)


def test_forward_deterministic(nets):
    x = rand((1, 4, 16, 16, 16), 9)
    with no_grad():
        a, b = nets["resunet"](x), nets["resunet"](x)
    assert a.data.tobytes() == b.data.tobytes()


@pytest.mark.parametrize("kind", models.KINDS)
def test_one_phantom_overfits(kind):
    """Single fixed phantom, 16^3: training dice climbs past 0.95 well inside 200 epochs."""
    from vsx import data, metrics
    from vsx.optim import Adam

    case = data.make_phantom((16, 16, 16), seed=11)
    x = Tensor(data.normalize_intensities(case.image)[None].astype(np.float32))
    y = case.mask[None].astype(np.float32)
    m = models.build(kind, 4, 8, seed=0)
    opt = Adam(m.parameters(), lr=2e-3)
    for p in m.parameters():
        p.requires_grad = True
    best = 0.0
    for epoch in range(200):
        probs = models.forward(m, x).probabilities
        loss = metrics.bce_dice_loss(probs, y, per_channel=True)
        dice = np.mean([metrics.dice_score(probs.data[0, c] > 0.5, y[0, c]) for c in range(3)])
        best = max(best, dice)
        if best > 0.95:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert best > 0.95, (kind, epoch, best)
