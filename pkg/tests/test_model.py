import math

import numpy as np
import pytest
import torch

from ktl.model import (CheckpointError, EmptyDetectedSet, LandmarkNet, ModelDims, PairBatch, RMSprop,
                       contrastive_loss, detector_loss, extract_keypoints, forward, gradient, load_checkpoint,
                       optimizer_step, render_target, render_targets, sample_descriptor, save_checkpoint,
                       stage2_loss)

from oracles import bilinear_unit, contrastive_reference, rmsprop_scalar

SMALL = ModelDims(16, 16, 8, 8, desc_dim=4, n_landmarks=3, hidden=4)


def test_constant_input_zero_params_constant_map():
    net = LandmarkNet(SMALL)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    det, _ = forward(net, np.zeros((16, 16)))
    assert np.all(det == det.flat[0])


def test_forward_deterministic_and_shapes():
    net = LandmarkNet(ModelDims())
    x = np.random.default_rng(0).random((64, 64)).astype(np.float32)
    d1, f1 = forward(net, x)
    d2, f2 = forward(net, x)
    assert d1.shape == (32, 32) and f1.shape == (32, 32, 32)
    assert np.array_equal(d1, d2) and np.array_equal(f1, f2)
    np.testing.assert_allclose(np.linalg.norm(f1, axis=-1), 1.0, atol=1e-5)


def test_shift_equivariance_interior():
    # stride 2: a 2-pixel input shift is a 1-cell output shift
    net = LandmarkNet(ModelDims())
    x = np.random.default_rng(1).random((64, 64)).astype(np.float32)
    xs = np.roll(x, 2, axis=1)
    _, f = forward(net, x)
    _, fs = forward(net, xs)
    np.testing.assert_allclose(fs[6:-6, 7:-6], f[6:-6, 6:-7], atol=1e-3)


def test_render_target_closed_forms():
    assert np.all(render_target([], 1.0, (8, 8)) == 0)
    t = render_target([[3, 4]], 1.0, (8, 8))
    assert t[4, 3] == 1.0
    assert math.isclose(t[4, 4], math.exp(-0.5), rel_tol=1e-12)
    stack = render_targets([[[1, 1]], []], 1.0, (8, 8))
    assert stack.shape == (2, 8, 8) and stack[1].max() == 0


def test_render_target_midpoint_is_max_not_sum():
    t = render_target([[2, 4], [3, 4]], 1.0, (8, 8))
    for x in range(8):
        ref = max(math.exp(-((x - 2) ** 2) / 2), math.exp(-((x - 3) ** 2) / 2))
        assert math.isclose(t[4, x], ref, rel_tol=1e-12)


def test_detector_loss_values():
    z = torch.zeros(5, 5, dtype=torch.float64)
    assert detector_loss(z, z).item() == 0.0
    assert detector_loss(z + 0.5, z).item() == 0.25
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 7, 7)), rng.random((3, 7, 7))
    ref = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert abs(detector_loss(torch.tensor(a), torch.tensor(b)).item() - ref) < 1e-12


def _unit_maps(rng, b=2, d=4, h=6, w=6):
    f = rng.normal(size=(b, d, h, w))
    return torch.tensor(f / np.linalg.norm(f, axis=1, keepdims=True))


def test_contrastive_trivial_cases():
    fm = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
    fm[0, 0] = 1.0
    fm[0, 1, 0, 3] = 1.0
    fm[0, 0, 0, 3] = 0.0
    same = PairBatch(pos_a=np.array([[0, 1, 1]]), pos_b=np.array([[0, 2, 2]]))
    assert contrastive_loss(same, fm, 0.8).item() == 0.0
    # orthogonal unit vectors: squared distance 2 >= margin
    neg = PairBatch(neg_a=np.array([[0, 0, 0]]), neg_b=np.array([[0, 3, 0]]))
    assert contrastive_loss(neg, fm, 0.8).item() == 0.0
    with pytest.raises(ValueError):
        contrastive_loss(PairBatch(), fm)


def test_contrastive_matches_reference():
    rng = np.random.default_rng(1)
    fm = _unit_maps(rng)
    refs = lambda n: np.c_[rng.integers(0, 2, n), rng.uniform(0, 5, (n, 2))]  # noqa: E731
    b = PairBatch(refs(5), refs(5), refs(7), refs(7))
    maps = fm.permute(0, 2, 3, 1).numpy()
    desc = lambda r: bilinear_unit(maps[int(r[0])], r[1], r[2])  # noqa: E731
    ref = contrastive_reference([(desc(a), desc(c)) for a, c in zip(b.pos_a, b.pos_b)],
                                [(desc(a), desc(c)) for a, c in zip(b.neg_a, b.neg_b)], 0.8)
    assert abs(contrastive_loss(b, fm, 0.8).item() - ref) < 1e-12


def test_stage2_loss_masking():
    rng = np.random.default_rng(2)
    p = torch.tensor(rng.random((2, 3, 5, 5)))
    assert stage2_loss(p, p.clone(), torch.ones(2, 3, dtype=torch.bool)).item() == 0.0
    t = p.clone()
    t[:, 1] = torch.tensor(rng.random((2, 5, 5)))
    mask = torch.tensor([[True, False, False], [True, False, False]])
    assert stage2_loss(p, t, mask).item() == 0.0
    with pytest.raises(EmptyDetectedSet):
        stage2_loss(p, t, torch.zeros(2, 3, dtype=torch.bool))


def test_stage2_loss_reference():
    rng = np.random.default_rng(3)
    p, t = rng.random((4, 3, 5, 5)), rng.random((4, 3, 5, 5))
    mask = np.array([[1, 0, 1], [0, 0, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    per_img = []
    for j in range(4):
        chans = [k for k in range(3) if mask[j, k]]
        if chans:
            per_img.append(sum(((p[j, k] - t[j, k]) ** 2).mean() for k in chans) / len(chans))
    ref = sum(per_img) / len(per_img)
    assert abs(stage2_loss(torch.tensor(p), torch.tensor(t), torch.tensor(mask)).item() - ref) < 1e-12


def test_masked_channel_gets_no_gradient():
    net = LandmarkNet(SMALL, stage2=True).double()
    x = torch.rand(2, 16, 16, dtype=torch.float64)
    tgt = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    mask = torch.tensor([[True, False, True], [True, False, False]])
    g = gradient(net, lambda _: stage2_loss(net.stage2(x), tgt, mask), ["stage2_head.weight", "stage2_head.bias"])
    assert torch.all(g["stage2_head.weight"][1] == 0) and g["stage2_head.bias"][1] == 0
    assert torch.any(g["stage2_head.weight"][0] != 0)


def test_gradient_linearity_and_zero_at_minimum():
    net = LandmarkNet(SMALL).double()
    x = torch.rand(1, 16, 16, dtype=torch.float64)
    names = ["detector_head.weight"]
    g1 = gradient(net, lambda _: net(x)[0].pow(2).mean(), names)
    g3 = gradient(net, lambda _: 3.0 * net(x)[0].pow(2).mean(), names)
    torch.testing.assert_close(g3[names[0]], 3.0 * g1[names[0]], rtol=1e-12, atol=0)
    with torch.no_grad():
        tgt = net(x)[0].clone()
    g0 = gradient(net, lambda _: detector_loss(net(x)[0], tgt), names)
    assert torch.all(g0[names[0]] == 0)


def test_rmsprop_zero_gradient_only_decays():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    state = {}
    optimizer_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, state, lr=0.1, weight_decay=0.01)
    torch.testing.assert_close(p["w"], torch.tensor([1.0, -2.0], dtype=torch.float64) * (1 - 0.1 * 0.01))


def test_rmsprop_scalar_recurrence():
    p = {"w": torch.tensor([0.3], dtype=torch.float64)}
    state = {}
    for _ in range(25):
        optimizer_step(p, {"w": torch.tensor([0.7], dtype=torch.float64)}, state, 2e-4, 0.99, 1e-8, 1e-5)
    ref_p, ref_v = rmsprop_scalar(0.3, 0.7, 25, 2e-4, 0.99, 1e-8, 1e-5)
    assert abs(p["w"].item() - ref_p) < 1e-12
    assert abs(state["w"].item() - ref_v) < 1e-12


def test_rmsprop_deterministic():
    def run():
        net = LandmarkNet(SMALL).double()
        opt = RMSprop(lr=1e-3)
        x = torch.rand(2, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        for _ in range(3):
            opt.step(net, gradient(net, lambda _: net(x)[0].mean()))
        return torch.cat([p.detach().ravel() for p in net.parameters()])
    assert torch.equal(run(), run())


def test_nonfinite_gradient_rejected():
    p = {"w": torch.zeros(1)}
    with pytest.raises(FloatingPointError):
        optimizer_step(p, {"w": torch.tensor([float("nan")])}, {}, 0.1)


def test_extract_keypoints():
    assert len(extract_keypoints(np.full((8, 8), 0.7), 0.1)) == 0
    one = extract_keypoints(render_target([[5, 3]], 1.0, (16, 16)), 0.5)
    assert one.shape == (1, 3) and tuple(one[0, :2]) == (5, 3)
    centres = np.array([[3.2, 3.0], [12.0, 4.6], [7.0, 9.0], [3.0, 13.0], [12.4, 12.8]])
    m = sum(render_target([c], 1.0, (16, 16)) for c in centres)
    got = extract_keypoints(m, 0.5)
    assert len(got) == 5
    assert {tuple(p) for p in got[:, :2]} == {tuple(p) for p in np.round(centres)}


def test_sample_descriptor_closed_forms():
    fm = np.zeros((4, 4, 3))
    fm[..., 0] = 2.0
    np.testing.assert_allclose(sample_descriptor(fm, (1, 2)), [1, 0, 0])
    fm[1, 2] = [0, 1, 0]
    fm[1, 1] = [1, 0, 0]
    np.testing.assert_allclose(sample_descriptor(fm, (1.5, 1)), np.array([1, 1, 0]) / np.sqrt(2), atol=1e-9)
    same = np.ones((4, 4, 2)) / np.sqrt(2)
    np.testing.assert_allclose(sample_descriptor(same, (0.5, 0.5)), same[0, 0], atol=1e-12)
    rng = np.random.default_rng(0)
    fr = rng.normal(size=(6, 6, 5))
    np.testing.assert_allclose(sample_descriptor(fr, (2.3, 3.7)), bilinear_unit(fr, 2.3, 3.7), atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    net = LandmarkNet(SMALL, seed=3, stage2=True)
    opt = RMSprop(lr=1e-3)
    x = torch.rand(2, 16, 16)
    opt.step(net, gradient(net, lambda _: net(x)[0].mean() + net.stage2(x).mean()))
    save_checkpoint(tmp_path / "c.ktl", net, opt, 4, {"note": [1, 2]})
    net2, opt2, rt, extra = load_checkpoint(tmp_path / "c.ktl")
    assert rt == 4 and extra == {"note": [1, 2]}
    for (n, a), (_, b) in zip(net.state_dict().items(), net2.state_dict().items()):
        assert torch.equal(a, b), n
    assert set(opt2.state) == set(opt.state)
    for k in opt.state:
        assert torch.equal(opt.state[k], opt2.state[k])


def test_corrupt_checkpoint_names_round(tmp_path):
    net = LandmarkNet(SMALL)
    save_checkpoint(tmp_path / "c.ktl", net, None, 7)
    data = (tmp_path / "c.ktl").read_bytes()
    (tmp_path / "bad.ktl").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ktl")
    (tmp_path / "short.ktl").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="round 7"):
        load_checkpoint(tmp_path / "short.ktl")
