import numpy as np
import pytest

from pairwise_iqa import tensor as T
from pairwise_iqa.checks import MINI_CONFIG
from pairwise_iqa.images import synthetic_reference
from pairwise_iqa.net import NetConfig, ErrorNet, aggregate, sample_locations
from pairwise_iqa.tensor import Parameter, grad_check

SMALL = NetConfig(conv_widths=(4, 4, 8, 8), hidden_units=16, patch_size=16, patches_eval=32)


@pytest.fixture(scope="module")
def small_net():
    net = ErrorNet(SMALL, seed=3)
    rng = np.random.default_rng(0)
    for name, p in net.params.items():
        if name.endswith(".b"):
            p.data[...] = rng.normal(0, 0.1, p.shape)
    net.recalibrate()
    return net


def test_default_feature_lengths():
    cfg = NetConfig()
    assert cfg.concat_taps == (2, 4, 6, 8, 10, 11)
    # 32x32 patch: taps after pools at 16, 8, 4, 2, 1 pixels, plus layer 11 at 1 pixel
    expected = 8 * 16 ** 2 + 16 * 8 ** 2 + 32 * 4 ** 2 + 64 * 2 ** 2 + 128 * 1 + 128 * 1
    assert cfg.x_length == expected == 4096
    assert cfg.y_length == 128
    net = ErrorNet(cfg, seed=0)
    f = net.extract_features(np.random.default_rng(0).random((2, 3, 32, 32)))
    assert f.x.shape == (2, 4096) and f.y.shape == (2, 128)


def test_64_pixel_patch_lengths():
    cfg = NetConfig(patch_size=64)
    assert cfg.y_length == 128 * 2 * 2
    assert cfg.x_length == 8 * 32 ** 2 + 16 * 16 ** 2 + 32 * 8 ** 2 + 64 * 4 ** 2 + 128 * 2 ** 2 + 128 * 2 ** 2


def test_incompatible_patch_rejected():
    with pytest.raises(ValueError):
        NetConfig(patch_size=24)
    net = ErrorNet(MINI_CONFIG)
    with pytest.raises(ValueError):
        net.extract_features(np.zeros((1, 3, 16, 16)))


def test_identical_patches_identical_features(small_net):
    p = np.random.default_rng(1).random((1, 3, 16, 16))
    a, b = small_net.extract_features(p), small_net.extract_features(p.copy())
    assert a.x.data.tobytes() == b.x.data.tobytes()


def test_zero_patch_zero_bias_zero_features():
    net = ErrorNet(SMALL, seed=0)  # biases start at zero
    f = net.extract_features(np.zeros((1, 3, 16, 16)))
    assert not f.x.data.any() and not f.y.data.any()


def test_patch_error_zero_difference_is_raw_constant(small_net):
    z = np.zeros(SMALL.x_length)
    raw = float(small_net.patch_error(z, z).data)
    p = small_net.params
    by_hand = float((p["sc.score.fc2.w"].data @ np.maximum(p["sc.score.fc1.b"].data, 0)
                     + p["sc.score.fc2.b"].data)[0])
    assert raw == pytest.approx(by_hand, abs=1e-12)
    assert raw == small_net.reference_zero_constant()


def test_patch_error_affine_without_relu(small_net, monkeypatch):
    monkeypatch.setattr(T, "relu", lambda x: x)
    rng = np.random.default_rng(2)
    ref, d1, d2 = (rng.normal(size=SMALL.x_length) for _ in range(3))
    f = lambda d: float(small_net.patch_error(ref, ref - d).data)  # noqa: E731
    f0 = f(np.zeros_like(d1))
    # affine: f(a d1 + b d2) - f0 = a (f(d1) - f0) + b (f(d2) - f0)
    assert f(0.3 * d1 + 1.7 * d2) - f0 == pytest.approx(0.3 * (f(d1) - f0) + 1.7 * (f(d2) - f0), abs=1e-9)


def test_score_head_gradcheck(small_net):
    rng = np.random.default_rng(3)
    xr = Parameter(rng.normal(size=(3, SMALL.x_length)), "x_ref")
    xd = Parameter(rng.normal(size=(3, SMALL.x_length)), "x_dist")
    params = [xr, xd] + [small_net.params[n] for n in ("sc.score.fc1.w", "sc.score.fc1.b",
                                                        "sc.score.fc2.w", "sc.score.fc2.b")]
    rep = grad_check(lambda: T.sum(small_net.patch_error(xr, xd)), params, max_entries=60)
    assert rep.passed, rep.lines()


def test_weight_head_positive_and_gradcheck(small_net):
    rng = np.random.default_rng(4)
    big = small_net.patch_weight(rng.normal(size=(5, SMALL.y_length)) * 50,
                                 rng.normal(size=(5, SMALL.y_length)) * 50)
    assert np.all(big.data > 0)
    yr = Parameter(rng.normal(size=(5, SMALL.y_length)), "y_ref")
    yd = Parameter(rng.normal(size=(5, SMALL.y_length)), "y_dist")
    same = small_net.patch_weight(yr, yr).data
    assert np.all(same == same[0]) and same[0] > 0
    params = [yr, yd] + [small_net.params[n] for n in ("sc.weight.fc1.w", "sc.weight.fc1.b",
                                                        "sc.weight.fc2.w", "sc.weight.fc2.b")]
    rep = grad_check(lambda: T.sum(small_net.patch_weight(yr, yd)), params, max_entries=60)
    assert rep.passed, rep.lines()


def test_length_mismatch(small_net):
    with pytest.raises(ValueError):
        small_net.patch_error(np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        small_net.patch_weight(np.zeros(SMALL.y_length + 1), np.zeros(SMALL.y_length + 1))


def test_aggregate_cases():
    assert aggregate([1.0, 2.0, 6.0], [2.0, 2.0, 2.0]) == 3.0
    assert aggregate([0.0, 4.0], [1.0, 3.0]) == 3.0
    assert aggregate([1.25] * 4, [0.1, 5.0, 2.0, 9.0]) == pytest.approx(1.25, abs=1e-15)
    e, w = np.random.default_rng(5).random(7), np.random.default_rng(6).random(7) + 0.1
    perm = np.random.default_rng(7).permutation(7)
    assert aggregate(e[perm], w[perm]) == pytest.approx(aggregate(e, w), abs=1e-15)
    assert aggregate(e, 4.0 * w) == pytest.approx(aggregate(e, w), abs=1e-15)
    with pytest.raises(ValueError):
        aggregate([], [])
    with pytest.raises(ValueError):
        aggregate([1.0], [0.0])


def test_reference_scores_exactly_zero(small_net):
    for seed in range(4):
        ref = synthetic_reference(24, seed=seed)
        assert small_net.score_image(ref, ref, n_patches=16, seed=seed) == 0.0


def test_reference_zero_independent_of_reference_and_tracks_updates(small_net):
    net = ErrorNet(SMALL, seed=8)
    c0 = net.reference_zero_constant()
    net.params["sc.score.fc2.b"].data += 0.5
    net.params["sc.score.fc1.b"].data += 0.1
    c1 = net.recalibrate()
    p = net.params
    by_hand = float((p["sc.score.fc2.w"].data @ np.maximum(p["sc.score.fc1.b"].data, 0)
                     + p["sc.score.fc2.b"].data)[0])
    assert c1 != c0 and c1 == pytest.approx(by_hand, abs=1e-12)
    ref = synthetic_reference(24, seed=1)
    assert net.score_image(ref, ref, n_patches=8) == 0.0


def test_score_deterministic(small_net):
    ref = synthetic_reference(24, seed=2)
    dist = np.clip(ref.astype(int) + 30, 0, 255).astype(np.uint8)
    a = small_net.score_image(dist, ref, n_patches=20, seed=11)
    b = small_net.score_image(dist, ref, n_patches=20, seed=11)
    assert a == b and a != 0.0


def test_score_shape_errors(small_net):
    ref = synthetic_reference(24, seed=2)
    with pytest.raises(ValueError):
        small_net.score_image(ref[:20], ref)
    tiny = synthetic_reference(8, seed=0)
    with pytest.raises(ValueError):
        small_net.score_image(tiny, tiny)


def test_weight_sharing_affects_both_branches(small_net):
    net = ErrorNet(SMALL, seed=9)
    ref = synthetic_reference(16, seed=3)
    a = np.clip(ref.astype(int) + 20, 0, 255).astype(np.uint8)
    b = np.clip(ref.astype(int) - 35, 0, 255).astype(np.uint8)
    before = (net.score_image(a, ref, 4), net.score_image(b, ref, 4))
    net.params["fe.conv1.w"].data *= 1.5
    after = (net.score_image(a, ref, 4), net.score_image(b, ref, 4))
    assert before[0] != after[0] and before[1] != after[1]
    assert len([n for n in net.params if n.startswith("fe.conv1.w")]) == 1


def test_variance_shrinks_with_more_patches():
    net = ErrorNet(MINI_CONFIG, seed=1)
    ref = synthetic_reference(40, seed=4)
    dist = np.clip(ref.astype(int) + np.random.default_rng(0).normal(0, 25, ref.shape), 0, 255).astype(np.uint8)
    var = []
    for n in (36, 144, 1024):
        scores = [net.score_image(dist, ref, n_patches=n, seed=s) for s in range(50)]
        var.append(np.var(scores))
    assert var[0] > var[1] > var[2]


def test_sample_locations_valid():
    locs = sample_locations((40, 50), 16, 500, np.random.default_rng(0))
    assert locs[:, 0].min() >= 0 and locs[:, 0].max() <= 24
    assert locs[:, 1].max() <= 34 and locs[:, 1].max() == 34


def test_checkpoint_round_trip(tmp_path, small_net):
    path = tmp_path / "m.ckpt"
    small_net.save(path)
    back = ErrorNet.load(path)
    assert back.config == small_net.config
    for n, p in small_net.params.items():
        assert back.params[n].data.tobytes() == p.data.tobytes()
    assert back.reference_zero == small_net.reference_zero
    ref = synthetic_reference(24, seed=6)
    dist = synthetic_reference(24, seed=7)
    assert back.score_image(dist, ref, 8, 1) == small_net.score_image(dist, ref, 8, 1)
    raw = path.read_bytes()
    path.write_bytes(raw + b"\0" * 8)
    with pytest.raises(ValueError):
        ErrorNet.load(path)
