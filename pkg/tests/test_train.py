import csv

import numpy as np
import pytest

from pairwise_iqa import tensor as T
from pairwise_iqa.bt import bt_probability
from pairwise_iqa.checks import MINI_CONFIG, mini_gradcheck, mini_triplets
from pairwise_iqa.dataset import TrainingTriplet
from pairwise_iqa.net import ErrorNet
from pairwise_iqa.tensor import Parameter, Tensor
from pairwise_iqa.train import (PixelErrorEstimator, TrainConfig, TrainingDivergedError,
                                batch_loss, pair_scores, predicted_preference, train)


class FixedScores:
    """Stub estimator returning preset scores for A and B."""

    patch_size = 4

    def __init__(self, s_a, s_b):
        self.s = Parameter(np.array([s_a, s_b], dtype=float), "s")

    def parameters(self):
        return [self.s]

    def image_scores(self, dist_stacks, ref_stack, n_images):
        return [T.reshape(T.take(self.s, np.full(n_images, k)), (n_images,)) for k in (0, 1)]


def _img(seed, shape=(3, 8, 8)):
    return np.random.default_rng(seed).random(shape)


@pytest.fixture(scope="module")
def mini_net():
    net = ErrorNet(MINI_CONFIG, seed=2)
    rng = np.random.default_rng(0)
    for name, p in net.params.items():
        if name.endswith(".b"):
            p.data[...] = rng.normal(0, 0.05, p.shape)
    net.recalibrate()
    return net


# loss -------------------------------------------------------------------------

def test_loss_zero_when_prediction_matches():
    # sigmoid(s_b - s_a) with s_b - s_a = ln 3 gives 0.75
    f = FixedScores(0.0, np.log(3.0))
    t = TrainingTriplet(_img(0), _img(1), _img(2), 0.75)
    assert float(batch_loss([t], f, 2).data) == pytest.approx(0.0, abs=1e-15)


def test_loss_single_triplet_value():
    # prediction 0.3 against label 0.8 -> (0.5)^2
    f = FixedScores(0.0, np.log(0.3 / 0.7))
    t = TrainingTriplet(_img(0), _img(1), _img(2), 0.8)
    assert float(batch_loss([t], f, 2).data) == pytest.approx(0.25, abs=1e-12)


def test_loss_empty_batch_rejected():
    with pytest.raises(ValueError):
        batch_loss([], FixedScores(0, 0))


def test_triplet_dimension_mismatch():
    with pytest.raises(ValueError):
        TrainingTriplet(_img(0), _img(1, (3, 8, 6)), _img(2), 0.5)
    with pytest.raises(ValueError):
        TrainingTriplet(_img(0), _img(1), _img(2), 1.5)


# predicted preference -----------------------------------------------------------

def test_identical_candidates_give_half(mini_net):
    a, r = _img(3, (3, 12, 12)), _img(4, (3, 12, 12))
    assert predicted_preference(TrainingTriplet(a, a.copy(), r, 0.5), mini_net, 4) == 0.5


def test_reference_as_candidate(mini_net):
    r = _img(5, (3, 12, 12))
    b = np.clip(r + 0.2 * _img(6, (3, 12, 12)), 0, 1)
    t = TrainingTriplet(r.copy(), b, r, 0.5)
    p = predicted_preference(t, mini_net, 4, seed=9)
    _, s_b, _ = pair_scores([t], mini_net, 4, np.random.default_rng(9))
    assert p == pytest.approx(1.0 / (1.0 + np.exp(-float(s_b.data[0]))), abs=1e-15)


def test_swap_gives_complement(mini_net):
    for seed in range(5):
        a, b, r = (_img(10 * seed + k, (3, 12, 12)) for k in range(3))
        t = TrainingTriplet(a, b, r, 0.3)
        p, q = predicted_preference(t, mini_net, 4, seed), predicted_preference(t.swapped(), mini_net, 4, seed)
        assert abs(p + q - 1.0) <= 1e-12


def test_swap_complement_loss_bitwise_equal(mini_net):
    trips = mini_triplets(4, seed=1)
    a = batch_loss(trips, mini_net, 4, rng=5)
    b = batch_loss([t.swapped() for t in trips], mini_net, 4, rng=5)
    assert a.data.tobytes() == b.data.tobytes()


def test_gauge_shift_leaves_preference():
    t = TrainingTriplet(_img(0), _img(1), _img(2), 0.4)
    base = predicted_preference(t, FixedScores(0.3, 1.1), 2)
    assert predicted_preference(t, FixedScores(5.3, 6.1), 2) == pytest.approx(base, abs=1e-12)
    assert base == pytest.approx(bt_probability(0.3, 1.1), abs=1e-15)


# training -----------------------------------------------------------------------

def _toy_dataset(n=200, seed=0, true_w=(3.0, 1.0, 0.5)):
    """Labels are exact BT preferences of a channel-weighted squared error."""
    rng = np.random.default_rng(seed)
    w = np.array(true_w)
    out = []
    for _ in range(n):
        r = rng.uniform(0.2, 0.8, (3, 8, 8))
        a = r + rng.normal(0, 1, (3, 1, 1)) * 0.3 * rng.choice([-1, 1], (3, 8, 8))
        b = r + rng.normal(0, 1, (3, 1, 1)) * 0.3 * rng.choice([-1, 1], (3, 8, 8))
        s = [float(w @ ((x - r) ** 2).mean(axis=(1, 2))) for x in (a, b)]
        out.append(TrainingTriplet(a, b, r, float(bt_probability(*s))))
    return out


def test_plugin_estimator_learns_representable_labels():
    data = _toy_dataset()
    f = PixelErrorEstimator(patch_size=8, init=0.2)
    init = float(batch_loss(data, f, 1).data)
    f, log = train(data, TrainConfig(iterations=300, batch_size=8, patches_per_image=1,
                                     step_size=0.05, seed=1, log_every=0), f)
    final = float(batch_loss(data, f, 1).data)
    assert final * 10 <= init
    assert len(log.rows) == 300


def test_all_half_labels_with_identical_candidates_do_nothing(mini_net):
    net = ErrorNet(MINI_CONFIG, seed=4)
    before = {n: p.data.copy() for n, p in net.params.items()}
    data = []
    for k in range(4):
        a = _img(k, (3, 12, 12))
        data.append(TrainingTriplet(a, a.copy(), _img(100 + k, (3, 12, 12)), 0.5))
    net, log = train(data, TrainConfig(iterations=5, batch_size=2, patches_per_image=2, log_every=0), net)
    assert all(v == 0.0 for v in log.losses)
    for n, p in net.params.items():
        assert np.array_equal(p.data, before[n]), n


def test_complemented_dataset_identical_curve():
    data = mini_triplets(6, seed=3)
    cfg = TrainConfig(iterations=6, batch_size=2, patches_per_image=2, step_size=1e-3,
                      seed=4, log_every=0)
    _, la = train(data, cfg, ErrorNet(MINI_CONFIG, seed=1))
    _, lb = train([t.swapped() for t in data], cfg, ErrorNet(MINI_CONFIG, seed=1))
    assert la.losses == lb.losses


def test_training_deterministic(tmp_path):
    data = mini_triplets(6, seed=5)
    cfg = TrainConfig(iterations=4, batch_size=2, patches_per_image=2, step_size=1e-3,
                      seed=7, log_every=0)
    na, la = train(data, cfg, ErrorNet(MINI_CONFIG, seed=3), tmp_path / "a")
    nb, lb = train(data, cfg, ErrorNet(MINI_CONFIG, seed=3), tmp_path / "b")
    assert la.losses == lb.losses
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_sgd_option_and_periodic_checkpoints(tmp_path):
    data = mini_triplets(4, seed=6)
    cfg = TrainConfig(iterations=4, batch_size=2, patches_per_image=2, optimizer="sgd",
                      step_size=1e-2, checkpoint_every=2, log_every=0)
    train(data, cfg, ErrorNet(MINI_CONFIG, seed=0), tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["final.ckpt", "step_000002.ckpt", "step_000004.ckpt"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_writes_diagnostic(tmp_path):
    bad = _img(0, (3, 12, 12))
    bad[0, 0, 0] = np.nan
    data = [TrainingTriplet(bad, _img(1, (3, 12, 12)), _img(2, (3, 12, 12)), 0.7)]
    cfg = TrainConfig(iterations=3, batch_size=1, patches_per_image=200, log_every=0)
    with pytest.raises(TrainingDivergedError) as err:
        train(data, cfg, ErrorNet(MINI_CONFIG, seed=0), tmp_path)
    assert err.value.iteration == 1
    assert err.value.checkpoint is not None and err.value.checkpoint.exists()
    ErrorNet.load(err.value.checkpoint)


def test_loss_log_csv(tmp_path):
    data = mini_triplets(3, seed=2)
    _, log = train(data, TrainConfig(iterations=3, batch_size=1, patches_per_image=2, log_every=1),
                   ErrorNet(MINI_CONFIG, seed=0))
    log.write_csv(tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["iteration", "loss", "wall_time"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
    assert [float(r[1]) for r in rows[1:]] == log.losses


@pytest.mark.parametrize("bad", [dict(iterations=0), dict(step_size=-1.0), dict(optimizer="lbfgs")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train([], TrainConfig(iterations=1))


def test_mini_network_gradient_check():
    rep = mini_gradcheck(seed=0)
    assert rep.passed and rep.worst <= 1e-4, rep.lines()


def test_tensor_stub_is_scalar_graph():
    # the stub estimator routes gradients into its score parameter
    f = FixedScores(0.2, 0.9)
    t = TrainingTriplet(_img(0), _img(1), _img(2), 0.9)
    loss = batch_loss([t], f, 2)
    loss.backward()
    assert isinstance(loss, Tensor) and np.all(f.s.grad != 0)
