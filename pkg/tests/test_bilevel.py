import math

import numpy as np
import pytest

import noisydarts.functional as F
from noisydarts.bilevel import (NonFiniteLossError, RetrainConfig, SearchConfig, alpha_step, batch_order,
                                params_checksum, retrain, search, weight_step)
from noisydarts.data import DatasetSplit, load_dataset
from noisydarts.network import Context, Supernet
from noisydarts.noise import NoisePolicy
from noisydarts.optim import SGD, Adam, clip_grad_norm, cosine_lr
from noisydarts.searchspace import Genotype, build_space, derive_genotype
from noisydarts.tensor import Tensor, backward

TINY = dict(epochs=1, batch_size=8, channels=4, stages=[1])


@pytest.fixture(scope="module")
def data():
    return load_dataset("synthetic", seed=0, num_classes=3, n_samples=48, n_test=30, image_size=8)


# --- optimizers ---------------------------------------------------------------------

def test_cosine_schedule():
    assert cosine_lr(0.025, 0, 10) == 0.025
    assert cosine_lr(0.025, 5, 10) == pytest.approx(0.0125, abs=1e-17)
    assert cosine_lr(0.025, 10, 10) == pytest.approx(0.0, abs=1e-17)
    assert cosine_lr(0.1, 5, 10, lr_min=0.02) == pytest.approx(0.06, abs=1e-16)


def test_sgd_zero_gradient_no_decay_is_identity():
    w = Tensor(np.array([1.0, -2.0]))
    SGD({"w": w}, lr=0.1, momentum=0.0, weight_decay=0.0).step({"w": np.zeros(2)}, 0)
    assert list(w.data) == [1.0, -2.0]


def test_sgd_momentum_hand_recursion():
    w = Tensor(np.array([0.5]))
    opt = SGD({"w": w}, lr=0.1, momentum=0.9, weight_decay=0.0, total_epochs=100)
    opt.step({"w": np.array([1.0])}, 0)
    assert w.data[0] == pytest.approx(0.5 - 0.1 * 1.0, abs=1e-15)
    opt.step({"w": np.array([1.0])}, 0)
    assert w.data[0] == pytest.approx(0.4 - 0.1 * 1.9, abs=1e-15)


def test_sgd_decoupled_decay():
    w = Tensor(np.array([2.0]))
    SGD({"w": w}, lr=0.5, momentum=0.0, weight_decay=0.1).step({"w": np.array([0.0])}, 0)
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def test_adam_first_step_closed_form():
    a = Tensor(np.array([0.3, -0.1, 0.0]))
    g = np.array([0.2, -3.0, 0.0])
    Adam({"a": a}, lr=1e-3, betas=(0.5, 0.999), eps=1e-8, weight_decay=0.0).step({"a": g})
    expected = np.array([0.3, -0.1, 0.0]) - 1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(a.data, expected, rtol=0, atol=1e-15)


def test_adam_opposite_gradients_shrink_step():
    a = Tensor(np.array([0.0]))
    opt = Adam({"a": a}, lr=1e-2, weight_decay=0.0)
    opt.step({"a": np.array([1.0])})
    first = abs(a.data[0])
    before = a.data[0]
    opt.step({"a": np.array([-1.0])})
    second = abs(a.data[0] - before)
    assert second < first
    # m2 = 0.5*0.5 - 0.5 = -0.25, m_hat = -0.25/0.75; v_hat = 1
    assert second == pytest.approx(1e-2 * (0.25 / 0.75) / (1 + 1e-8), rel=1e-12)


def test_optimizer_input_checks():
    w = Tensor(np.zeros(2))
    opt = SGD({"w": w})
    with pytest.raises(KeyError):
        opt.step({"v": np.zeros(2)}, 0)
    with pytest.raises(ValueError):
        opt.step({"w": np.zeros(3)}, 0)
    with pytest.raises(FloatingPointError):
        opt.step({"w": np.array([np.nan, 0.0])}, 0)


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    out = clip_grad_norm(g, 1.0)
    norm = math.sqrt(sum(float(np.vdot(v, v)) for v in out.values()))
    assert norm == pytest.approx(1.0, abs=1e-6)
    assert clip_grad_norm(g, 10.0)["a"] is g["a"]


def test_quadratic_surrogate_single_alternation():
    # L_train = 1/2 |w - a|^2, L_val = 1/2 |a|^2, with autodiff gradients
    rng = np.random.default_rng(0)
    w0, a0 = rng.standard_normal(4), rng.standard_normal(4)
    w = Tensor(w0.copy(), requires_grad=True)
    a = Tensor(a0.copy(), requires_grad=True)
    lr, mom, wd = 0.025, 0.9, 3e-4
    alr, b1, b2, awd = 3e-4, 0.5, 0.999, 1e-3
    sgd = SGD({"w": w}, lr, mom, wd, total_epochs=4)
    adam = Adam({"a": a}, alr, (b1, b2), 1e-8, awd)

    diff = F.add(w, F.scale(Tensor(a.data), -1.0))
    backward(F.scale(F.sum_all(F.mul(diff, diff)), 0.5))
    sgd.step({"w": w.grad}, 0)
    w.grad = None
    backward(F.scale(F.sum_all(F.mul(a, a)), 0.5))
    adam.step({"a": a.grad})

    g = w0 - a0
    w1 = w0 - lr * wd * w0 - lr * g
    ga = a0 + awd * a0
    m_hat = (1 - b1) * ga / (1 - b1)
    v_hat = (1 - b2) * ga * ga / (1 - b2)
    a1 = a0 - alr * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(w.data, w1, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.data, a1, rtol=0, atol=1e-12)


# --- search loop --------------------------------------------------------------------

def test_batch_order_full_batches_and_replay():
    b = batch_order(20, 6, seed=1, epoch=0, stream=0)
    assert [len(x) for x in b] == [6, 6, 6]
    assert len(set(np.concatenate(b))) == 18
    again = batch_order(20, 6, seed=1, epoch=0, stream=0)
    assert all(np.array_equal(x, y) for x, y in zip(b, again))
    other = batch_order(20, 6, seed=1, epoch=0, stream=1)
    assert not all(np.array_equal(x, y) for x, y in zip(b, other))


def test_zero_epochs_derives_from_initial_alpha(data):
    sp = build_space("nasbench201")
    rec = search(sp, NoisePolicy(), data, SearchConfig(**dict(TINY, epochs=0)), seed=3)
    assert rec.epochs == []
    assert rec.genotype == derive_genotype(rec.initial_alpha, sp)


def test_none_policy_matches_sigma_zero_bitwise(data):
    sp = build_space("nasbench201")
    hyper = SearchConfig(**TINY)
    a = search(sp, NoisePolicy(placement="none"), data, hyper, seed=2)
    b = search(sp, NoisePolicy(sigma=0.0), data, hyper, seed=2)
    assert a.to_csv(sp).split("\n", 1)[1] == b.to_csv(sp).split("\n", 1)[1]
    assert a.genotype == b.genotype
    for k in a.final_alpha():
        assert a.final_alpha()[k].tobytes() == b.final_alpha()[k].tobytes()


def test_ofs_without_skip_equals_vanilla(data):
    sp = build_space("nasbench201", {"remove": ["skip_connect"]})
    hyper = SearchConfig(**TINY)
    a = search(sp, NoisePolicy(placement="none"), data, hyper, seed=4)
    b = search(sp, NoisePolicy(sigma=0.8), data, hyper, seed=4)
    for k in a.final_alpha():
        assert a.final_alpha()[k].tobytes() == b.final_alpha()[k].tobytes()


def test_steps_never_touch_the_other_parameter_set(data):
    sp = build_space("nasbench201")
    net = Supernet(sp, c=4, num_classes=3, stages=[1], seed=0)
    ctx = Context(training=True, update_stats=True)
    x, y = data.part("train")
    w_opt = SGD(net.params)
    a_opt = Adam(net.alpha)
    before_a = params_checksum(net.alpha)
    before_w = params_checksum(net.params)
    weight_step(net, w_opt, x[:8], y[:8], ctx, 0, 5.0)
    assert params_checksum(net.alpha) == before_a
    assert params_checksum(net.params) != before_w
    before_w = params_checksum(net.params)
    alpha_step(net, a_opt, x[8:16], y[8:16], ctx)
    assert params_checksum(net.params) == before_w
    assert params_checksum(net.alpha) != before_a


def test_record_layout(data):
    sp = build_space("nasbench201")
    rec = search(sp, NoisePolicy(sigma=0.3, schedule="linear_decay"), data,
                 SearchConfig(**dict(TINY, epochs=2)), seed=0)
    assert [r.epoch for r in rec.epochs] == [0, 1]
    assert rec.epochs[0].sigma == 0.3 and rec.epochs[1].sigma == pytest.approx(0.15)
    lines = rec.to_csv(sp).strip().split("\n")
    header = lines[0].split(",")
    assert header[:6] == ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "sigma"]
    assert len(header) == 6 + 30 and len(lines) == 3
    assert "cell.0-1/skip_connect" in header


def test_overlapping_splits_rejected(data):
    bad = DatasetSplit(data.train_x, data.train_y, data.train_x, data.train_y, data.test_x, data.test_y,
                       data.num_classes, train_ids=data.train_ids, val_ids=data.train_ids)
    with pytest.raises(ValueError, match="overlap"):
        search(build_space("nasbench201"), NoisePolicy(), bad, SearchConfig(**TINY))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_location(data):
    sp = build_space("nasbench201")
    with pytest.raises(NonFiniteLossError) as exc:
        search(sp, NoisePolicy(), data, SearchConfig(**dict(TINY, w_lr=1e200)), seed=0)
    assert exc.value.epoch == 0 and exc.value.record is not None
    assert exc.value.record.aborted == (exc.value.epoch, exc.value.step)


def test_search_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown search option"):
        SearchConfig.from_dict({"epochs": 1, "lr": 0.1})


# --- retrain ------------------------------------------------------------------------

NONE_ARCH = "|none~0|+|none~0|none~1|+|none~0|none~1|none~2|"


def test_all_zero_genotype_is_constant_classifier(data):
    sp = build_space("nasbench201")
    res = retrain(Genotype.from_arch_string(NONE_ARCH), sp, data,
                  RetrainConfig(epochs=2, batch_size=8, channels=4, stages=[1]), seed=0)
    majority = np.bincount(data.test_y).max() / len(data.test_y)
    assert res.accuracy == pytest.approx(majority, abs=1e-12)


def test_untrained_network_near_chance():
    d = load_dataset("synthetic", seed=0, num_classes=4, n_samples=16, n_test=400, image_size=8)
    geno = Genotype.from_arch_string("|nor_conv_3x3~0|+|skip_connect~0|nor_conv_3x3~1|+"
                                     "|skip_connect~0|nor_conv_3x3~1|avg_pool_3x3~2|")
    res = retrain(geno, build_space("nasbench201"), d, RetrainConfig(epochs=0, channels=4, stages=[1]), seed=1)
    n = len(d.test_y)
    # a fixed random classifier on a balanced set: accuracy is a mean of n draws with mean 1/4
    assert abs(res.accuracy - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / n)


def test_retrain_is_deterministic(data):
    geno = Genotype.from_arch_string("|nor_conv_1x1~0|+|skip_connect~0|nor_conv_3x3~1|+"
                                     "|avg_pool_3x3~0|nor_conv_1x1~1|skip_connect~2|")
    hyper = RetrainConfig(epochs=1, batch_size=8, channels=4, stages=[1])
    sp = build_space("nasbench201")
    a, b = retrain(geno, sp, data, hyper, seed=5), retrain(geno, sp, data, hyper, seed=5)
    assert a.accuracy == b.accuracy and a.train_loss == b.train_loss


def test_retrain_rejects_foreign_genotype(data):
    geno = Genotype.from_arch_string(NONE_ARCH)
    with pytest.raises(ValueError):
        retrain(geno, build_space("darts"), data, RetrainConfig(epochs=0, channels=4))
    with pytest.raises(ValueError, match="not a candidate"):
        retrain(geno, build_space("nasbench201", {"remove": ["none"]}), data, RetrainConfig(epochs=0, channels=4))
