import hashlib
import math

import numpy as np
import pytest

from anode.core_math import relative_error
from anode.train import (OdeNet, TrainConfig, batch_cross_entropy, build_for, cross_entropy_loss,
                         load_dataset, load_params, save_params, sgd_step, train)

SPIRALS_SHA = "5f47a9cbdb9f597b5d248fc44311814e317e3f030c9d656c3d8798712f4632c8"


def test_cross_entropy_examples():
    loss, g = cross_entropy_loss([1.0, 2.0, 3.0], 0)
    assert loss == pytest.approx(math.log(math.e + math.e ** 2 + math.e ** 3) - 1.0, rel=1e-15)
    assert loss == pytest.approx(2.4076, abs=1e-4)
    assert g.sum() == pytest.approx(0.0, abs=1e-15)
    assert cross_entropy_loss([0.0, 0.0], 1)[0] == pytest.approx(math.log(2))
    # stable for large logits
    assert cross_entropy_loss([1000.0, 0.0], 0)[0] == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(ValueError):
        cross_entropy_loss([1.0, 2.0], 2)


def test_batch_cross_entropy_matches_rows():
    logits = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]])
    labels = np.array([0, 2])
    loss, g = batch_cross_entropy(logits, labels)
    rows = [cross_entropy_loss(l, y) for l, y in zip(logits, labels)]
    assert loss == pytest.approx(np.mean([r[0] for r in rows]), rel=1e-15)
    assert np.allclose(g, np.array([r[1] for r in rows]) / 2, atol=1e-16)


def test_sgd_examples():
    assert sgd_step([1.0, 2.0], [0.5, -1.0], 0.1).tolist() == pytest.approx([0.95, 2.1])
    assert sgd_step([1.0], [[1.0], [3.0]], 0.5).tolist() == [0.0]
    assert sgd_step([2.0], [0.0], 0.1, weight_decay=0.5).tolist() == pytest.approx([1.9])
    with pytest.raises(ValueError):
        sgd_step([1.0, 2.0], [1.0, 2.0, 3.0], 0.1)


def test_weight_decay_is_gradient_of_l2_penalty():
    theta = np.array([0.3, -1.2])
    wd, h = 0.07, 1e-6
    # penalty wd/2 |theta|^2 has gradient wd * theta
    pen = lambda t: 0.5 * wd * np.dot(t, t)
    fd = np.array([(pen(theta + h * e) - pen(theta - h * e)) / (2 * h) for e in np.eye(2)])
    step = (theta - sgd_step(theta, np.zeros(2), 1.0, wd))
    assert np.allclose(step, fd, rtol=1e-8)


def test_blobs_exact_layout():
    d = load_dataset({"synthetic": "blobs", "n": 6, "noise": 0.0})
    assert d.y.tolist() == [0, 1, 0, 1, 0, 1]
    assert d.x[:2].tolist() == [[-1.0, 0.0], [1.0, 0.0]]
    assert len(d.train_idx) + len(d.test_idx) == 6
    assert set(d.train_idx) | set(d.test_idx) == set(range(6))


def test_spirals_golden_hash():
    text = load_dataset({"synthetic": "spirals", "n": 400, "noise": 0.05, "seed": 7}).to_csv()
    assert hashlib.sha256(text.encode()).hexdigest() == SPIRALS_SHA


def test_csv_dataset_and_errors(tmp_path):
    good = tmp_path / "d.csv"
    good.write_text("a,b,label\n0.5,1.0,1\n-0.5,2.0,0\n")
    d = load_dataset({"csv": str(good)})
    assert d.x.tolist() == [[0.5, 1.0], [-0.5, 2.0]] and d.n_classes == 2
    bad = tmp_path / "e.csv"
    bad.write_text("a,b,label\n0.5,1.0,1\n0.1,oops,0\n")
    with pytest.raises(ValueError, match="line 3, column 2"):
        load_dataset({"csv": str(bad)})
    with pytest.raises(ValueError):
        load_dataset({"synthetic": "nope"})
    with pytest.raises(ValueError):
        load_dataset({})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(pipeline="backprop")


@pytest.mark.parametrize("seed", range(5))
def test_network_gradient_matches_finite_differences(seed):
    net = OdeNet.build(2, 3, width=4, n_blocks=2, nsteps=3, scheme="heun_rk2", act="softplus", seed=seed)
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(5, 2)), rng.integers(0, 3, 5)
    loss, g, _ = net.gradient(x, y)
    h = 1e-6
    idx = rng.choice(net.theta.size, 12, replace=False)
    fd = []
    for j in idx:
        tp, tm = net.theta.copy(), net.theta.copy()
        tp[j] += h
        tm[j] -= h
        fd.append((net.loss(x, y, tp) - net.loss(x, y, tm)) / (2 * h))
    assert loss == pytest.approx(net.loss(x, y), rel=1e-12)
    assert relative_error(g[idx], np.array(fd)) < 1e-5


def test_layout_and_split():
    net = OdeNet.build(2, 2, width=3, n_blocks=2)
    names = [n for n, _, _ in net.layout]
    assert names == ["lift", "ode0", "transition1", "ode1", "head"]
    assert sum(s for _, _, s in net.layout) == net.theta.size
    assert [len(p) for p in net.split()] == [9, 12, 12, 12, 8]


def small_config(**kw):
    base = dict(dataset={"synthetic": "blobs", "n": 40, "noise": 0.1, "seed": 1}, batch_size=8, lr=0.1,
                epochs=3, nsteps=2, width=4, n_blocks=1)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_reproducible_and_policy_independent():
    cfg = small_config()
    data = load_dataset(cfg.dataset)
    a = train(build_for(cfg, data), cfg, data)
    b = train(build_for(cfg, data), cfg, data)
    c = train(build_for(cfg, data), small_config(policy="anode_block"), data)
    assert a.curve_csv() == b.curve_csv() == c.curve_csv()
    assert np.array_equal(a.theta, c.theta)


def test_loss_decreases_early():
    cfg = small_config(epochs=5)
    data = load_dataset(cfg.dataset)
    net = build_for(cfg, data)
    res = train(net, cfg, data, max_iters=10)
    assert res.iterations == 10
    assert res.curve[-1]["train_loss"] < res.curve[0]["train_loss"]


def test_blobs_fully_separated():
    cfg = small_config(dataset={"synthetic": "blobs", "n": 80, "noise": 0.0}, epochs=30)
    data = load_dataset(cfg.dataset)
    res = train(build_for(cfg, data), cfg, data, max_iters=200)
    assert res.final_train_acc == 1.0 and not res.diverged


def test_divergence_is_flagged_not_raised():
    cfg = small_config(lr=1e8, epochs=5)
    data = load_dataset(cfg.dataset)
    res = train(build_for(cfg, data), cfg, data)
    assert res.diverged
    assert res.note
    s = res.summary()
    assert s["diverged"] is True


def test_params_round_trip(tmp_path):
    net = OdeNet.build(2, 2, width=3, n_blocks=1, seed=4)
    p = tmp_path / "p.bin"
    save_params(p, net, {"pipeline": "dto"})
    header, theta = load_params(p)
    assert np.array_equal(theta, net.theta)
    assert header["pipeline"] == "dto" and header["count"] == net.theta.size
    with open(p, "ab") as fh:
        fh.write(b"\x00" * 8)
    with pytest.raises(ValueError):
        load_params(p)


def test_curve_csv_header():
    cfg = small_config(epochs=1)
    data = load_dataset(cfg.dataset)
    res = train(build_for(cfg, data), cfg, data)
    lines = res.curve_csv().splitlines()
    assert lines[0] == "epoch,iter,train_loss,train_acc,test_acc"
    assert len(lines) == 3
