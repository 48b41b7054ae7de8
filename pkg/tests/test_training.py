import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from jigssl.dataset import make_folds, plan_for_k
from jigssl.model import build_model
from jigssl.permset import generate_permutation_set
from jigssl.shuffler import TileGridSpec
from jigssl.training import (TrainConfig, TrainData, TrainHistory, compose_batch_unsupervised, jigsaw_class_weights,
                             lambda_at, load_config_file, preset, supervised_loss, supervised_step, train,
                             unsupervised_loss, unsupervised_step, make_optimizer)


def _logits(probs):
    return torch.log(torch.tensor(probs, dtype=torch.float64))


def test_supervised_loss_max_entropy():
    loss = supervised_loss(_logits([[0.5, 0.5], [0.5, 0.5]]), torch.tensor([0, 1]), [1.0, 1.0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_supervised_loss_confident_is_zero():
    loss = supervised_loss(torch.tensor([[-50.0, 50.0]], dtype=torch.float64), torch.tensor([1]), [1.0, 1.0])
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_supervised_loss_weighted_hand_value():
    # class 1 (neoplastic) weight 1/0.83, class 0 weight 1/0.17
    w = [5.8824, 1.2048]
    logits = _logits([[0.2, 0.8], [0.6, 0.4]])
    loss = supervised_loss(logits, torch.tensor([1, 0]), w)
    hand = (-1.2048 * math.log(0.8) - 5.8824 * math.log(0.6)) / 2
    assert loss.item() == pytest.approx(hand, abs=1e-9)
    assert loss.item() == pytest.approx(1.63686, abs=1e-5)


def test_losses_reduce_to_plain_cross_entropy():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(16, 2, generator=g, dtype=torch.float64)
    y = torch.randint(0, 2, (16,), generator=g)
    assert abs(supervised_loss(logits, y, [1.0, 1.0]).item() - F.cross_entropy(logits, y).item()) <= 1e-6
    jl = torch.randn(16, 31, generator=g, dtype=torch.float64)
    py = torch.randint(0, 31, (16,), generator=g)
    assert abs(unsupervised_loss(jl, py, np.ones(31)).item() - F.cross_entropy(jl, py).item()) <= 1e-6


def test_unsupervised_loss_hand_batch():
    probs = [[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.25, 0.25, 0.5]]
    w = jigsaw_class_weights(0.6, 2)
    loss = unsupervised_loss(_logits(probs), torch.tensor([0, 1, 2]), w)
    hand = -(2.5 * math.log(0.7) + (2 / 0.6) * math.log(0.6) + (2 / 0.6) * math.log(0.5)) / 3
    assert loss.item() == pytest.approx(hand, abs=1e-9)


def test_unsupervised_loss_perfect_and_range():
    logits = torch.full((2, 4), -60.0, dtype=torch.float64)
    logits[0, 3] = logits[1, 0] = 60.0
    assert unsupervised_loss(logits, torch.tensor([3, 0]), np.ones(4)).item() == pytest.approx(0, abs=1e-12)
    with pytest.raises(ValueError):
        unsupervised_loss(logits, torch.tensor([4, 0]), np.ones(4))
    with pytest.raises(ValueError):
        unsupervised_loss(logits[:0], torch.tensor([], dtype=torch.long), np.ones(4))


def test_loss_clamp_keeps_finite():
    logits = torch.tensor([[1000.0, -1000.0]])
    loss = supervised_loss(logits, torch.tensor([1]), [1.0, 1.0])
    assert torch.isfinite(loss)
    assert loss.item() == pytest.approx(-math.log(1e-12))


@pytest.mark.parametrize("s, P, expected", [
    (0.6, 30, [2.5] + [50.0] * 30),
    (0.5, 1, [2.0, 2.0]),
    (0.9, 9, [10.0] * 10),
])
def test_jigsaw_class_weights(s, P, expected):
    assert np.allclose(jigsaw_class_weights(s, P), expected, rtol=1e-12)


@pytest.mark.parametrize("s", [0.0, 1.0])
def test_jigsaw_class_weights_degenerate(s):
    with pytest.raises(ZeroDivisionError):
        jigsaw_class_weights(s, 30)


def test_compose_batch_counts():
    ps = generate_permutation_set(3, 30, seed=0)
    spec = TileGridSpec(image_side=9, crop_ratio_range=(1.0, 1.0))
    rng = np.random.default_rng(0)
    imgs = [torch.zeros(1, 9, 9)] * 10
    for _ in range(200):
        batch = compose_batch_unsupervised(imgs, ps, spec, 0.6, rng)
        assert sum(s.pseudo_label != 0 for s in batch) == 6
    assert all(s.pseudo_label == 0 for s in compose_batch_unsupervised(imgs, ps, spec, 0.0, rng))
    assert all(s.pseudo_label != 0 for s in compose_batch_unsupervised(imgs, ps, spec, 1.0, rng))


def test_lambda_schedule():
    on = TrainConfig(lam=1.5, lam_ramp=True)
    assert lambda_at(0, on) == 1.5
    assert lambda_at(5, on) == pytest.approx(2.25)
    assert lambda_at(4, on) == 1.5
    off = TrainConfig(lam=2.0)
    assert all(lambda_at(e, off) == 2.0 for e in range(30))


def test_presets():
    b = preset("baseline", 100)
    assert b.learning_rate == 1e-3 and b.weight_decay == 0.005
    assert preset("baseline", 12.5).weight_decay == 0.2
    s = preset("ssl", 100)
    assert s.P == 100 and s.lam == 1.0 and not s.lam_ramp
    s = preset("ssl", 6.25)
    assert s.P == 30 and s.lam == 1.5 and s.lam_ramp and s.weight_decay == 0.2
    assert preset("ssl", 25).lam == 2.0 and preset("ssl", 25).weight_decay == 0.07
    assert preset("ssl", 50, epochs=3).epochs == 3


def test_config_validation_and_file(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(scramble_fraction=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    cfg = TrainConfig(epochs=3, lam=2.0, encoder="tiny-cnn")
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n" + cfg.to_text())
    assert TrainConfig.from_mapping(load_config_file(path)) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_mapping({"nope": 1})


def _tiny_data(small_synth):
    plan = plan_for_k(make_folds(small_synth, 2, seed=0)[0], small_synth, 100)
    return TrainData.from_plan(small_synth, plan)


def _snap(params):
    return [p.detach().clone() for p in params]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_phase_steps_isolated():
    torch.manual_seed(0)
    m = build_model("tiny-cnn", 5, seed=0)
    opt = make_optimizer(m, TrainConfig(learning_rate=1e-2, weight_decay=0.05))
    x, y = torch.randn(4, 3, 24, 24), torch.tensor([0, 1, 0, 1])
    ju, js, je = _snap(m.jigsaw_params()), _snap(m.supervised_params()), _snap(m.encoder_params())
    supervised_step(m, opt, x, y, torch.tensor([1.0, 1.0]))
    assert _same(ju, m.jigsaw_params())
    assert not _same(js, m.supervised_params()) and not _same(je, m.encoder_params())
    js = _snap(m.supervised_params())
    unsupervised_step(m, opt, x, torch.tensor([0, 1, 2, 3]), torch.ones(6), 1.0)
    assert _same(js, m.supervised_params())
    assert not _same(ju, m.jigsaw_params())


def test_lambda_scales_gradient_not_recorded_loss():
    x, y = torch.randn(4, 3, 24, 24), torch.tensor([0, 1, 2, 3])
    grads = []
    for lam in (1.0, 2.0):
        m = build_model("tiny-cnn", 5, seed=0)
        opt = torch.optim.SGD(m.parameters(), lr=0.0)
        lu = unsupervised_step(m, opt, x, y, torch.ones(6), lam)
        grads.append((lu, m.jigsaw_head.weight.grad.clone()))
    assert grads[0][0] == grads[1][0]
    assert torch.allclose(grads[1][1], 2 * grads[0][1])


def test_train_smoke_and_history(small_synth, tmp_path):
    data = _tiny_data(small_synth)
    ps = generate_permutation_set(3, 5, seed=0)
    cfg = TrainConfig(image_side=24, epochs=2, batch_size_supervised=8, batch_size_unsupervised=8, P=5,
                      learning_rate=1e-3, lam=1.0)
    model, hist = train(build_model("tiny-cnn", 5, seed=0), data, ps, cfg, dump_shuffled=tmp_path / "dump")
    per_epoch = math.ceil(len(data.unsup_images) / 8)
    assert len(hist.iterations) == 2 * per_epoch
    assert [r.iteration for r in hist.iterations] == list(range(2 * per_epoch))
    assert all(r.unsupervised_loss is not None for r in hist.iterations)
    assert len(hist.epochs) == 2
    assert len(list((tmp_path / "dump").glob("*.png"))) == 8
    hist.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration,phase,loss,lambda"
    assert len(lines) == 1 + 2 * len(hist.iterations)


def test_baseline_arm_same_supervised_steps(small_synth):
    data = _tiny_data(small_synth)
    cfg = TrainConfig(image_side=24, epochs=1, batch_size_supervised=8, batch_size_unsupervised=8, P=5)
    _, hb = train(build_model("tiny-cnn", None, seed=0), data, None, cfg)
    _, hs = train(build_model("tiny-cnn", 5, seed=0), data, generate_permutation_set(3, 5, seed=0), cfg)
    assert len(hb.iterations) == len(hs.iterations)
    assert all(r.unsupervised_loss is None for r in hb.iterations)


def test_train_deterministic(small_synth):
    data = _tiny_data(small_synth)
    ps = generate_permutation_set(3, 5, seed=0)
    cfg = TrainConfig(image_side=24, epochs=2, batch_size_supervised=8, batch_size_unsupervised=8, P=5,
                      learning_rate=1e-3, seed=4)
    runs = [train(build_model("tiny-cnn", 5, seed=1), data, ps, cfg)[0].state_dict() for _ in range(2)]
    for k in runs[0]:
        assert torch.equal(runs[0][k], runs[1][k]), k


def test_width_mismatch_rejected(small_synth):
    data = _tiny_data(small_synth)
    with pytest.raises(ValueError):
        train(build_model("tiny-cnn", 7, seed=0), data, generate_permutation_set(3, 5, seed=0),
              TrainConfig(image_side=24, epochs=1))


def test_history_weighted_term_linear():
    from jigssl.training import IterationRecord

    a = IterationRecord(0, 0, 0.5, 0.8, 1.5)
    b = IterationRecord(0, 0, 0.5, 0.8, 3.0)
    assert b.weighted_unsupervised_loss == pytest.approx(2 * a.weighted_unsupervised_loss)
    assert TrainHistory().iterations == []
