import numpy as np
import pytest

from dynseg import data as D
from dynseg import model as M
from dynseg import train as TR


def test_poly_lr_values():
    assert TR.poly_lr(0, 100, 0.01, 0.9) == 0.01
    assert TR.poly_lr(100, 100, 0.01, 0.9) == 0.0
    assert TR.poly_lr(50, 100, 0.01, 0.9) == pytest.approx(0.005359, abs=5e-7)
    with pytest.raises(ValueError):
        TR.poly_lr(101, 100, 0.01, 0.9)


def test_poly_lr_strictly_decreasing():
    lrs = [TR.poly_lr(i, 37, 0.1, 0.9) for i in range(38)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_sgd_step_cases():
    p = {"w": np.array([1.0])}
    v = {}
    TR.sgd_step(p, {"w": np.array([0.0])}, v, 0.1, 0.9, 0.0)
    assert p["w"][0] == 1.0
    TR.sgd_step(p, {"w": np.array([0.5])}, {}, 0.1, 0.0, 0.0)
    assert p["w"][0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_matches_hand_recurrence():
    p = {"w": np.array([2.0])}
    v = {}
    lr, mom, wd, g = 0.1, 0.9, 0.01, 0.3
    w, vel = 2.0, 0.0
    for _ in range(2):
        TR.sgd_step(p, {"w": np.array([g])}, v, lr, mom, wd)
        vel = mom * vel + g + wd * w
        w = w - lr * vel
    assert p["w"][0] == pytest.approx(w, abs=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        TR.sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, 0.1, 0.9, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(base_lr=0).validate()
    with pytest.raises(ValueError):
        TR.TrainConfig(augment="rotate").validate()
    with pytest.raises(ValueError):
        TR.train_model([], TR.TrainConfig(epochs=1))


def test_one_epoch_smoke_and_checkpoint(tmp_path):
    scenes = D.make_set(5, 10, (32, 32))
    bb, hd, log = TR.train_model(scenes, TR.TrainConfig(epochs=1, batch_size=4))
    assert len(log) == 1 and np.isfinite(log[0][2])
    M.save_checkpoint(tmp_path / "m.sadp", bb, hd)
    assert M.params_digest(*M.load_checkpoint(tmp_path / "m.sadp")) == M.params_digest(bb, hd)
    assert TR.format_log(log).splitlines()[0] == TR.LOG_HEADER


def test_training_is_deterministic_with_augmentation():
    scenes = D.make_set(6, 6, (32, 32))
    cfg = TR.TrainConfig(epochs=2, batch_size=3, augment="scale_flip", seed=4)
    a = TR.train_model(scenes, cfg)
    b = TR.train_model(scenes, cfg)
    assert M.params_digest(a[0], a[1]) == M.params_digest(b[0], b[1])
    assert a[2] == b[2]


def test_loss_trends_down_over_first_fifty_iterations():
    scenes = D.make_set(8, 100, (32, 32))
    losses = []
    TR.train_model(scenes, TR.TrainConfig(epochs=1, batch_size=2, base_lr=0.05),
                   on_step=lambda i, loss: losses.append(loss))
    first = losses[:50]
    assert len(first) == 50 and np.all(np.isfinite(first))
    assert np.median(first[-10:]) < np.median(first[:10])


def test_augmentation_keeps_labels_exact():
    rng = np.random.default_rng(0)
    scene = D.gen_scene(9, (32, 32))
    out = TR._augment(scene, rng, TR.TrainConfig(augment="scale_flip"), D.GeneratorSpec())
    ref = D.gen_scene(9, (32, 32), out.scale)
    assert 0.5 <= out.scale <= 2.0
    assert (np.array_equal(out.labels, ref.labels) or np.array_equal(out.labels, ref.labels[:, ::-1]))
