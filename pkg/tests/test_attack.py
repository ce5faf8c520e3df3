import math

import numpy as np
import pytest

from hitm import attack as atk
from hitm import detector as det
from hitm import numerics as nx
from hitm._binfmt import FormatError
from hitm.detector import RawDetections
from hitm.scenes import generate

ZERO = RawDetections.from_logits(np.zeros((128, 8)))


def raw_of(z):
    return RawDetections.from_logits(z)


def test_closed_form_values_at_zero_logits():
    assert atk.loss_pc(ZERO)[0] == pytest.approx(96.0, abs=1e-12)
    assert atk.loss_pcb(ZERO)[0] == pytest.approx(12.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_logit_gradients(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(128, 8))
    tgt_fab = atk.make_tog_target(raw_of(rng.normal(size=(128, 8))), "fabrication")
    tgt_van = atk.make_tog_target(raw_of(z), "vanishing")
    for f in (lambda v: atk.loss_pc(raw_of(v)),
              lambda v: atk.loss_pcb(raw_of(v)),
              lambda v: atk.loss_tog(raw_of(v), tgt_fab),
              lambda v: atk.loss_tog(raw_of(v), tgt_van)):
        assert nx.finite_difference_check(f, z, 1e-4) < 1e-6


@pytest.mark.parametrize("loss", ["pc", "pcb", "tog"])
def test_gradients_through_detector(loss):
    w = det.init_weights(1)
    img = generate(2, 1, 3)[0].image
    cfg = atk.AttackConfig(loss=loss)
    target = atk.make_tog_target(det.forward(w, img), "fabrication") if loss == "tog" else None

    def f(x):
        raw, _, g = atk._evaluate(w, x, cfg, target)
        return atk.adversarial_loss(raw, cfg, target)[0], g

    coords = np.random.default_rng(4).choice(img.size, 40, replace=False)
    coords = det.smooth_coordinates(w, img, coords, 1e-3)
    assert nx.finite_difference_check(f, img, 1e-3, coords=coords) < 1e-3


def test_monotonicity():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(128, 8))
    for i in (0, 40, 127):
        up = z.copy()
        up[i, 4] += 0.5
        assert atk.loss_pc(raw_of(up))[0] > atk.loss_pc(raw_of(z))[0]
        wide = z.copy()
        wide[i, 2] += 0.5
        assert atk.loss_pcb(raw_of(wide))[0] < atk.loss_pcb(raw_of(z))[0]


def test_pcb_denominator_guard():
    z = np.zeros((128, 8))
    z[:, 2:4] = -60.0
    value, grad = atk.loss_pcb(raw_of(z))
    assert np.isfinite(value) and np.all(np.isfinite(grad))
    assert value == pytest.approx(96.0 / atk.DENOM_GUARD)


def test_tog_terms_vanish_at_target():
    z = np.random.default_rng(6).normal(size=(128, 8))
    z[:, 5:] = -40.0
    z[np.arange(128), 5 + np.arange(128) % 3] = 40.0
    target = atk.make_tog_target(raw_of(z), "fabrication")
    (coord, _, cls), _ = det.yolo_loss_terms(z, target.positive, target.boxes, target.classes)
    assert coord == 0.0 and cls < 1e-30


def test_tog_vanishing_closed_form():
    target = atk.make_tog_target(ZERO, "vanishing")
    assert not target.positive.any()
    value, _ = atk.loss_tog(ZERO, target)
    assert value == pytest.approx(-128 * math.log(2) * det.LAMBDA_NOOBJ, abs=1e-12)


def test_tog_target_shape_checked():
    with pytest.raises(ValueError):
        atk.AdversarialTarget(np.zeros(3, bool), np.zeros(2, int), np.zeros((3, 4)))
    small = atk.AdversarialTarget(np.zeros(3, bool), np.zeros(3, int), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        atk.loss_tog(ZERO, small)


def test_config_validation():
    assert atk.AttackConfig(mode="vanish").mode == "vanishing"
    assert atk.AttackConfig(mode="vanishing").direction == -1.0
    assert atk.AttackConfig(loss="tog", mode="vanish").direction == 1.0
    for bad in ({"epsilon": 0}, {"alpha": -1}, {"decay": 0}, {"decay": 1.1},
                {"iterations": 0}, {"loss": "l2"}, {"mode": "both"}, {"init": "gauss"}):
        with pytest.raises(ValueError):
            atk.AttackConfig(**bad)


def test_zero_gradient_projects_and_is_fixed_point():
    w = det.zero_weights()
    x = np.random.default_rng(0).random(det.IMAGE_SHAPE)
    cfg = atk.AttackConfig(epsilon=2 / 255)
    big = atk.Perturbation(np.full(det.IMAGE_SHAPE, 5.0), cfg)
    out = atk.pgd_step(big, x, w, cfg, 8 / 255)
    assert np.all(out.delta == 2 / 255)
    again = atk.pgd_step(out, x, w, cfg, 8 / 255)
    assert np.array_equal(again.delta, out.delta)
    zero, _ = atk.attack_image(x, w, atk.AttackConfig(iterations=5))
    assert not zero.delta.any()
    with pytest.raises(ValueError):
        atk.pgd_step(out, x, w, cfg, 0.0)


def test_non_finite_gradient_aborts():
    cfg = atk.AttackConfig()
    with pytest.raises(atk.AttackError, match="non-finite"):
        atk._apply_step(np.zeros(3), np.array([0.0, np.nan, 1.0]), 0.1, cfg)


@pytest.fixture(scope="module")
def weights():
    return det.load_weights(det.PINNED_WEIGHTS)


@pytest.fixture(scope="module")
def scene():
    return generate(1, 1, 77)[0]


def test_single_step_schedule(weights, scene):
    seen = []
    cfg = atk.AttackConfig(iterations=1, decay=0.9)
    _, series = atk.attack_image(scene.image, weights, cfg, callback=lambda t, p, a: seen.append(a))
    assert seen == [8 / 255] and series.step_sizes == [8 / 255]
    assert len(list(series.rows())) == 1


def test_decay_schedule_and_budget(weights, scene):
    cfg = atk.AttackConfig(iterations=30, decay=0.95, epsilon=4 / 255)
    seen = []

    def check(t, pert, alpha):
        assert np.max(np.abs(pert.delta)) <= cfg.epsilon
        seen.append(alpha)

    atk.attack_image(scene.image, weights, cfg, callback=check)
    expected = [cfg.alpha * cfg.decay ** (t - 1) for t in range(1, 31)]
    assert max(abs(a - b) for a, b in zip(seen, expected)) <= 1e-12


def test_universal_schedule_constant_within_epoch(weights):
    imgs = [s.image for s in generate(1, 3, 5)]
    cfg = atk.AttackConfig(iterations=4, decay=0.5)
    seen = {}
    atk.attack_universal(imgs, weights, cfg,
                         callback=lambda e, j, p, a: seen.setdefault(e, []).append(a))
    assert sorted(seen) == [1, 2, 3, 4]
    for e, alphas in seen.items():
        assert alphas == [cfg.alpha * 0.5 ** (e - 1)] * 3


def test_universal_single_image_equals_image_specific(weights, scene):
    cfg = atk.AttackConfig(iterations=12, decay=0.9, init="uniform", seed=3)
    a_traj, u_traj = [], []
    pa, sa = atk.attack_image(scene.image, weights, cfg, callback=lambda t, p, a: a_traj.append(p.delta))
    pu, su = atk.attack_universal([scene.image], weights, cfg,
                                  callback=lambda e, j, p, a: u_traj.append(p.delta))
    for x, y in zip(a_traj, u_traj):
        assert np.array_equal(x, y)
    assert sa.num_boxes == su.num_boxes
    np.testing.assert_allclose(sa.adv_loss, su.adv_loss, rtol=0, atol=1e-9)


def test_uniform_init_is_seeded_and_bounded():
    cfg = atk.AttackConfig(init="uniform", seed=9, epsilon=3 / 255)
    a, b = atk.init_perturbation(cfg), atk.init_perturbation(cfg)
    assert np.array_equal(a.delta, b.delta)
    assert np.max(np.abs(a.delta)) <= 3 / 255 and np.any(a.delta != 0)


def test_metric_series_telescopes(weights, scene):
    cfg = atk.AttackConfig(iterations=10)
    pert, series = atk.attack_image(scene.image, weights, cfg)
    clean = det.forward(weights, scene.image)
    final = det.forward(weights, pert.apply(scene.image))
    direct = np.mean(final.conf_logits - clean.conf_logits)
    assert abs(sum(series.mean_conf_variation) - direct) <= 1e-9


def test_tog_vanishing_lowers_confidence(weights, scene):
    # a step well below epsilon; alpha == epsilon just bounces between corners
    cfg = atk.AttackConfig(loss="tog", mode="vanish", iterations=10, decay=1.0, alpha=2 / 255)
    pert, series = atk.attack_image(scene.image, weights, cfg)
    assert sum(series.mean_conf_variation) < 0
    assert series.adv_loss[-1] > series.adv_loss[0]


def test_perturbation_file_round_trip(tmp_path):
    cfg = atk.AttackConfig(loss="tog", mode="vanish", epsilon=4 / 255, init="uniform", seed=2)
    pert = atk.init_perturbation(cfg)
    pert.iterations = 7
    path = tmp_path / "d.pcbu"
    atk.save_perturbation(pert, path)
    back = atk.load_perturbation(path)
    assert np.array_equal(back.delta, pert.delta)
    assert back.config == cfg and back.iterations == 7
    data = path.read_bytes()
    (tmp_path / "bad.pcbu").write_bytes(b"PCBWGT01" + data[8:])
    with pytest.raises(FormatError):
        atk.load_perturbation(tmp_path / "bad.pcbu")


def test_perturbation_file_rejects_budget_violation(tmp_path):
    cfg = atk.AttackConfig(epsilon=1 / 255)
    path = tmp_path / "d.pcbu"
    atk.save_perturbation(atk.Perturbation(np.full((3, 64, 64), 0.5), cfg), path)
    with pytest.raises(FormatError, match="epsilon"):
        atk.load_perturbation(path)
