import numpy as np
import pytest

from dncf import autodiff as ad
from dncf.adversarial import (AttackConfig, Classifier, DefenseConfig, attack, bim, cw_attack,
                              defend, ffgsm, fgsm, lbfgs_attack, pattern_dataset, pgd,
                              toy_classifier_train)

EPS, ALPHA = 8 / 256, 2 / 256


def linear_classifier(w):
    """Two-class classifier on (N, 1, 1, 2) images with logits (0, w.x)."""
    w = np.asarray(w, dtype=float)

    def logits(x):
        flat = ad.reshape(x, (x.shape[0], 2))
        s = ad.matmul(flat, w[:, None])
        return ad.concat([ad.mul(s, 0.0), s], axis=1)
    return Classifier(logits, 2)


@pytest.fixture(scope="module")
def batch():
    return pattern_dataset(60, seed=77)


def check_ball(adv, x, eps):
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    assert np.max(np.abs(adv - x)) <= eps + 1e-12


# ---------------------------------------------------------------- hand oracles

def test_fgsm_zero_epsilon_identity():
    clf = linear_classifier([1.0, -1.0])
    x = np.array([[[[0.3, 0.6]]]])
    np.testing.assert_array_equal(fgsm(clf, x, [1], 0.0), x)


def test_fgsm_hand_gradient():
    # true label 1 has logit w.x; the loss gradient is -(1 - p1) w, so the step is -eps*sign(w)
    clf = linear_classifier([1.0, -1.0])
    x = np.array([[[[0.5, 0.5]]]])
    adv = fgsm(clf, x, [1], 0.1)
    np.testing.assert_allclose(adv.reshape(2), [0.4, 0.6])
    adv0 = fgsm(clf, x, [0], 0.1)
    np.testing.assert_allclose(adv0.reshape(2), [0.6, 0.4])


def test_bim_single_step_equals_fgsm(trained, batch):
    x, y = batch
    clf = trained.classifier
    np.testing.assert_array_equal(bim(clf, x, y, EPS, EPS, 1), fgsm(clf, x, y, EPS))


def test_bim_projection_saturates(trained, batch):
    x, y = batch
    adv = bim(trained.classifier, x[:5], y[:5], EPS, alpha=1.0, n=2)
    moved = np.abs(adv - x[:5])[(x[:5] > EPS) & (x[:5] < 1 - EPS)]
    # pixels with a nonzero gradient sign land exactly on the ball's surface
    stepped = moved > 0
    assert stepped.mean() > 0.99
    np.testing.assert_allclose(moved[stepped], EPS, atol=1e-15)


def test_iterates_stay_in_ball(trained, batch):
    x, y = batch
    for fn in (lambda tr: bim(trained.classifier, x, y, EPS, ALPHA, 7, trace=tr),
               lambda tr: pgd(trained.classifier, x, y, EPS, ALPHA, 7, seed=1, trace=tr)):
        trace = []
        fn(trace)
        assert len(trace) == 7
        for it in trace:
            check_ball(it, x, EPS)


def test_pgd_zero_radius_is_bim_and_seeded(trained, batch):
    x, y = batch
    clf = trained.classifier
    np.testing.assert_array_equal(pgd(clf, x, y, start_radius=0.0), bim(clf, x, y))
    np.testing.assert_array_equal(pgd(clf, x, y, seed=5), pgd(clf, x, y, seed=5))
    assert not np.array_equal(pgd(clf, x, y, seed=5), pgd(clf, x, y, seed=6))


def test_ffgsm_zero_alpha_stays_in_start_ball(trained, batch):
    x, y = batch
    check_ball(ffgsm(trained.classifier, x, y, EPS, 0.0), x, EPS)


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(kind="deepfool")
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-1)
    with pytest.raises(ValueError):
        AttackConfig(n=0)


# ---------------------------------------------------------------- CW and L-BFGS on a 2-D image space

def grid_boundary_distance(w, x0, target, n=801):
    """Smallest squared distance from x0 to a grid point of [0,1]^2 classified as ``target``."""
    g = np.linspace(0, 1, n)
    xx, yy = np.meshgrid(g, g)
    s = w[0] * xx + w[1] * yy
    hit = s > 0 if target == 1 else s < 0
    d = (xx - x0[0]) ** 2 + (yy - x0[1]) ** 2
    return d[hit].min(), np.array([xx[hit][np.argmin(d[hit])], yy[hit][np.argmin(d[hit])]])


def test_cw_crosses_boundary_like_grid_oracle():
    w = np.array([1.0, -2.0])
    clf = linear_classifier(w)
    x0 = np.array([0.2, 0.6])  # w.x0 = -1.0, class 0
    img = x0.reshape(1, 1, 1, 2)
    adv = cw_attack(clf, img, [0], target=1, c=1.0, steps=500, lr=0.01)
    assert clf.predict(adv)[0] == 1
    d_best, p_best = grid_boundary_distance(w, x0, 1)
    d = np.sum((adv.reshape(2) - x0) ** 2)
    assert d <= d_best + 5e-3
    np.testing.assert_allclose(adv.reshape(2), p_best, atol=0.05)


def test_lbfgs_attack_matches_cw_direction():
    w = np.array([1.0, -2.0])
    clf = linear_classifier(w)
    x0 = np.array([0.2, 0.6])
    img = x0.reshape(1, 1, 2)
    adv_l = lbfgs_attack(clf, img, 0, target=1, c=1.0, steps=50).reshape(2) - x0
    adv_c = cw_attack(clf, img[None], [0], target=1, steps=500).reshape(2) - x0
    assert clf.predict((x0 + adv_l).reshape(1, 1, 1, 2))[0] == 1
    cos = adv_l @ adv_c / (np.linalg.norm(adv_l) * np.linalg.norm(adv_c))
    assert cos > 0.99


def test_cw_large_c_stays_at_input():
    clf = linear_classifier([1.0, -2.0])
    img = np.array([[[[0.2, 0.6]]]])
    adv = cw_attack(clf, img, [0], target=1, c=1e4, steps=100)
    assert np.max(np.abs(adv - img)) < 1e-3
    adv_l = lbfgs_attack(clf, img[0], 0, target=1, c=1e4, steps=20)
    assert np.max(np.abs(adv_l - img[0])) < 1e-3


def test_cw_already_target_shrinks_distance():
    clf = linear_classifier([1.0, -2.0])
    img = np.array([[[[0.8, 0.1]]]])  # already class 1
    adv = cw_attack(clf, img, [1], target=1, steps=50)
    assert np.max(np.abs(adv - img)) < 1e-5


# ---------------------------------------------------------------- toy classifier and defense

def test_toy_classifier_trains_deterministically(trained):
    assert trained.test_accuracy >= 0.9
    again = toy_classifier_train(seed=0)
    assert again.test_accuracy == trained.test_accuracy
    assert all(np.array_equal(trained.params[k].data, again.params[k].data) for k in trained.params)


def test_pattern_dataset_balanced_and_in_range():
    x, y = pattern_dataset(200, seed=3)
    assert x.shape == (200, 3, 32, 32) and x.min() >= 0 and x.max() <= 1
    assert np.bincount(y, minlength=4).min() >= 40


def test_attacks_respect_contracts(trained, batch):
    x, y = batch
    for kind in ("fgsm", "bim", "pgd", "ffgsm"):
        check_ball(attack(trained.classifier, x, y, AttackConfig(kind=kind)), x, EPS)
    for kind, kw in (("cw", {"steps": 20}), ("lbfgs", {"steps": 5})):
        adv = attack(trained.classifier, x[:3], y[:3], AttackConfig(kind=kind, **kw))
        assert adv.shape == x[:3].shape and adv.min() >= 0 and adv.max() <= 1


def test_success_monotone_in_epsilon(trained):
    x, y = pattern_dataset(200, seed=77)
    clf = trained.classifier
    assert clf.accuracy(fgsm(clf, x, y, 8 / 256), y) <= clf.accuracy(fgsm(clf, x, y, 2 / 256), y)


def test_defense_near_benign_on_clean_and_random(batch):
    x = batch[0][:10]
    out = defend(x, DefenseConfig(), seed=0)
    assert out.shape == x.shape
    assert np.sqrt(np.mean((out - x) ** 2)) < 0.05
    assert not np.array_equal(out, defend(x, DefenseConfig(), seed=1))
