import numpy as np

from dncf import autodiff as ad
from dncf.gradcheck import check, objective_case, op_cases, rel_error


def test_rel_error_normwise():
    assert rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_error(np.array([2.0, 0.0]), np.array([1.0, 0.0])) == 0.5


def test_check_flags_a_wrong_gradient():
    def broken(x):
        out = ad.sum_(ad.square(x))
        return ad._make("broken", out.data, (x,), lambda g: (g * 3.0 * x.data,))
    worst, _ = check(broken, lambda r: [r.standard_normal(5)], trials=2, seed=0)
    assert worst > 0.1


def test_every_op_case_is_covered():
    names = set(op_cases())
    for op in ("conv2d", "upsample_bilinear", "instance_norm", "relu", "negative_part",
               "mse_loss", "cross_entropy", "tv_iso", "avg_pool", "matmul"):
        assert op in names


def test_pattern_detects_kink_crossings():
    f, sample, pattern = objective_case(size=8, seed=0)
    args = sample(np.random.default_rng(0))
    base = pattern(*args)
    assert pattern(*args) == base
    moved = [a.copy() for a in args]
    moved[1] = -moved[1]
    assert pattern(*moved) != base
